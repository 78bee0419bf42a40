#pragma once

#include <array>
#include <functional>
#include <vector>

#include "maskx/tensor.hpp"

namespace maskx {

/// Continuous sampling rectangle in feature coordinates (x = column).
struct RectF {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

/// Reverse-mode tape. Records one forward pass as a topologically ordered
/// list of primitive applications; backward() sweeps it once in reverse.
/// One tape per training step; single-threaded by contract.
///
/// Dense layers use the bias-column convention throughout: a layer mapping
/// Din -> Dout is a single [Dout, Din+1] matrix whose last column is the
/// bias, applied as y = x . W[:, :Din]^T + W[:, Din].
template <typename S>
class TapeT {
 public:
  using Id = int32_t;
  static constexpr Id kNone = -1;

  /// Scalar loss node plus the number of contributing elements.
  /// count == 0 means the contributing set was empty and the value is 0.
  struct LossValue {
    Id id = kNone;
    int64_t count = 0;
    bool empty() const { return count == 0; }
  };

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  Id leaf(TensorT<S> value, bool requires_grad = false);

  Id add(Id a, Id b);
  Id mul(Id a, Id b);
  Id matmul(Id a, Id b);
  /// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] or kNone.
  Id conv2d(Id x, Id w, Id bias, int stride, int pad);
  Id relu(Id a);
  Id leaky_relu(Id a, S alpha);
  Id sigmoid(Id a);
  Id concat(const std::vector<Id>& xs, int axis);
  Id tile(Id a, int axis, int count);
  /// x: [C,h,w]; one bilinear sample per output bin, taken at bin centers.
  /// The rect is clamped to the feature extent by the caller.
  Id bilinear_crop(Id x, RectF rect, int out_h, int out_w);
  Id flatten(Id a);  // -> [1, numel]
  Id reshape(Id a, std::vector<int> shape);
  /// x: [N,Din], w: [Dout,Din+1] with bias column -> [N,Dout].
  Id linear(Id x, Id w);
  /// Identity forward; exactly zero gradient flows into the input edge.
  Id stop_gradient(Id a);

  Id transpose(Id a);                  // 2-d
  Id slice_rows(Id a, int r0, int r1); // 2-d, rows [r0, r1)
  /// a: [N, 4K]; picks 4 consecutive columns per row starting at offset[n].
  Id select_cols4(Id a, std::vector<int> offsets);
  Id sum(Id a);  // -> [1]

  /// Mean softmax cross-entropy; labels index columns of [N,K] logits.
  LossValue softmax_ce(Id logits, std::vector<int> labels);
  /// Mean binary cross-entropy on logits. Optional 0/1 weight selects the
  /// contributing elements (the per-channel mask in the mask loss).
  LossValue bce_with_logits(Id logits, TensorT<S> target, const TensorT<S>* weight = nullptr);
  /// Mean smooth-L1 (0.5 x^2 below 1, |x|-0.5 above).
  LossValue smooth_l1(Id pred, TensorT<S> target);

  /// Scalar zero with no parents; stands in for an empty loss component.
  Id zero_scalar();

  void backward(Id loss);

  const TensorT<S>& value(Id id) const { return nodes_[check_id(id)].value; }
  /// True iff gradient actually reached this node during backward.
  bool has_grad(Id id) const { return nodes_[check_id(id)].grad_alloc; }
  const TensorT<S>& grad(Id id) const;
  size_t size() const { return nodes_.size(); }

  /// Accumulation buffer for a parent node; nullptr when the parent does
  /// not require grad (that is how stop_gradient cuts the flow).
  TensorT<S>* grad_buf(Id id);

 private:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::function<void(TapeT&, Id)> backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;

  size_t check_id(Id id) const {
    check(id >= 0 && static_cast<size_t>(id) < nodes_.size(), "tape id out of range");
    return static_cast<size_t>(id);
  }
  bool needs(Id id) const { return nodes_[check_id(id)].requires_grad; }
  Id push(TensorT<S> value, bool requires_grad, std::function<void(TapeT&, Id)> bw,
          const char* op);
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

/// |analytic - numeric| / max(1, |numeric|), maximised over coordinates.
double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric);

/// Builds f on a fresh tape around the leaf for `point`, takes the analytic
/// gradient, and compares against central finite differences coordinate by
/// coordinate. Returns the max relative error.
double finite_diff_check(
    const std::function<TapeT<double>::Id(TapeT<double>&, TapeT<double>::Id)>& build,
    const TensorT<double>& point, double eps = 1e-5);

}  // namespace maskx
