#include "maskx/tape.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>

#include "maskx/bilinear.hpp"

namespace maskx {

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<Mat<S>>;
template <typename S>
using CMapM = Eigen::Map<const Mat<S>>;

template <typename S>
void ensure_finite(const TensorT<S>& t, const char* op) {
  for (S x : t.v) {
    if (!std::isfinite(static_cast<double>(x)))
      fail(std::string(op) + ": non-finite value in output");
  }
}

struct ConvDims {
  int cin, h, w, cout, kh, kw, ho, wo;
};

template <typename S>
ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& w, int stride, int pad) {
  check(x.ndims() == 3, "conv2d: input must be [Cin,H,W]");
  check(w.ndims() == 4, "conv2d: weights must be [Cout,Cin,kh,kw]");
  check(w.dim(1) == x.dim(0), "conv2d: channel mismatch");
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(pad >= 0, "conv2d: pad must be >= 0");
  ConvDims d;
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  check(d.ho >= 1 && d.wo >= 1, "conv2d: kernel larger than padded input");
  return d;
}

template <typename S>
void im2col(const TensorT<S>& x, const ConvDims& d, int stride, int pad, S* cols) {
  // cols: [cin*kh*kw, ho*wo]
  const int64_t span = static_cast<int64_t>(d.ho) * d.wo;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        S* row = cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * span;
        for (int oi = 0; oi < d.ho; ++oi) {
          const int yi = oi * stride + ki - pad;
          if (yi < 0 || yi >= d.h) {
            for (int oj = 0; oj < d.wo; ++oj) row[oi * d.wo + oj] = S(0);
            continue;
          }
          const S* src = &x.v[(static_cast<size_t>(c) * d.h + yi) * d.w];
          for (int oj = 0; oj < d.wo; ++oj) {
            const int xj = oj * stride + kj - pad;
            row[oi * d.wo + oj] = (xj < 0 || xj >= d.w) ? S(0) : src[xj];
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, const ConvDims& d, int stride, int pad, TensorT<S>& dx) {
  const int64_t span = static_cast<int64_t>(d.ho) * d.wo;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const S* row = cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * span;
        for (int oi = 0; oi < d.ho; ++oi) {
          const int yi = oi * stride + ki - pad;
          if (yi < 0 || yi >= d.h) continue;
          S* dst = &dx.v[(static_cast<size_t>(c) * d.h + yi) * d.w];
          for (int oj = 0; oj < d.wo; ++oj) {
            const int xj = oj * stride + kj - pad;
            if (xj >= 0 && xj < d.w) dst[xj] += row[oi * d.wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
typename TapeT<S>::Id TapeT<S>::push(TensorT<S> value, bool requires_grad,
                                     std::function<void(TapeT&, Id)> bw, const char* op) {
  ensure_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

template <typename S>
TensorT<S>* TapeT<S>::grad_buf(Id id) {
  Node& n = nodes_[check_id(id)];
  if (!n.requires_grad) return nullptr;
  if (!n.grad_alloc) {
    n.grad = TensorT<S>(n.value.shape);
    n.grad_alloc = true;
  }
  return &n.grad;
}

template <typename S>
const TensorT<S>& TapeT<S>::grad(Id id) const {
  const Node& n = nodes_[check_id(id)];
  check(n.grad_alloc, "grad: no gradient reached this node");
  return n.grad;
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::leaf(TensorT<S> value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr, "leaf");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::zero_scalar() {
  return push(TensorT<S>({1}), false, nullptr, "zero");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::add(Id a, Id b) {
  const TensorT<S>& va = value(a);
  const TensorT<S>& vb = value(b);
  check(va.same_shape(vb), "add: shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  TensorT<S> out(va.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = va.v[i] + vb.v[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](TapeT& t, Id self) {
    const TensorT<S>& g = t.grad(self);
    if (auto* ga = t.grad_buf(a))
      for (int64_t i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
    if (auto* gb = t.grad_buf(b))
      for (int64_t i = 0; i < g.numel(); ++i) gb->v[i] += g.v[i];
  }, "add");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::mul(Id a, Id b) {
  const TensorT<S>& va = value(a);
  const TensorT<S>& vb = value(b);
  check(va.same_shape(vb), "mul: shape mismatch");
  TensorT<S> out(va.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = va.v[i] * vb.v[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](TapeT& t, Id self) {
    const TensorT<S>& g = t.grad(self);
    const TensorT<S>& va = t.value(a);
    const TensorT<S>& vb = t.value(b);
    if (auto* ga = t.grad_buf(a))
      for (int64_t i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i] * vb.v[i];
    if (auto* gb = t.grad_buf(b))
      for (int64_t i = 0; i < g.numel(); ++i) gb->v[i] += g.v[i] * va.v[i];
  }, "mul");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::matmul(Id a, Id b) {
  const TensorT<S>& va = value(a);
  const TensorT<S>& vb = value(b);
  check(va.ndims() == 2 && vb.ndims() == 2, "matmul: operands must be 2-d");
  check(va.dim(1) == vb.dim(0), "matmul: inner dims differ");
  const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  TensorT<S> out({m, n});
  MapM<S>(out.v.data(), m, n).noalias() =
      CMapM<S>(va.v.data(), m, k) * CMapM<S>(vb.v.data(), k, n);
  return push(std::move(out), needs(a) || needs(b), [a, b, m, k, n](TapeT& t, Id self) {
    CMapM<S> g(t.grad(self).v.data(), m, n);
    if (auto* ga = t.grad_buf(a))
      MapM<S>(ga->v.data(), m, k).noalias() +=
          g * CMapM<S>(t.value(b).v.data(), k, n).transpose();
    if (auto* gb = t.grad_buf(b))
      MapM<S>(gb->v.data(), k, n).noalias() +=
          CMapM<S>(t.value(a).v.data(), m, k).transpose() * g;
  }, "matmul");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::linear(Id x, Id w) {
  const TensorT<S>& vx = value(x);
  const TensorT<S>& vw = value(w);
  check(vx.ndims() == 2 && vw.ndims() == 2, "linear: operands must be 2-d");
  const int n = vx.dim(0), din = vx.dim(1), dout = vw.dim(0);
  check(vw.dim(1) == din + 1, "linear: weight must be [Dout, Din+1] with bias column");
  TensorT<S> out({n, dout});
  CMapM<S> xm(vx.v.data(), n, din);
  CMapM<S> wm(vw.v.data(), dout, din + 1);
  MapM<S> om(out.v.data(), n, dout);
  om.noalias() = xm * wm.leftCols(din).transpose();
  om.rowwise() += wm.col(din).transpose();
  return push(std::move(out), needs(x) || needs(w), [x, w, n, din, dout](TapeT& t, Id self) {
    CMapM<S> g(t.grad(self).v.data(), n, dout);
    if (auto* gx = t.grad_buf(x)) {
      CMapM<S> wm(t.value(w).v.data(), dout, din + 1);
      MapM<S>(gx->v.data(), n, din).noalias() += g * wm.leftCols(din);
    }
    if (auto* gw = t.grad_buf(w)) {
      CMapM<S> xm(t.value(x).v.data(), n, din);
      MapM<S> gwm(gw->v.data(), dout, din + 1);
      gwm.leftCols(din).noalias() += g.transpose() * xm;
      gwm.col(din) += g.colwise().sum().transpose();
    }
  }, "linear");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::conv2d(Id x, Id w, Id bias, int stride, int pad) {
  const TensorT<S>& vx = value(x);
  const TensorT<S>& vw = value(w);
  const ConvDims d = conv_dims(vx, vw, stride, pad);
  if (bias != kNone) {
    check(value(bias).ndims() == 1 && value(bias).dim(0) == d.cout,
          "conv2d: bias must be [Cout]");
  }
  const int64_t span = static_cast<int64_t>(d.ho) * d.wo;
  const int64_t krows = static_cast<int64_t>(d.cin) * d.kh * d.kw;
  auto cols = std::make_shared<std::vector<S>>(krows * span);
  im2col(vx, d, stride, pad, cols->data());

  TensorT<S> out({d.cout, d.ho, d.wo});
  MapM<S> om(out.v.data(), d.cout, span);
  om.noalias() = CMapM<S>(vw.v.data(), d.cout, krows) * CMapM<S>(cols->data(), krows, span);
  if (bias != kNone) {
    const TensorT<S>& vb = value(bias);
    for (int c = 0; c < d.cout; ++c) om.row(c).array() += vb.v[static_cast<size_t>(c)];
  }
  bool rg = needs(x) || needs(w) || (bias != kNone && needs(bias));
  return push(std::move(out), rg,
              [x, w, bias, d, stride, pad, cols, span, krows](TapeT& t, Id self) {
    CMapM<S> g(t.grad(self).v.data(), d.cout, span);
    if (auto* gw = t.grad_buf(w))
      MapM<S>(gw->v.data(), d.cout, krows).noalias() +=
          g * CMapM<S>(cols->data(), krows, span).transpose();
    if (bias != kNone) {
      if (auto* gb = t.grad_buf(bias))
        for (int c = 0; c < d.cout; ++c) gb->v[static_cast<size_t>(c)] += g.row(c).sum();
    }
    if (auto* gx = t.grad_buf(x)) {
      std::vector<S> dcols(static_cast<size_t>(krows * span));
      MapM<S>(dcols.data(), krows, span).noalias() =
          CMapM<S>(t.value(w).v.data(), d.cout, krows).transpose() * g;
      col2im_add(dcols.data(), d, stride, pad, *gx);
    }
  }, "conv2d");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::relu(Id a) {
  const TensorT<S>& va = value(a);
  TensorT<S> out(va.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = va.v[i] > S(0) ? va.v[i] : S(0);
  return push(std::move(out), needs(a), [a](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      const TensorT<S>& va = t.value(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (va.v[i] > S(0)) ga->v[i] += g.v[i];
    }
  }, "relu");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::leaky_relu(Id a, S alpha) {
  check(alpha > S(0), "leaky_relu: alpha must be > 0");
  const TensorT<S>& va = value(a);
  TensorT<S> out(va.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.v[i] = va.v[i] > S(0) ? va.v[i] : alpha * va.v[i];
  return push(std::move(out), needs(a), [a, alpha](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      const TensorT<S>& va = t.value(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga->v[i] += va.v[i] > S(0) ? g.v[i] : alpha * g.v[i];
    }
  }, "leaky_relu");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::sigmoid(Id a) {
  const TensorT<S>& va = value(a);
  TensorT<S> out(va.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.v[i] = S(1) / (S(1) + std::exp(-va.v[i]));
  return push(std::move(out), needs(a), [a](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      const TensorT<S>& y = t.value(self);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga->v[i] += g.v[i] * y.v[i] * (S(1) - y.v[i]);
    }
  }, "sigmoid");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::concat(const std::vector<Id>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  const TensorT<S>& first = value(xs[0]);
  check(axis >= 0 && axis < first.ndims(), "concat: axis out of range");
  std::vector<int> out_shape = first.shape;
  int axis_total = 0;
  for (Id x : xs) {
    const TensorT<S>& vx = value(x);
    check(vx.ndims() == first.ndims(), "concat: rank mismatch");
    for (int i = 0; i < first.ndims(); ++i)
      if (i != axis)
        check(vx.dim(i) == first.dim(i), "concat: shape mismatch off the concat axis");
    axis_total += vx.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  int64_t after = 1;
  for (int i = axis + 1; i < first.ndims(); ++i) after *= first.dim(i);

  TensorT<S> out(out_shape);
  const int64_t out_stride = static_cast<int64_t>(axis_total) * after;
  bool rg = false;
  int64_t off = 0;
  for (Id x : xs) {
    const TensorT<S>& vx = value(x);
    const int64_t seg = static_cast<int64_t>(vx.dim(axis)) * after;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(vx.v.data() + o * seg, seg, out.v.data() + o * out_stride + off);
    off += seg;
    rg = rg || needs(x);
  }
  std::vector<Id> parents = xs;
  return push(std::move(out), rg,
              [parents, axis, outer, after, out_stride](TapeT& t, Id self) {
    const TensorT<S>& g = t.grad(self);
    int64_t off = 0;
    for (Id x : parents) {
      const int64_t seg = static_cast<int64_t>(t.value(x).dim(axis)) * after;
      if (auto* gx = t.grad_buf(x)) {
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = g.v.data() + o * out_stride + off;
          S* dst = gx->v.data() + o * seg;
          for (int64_t i = 0; i < seg; ++i) dst[i] += src[i];
        }
      }
      off += seg;
    }
  }, "concat");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::tile(Id a, int axis, int count) {
  check(count >= 1, "tile: count must be >= 1");
  std::vector<Id> xs(static_cast<size_t>(count), a);
  return concat(xs, axis);
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::bilinear_crop(Id x, RectF rect, int out_h, int out_w) {
  const TensorT<S>& vx = value(x);
  check(vx.ndims() == 3, "bilinear_crop: input must be [C,h,w]");
  check(out_h >= 1 && out_w >= 1, "bilinear_crop: output size must be positive");
  check(rect.width() > 0 && rect.height() > 0, "bilinear_crop: degenerate box");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  const double by = rect.height() / out_h;
  const double bx = rect.width() / out_w;
  TensorT<S> out({c, out_h, out_w});
  for (int oi = 0; oi < out_h; ++oi) {
    const double sy = rect.y0 + (oi + 0.5) * by;
    for (int oj = 0; oj < out_w; ++oj) {
      const double sx = rect.x0 + (oj + 0.5) * bx;
      const BilinearTap tp = bilinear_tap(sy, sx, h, w);
      for (int ch = 0; ch < c; ++ch) {
        const double a00 = vx.at3(ch, tp.i0, tp.j0);
        const double a01 = vx.at3(ch, tp.i0, tp.j1);
        const double a10 = vx.at3(ch, tp.i1, tp.j0);
        const double a11 = vx.at3(ch, tp.i1, tp.j1);
        const double top = a00 + (a01 - a00) * tp.fx;
        const double bot = a10 + (a11 - a10) * tp.fx;
        out.at3(ch, oi, oj) = static_cast<S>(top + (bot - top) * tp.fy);
      }
    }
  }
  return push(std::move(out), needs(x),
              [x, rect, out_h, out_w, c, h, w, by, bx](TapeT& t, Id self) {
    auto* gx = t.grad_buf(x);
    if (!gx) return;
    const TensorT<S>& g = t.grad(self);
    for (int oi = 0; oi < out_h; ++oi) {
      const double sy = rect.y0 + (oi + 0.5) * by;
      for (int oj = 0; oj < out_w; ++oj) {
        const double sx = rect.x0 + (oj + 0.5) * bx;
        const BilinearTap tp = bilinear_tap(sy, sx, h, w);
        const double w00 = (1 - tp.fy) * (1 - tp.fx);
        const double w01 = (1 - tp.fy) * tp.fx;
        const double w10 = tp.fy * (1 - tp.fx);
        const double w11 = tp.fy * tp.fx;
        for (int ch = 0; ch < c; ++ch) {
          const double gv = g.at3(ch, oi, oj);
          gx->at3(ch, tp.i0, tp.j0) += static_cast<S>(gv * w00);
          gx->at3(ch, tp.i0, tp.j1) += static_cast<S>(gv * w01);
          gx->at3(ch, tp.i1, tp.j0) += static_cast<S>(gv * w10);
          gx->at3(ch, tp.i1, tp.j1) += static_cast<S>(gv * w11);
        }
      }
    }
  }, "bilinear_crop");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::reshape(Id a, std::vector<int> shape) {
  const TensorT<S>& va = value(a);
  check(TensorT<S>::numel_of(shape) == va.numel(), "reshape: element count mismatch");
  TensorT<S> out;
  out.shape = std::move(shape);
  out.v = va.v;
  return push(std::move(out), needs(a), [a](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      for (int64_t i = 0; i < g.numel(); ++i) ga->v[i] += g.v[i];
    }
  }, "reshape");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::flatten(Id a) {
  return reshape(a, {1, static_cast<int>(value(a).numel())});
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::transpose(Id a) {
  const TensorT<S>& va = value(a);
  check(va.ndims() == 2, "transpose: input must be 2-d");
  const int r = va.dim(0), c = va.dim(1);
  TensorT<S> out({c, r});
  MapM<S>(out.v.data(), c, r).noalias() = CMapM<S>(va.v.data(), r, c).transpose();
  return push(std::move(out), needs(a), [a, r, c](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a))
      MapM<S>(ga->v.data(), r, c).noalias() +=
          CMapM<S>(t.grad(self).v.data(), c, r).transpose();
  }, "transpose");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::slice_rows(Id a, int r0, int r1) {
  const TensorT<S>& va = value(a);
  check(va.ndims() == 2, "slice_rows: input must be 2-d");
  check(0 <= r0 && r0 < r1 && r1 <= va.dim(0), "slice_rows: row range out of bounds");
  const int c = va.dim(1);
  TensorT<S> out({r1 - r0, c});
  std::copy_n(va.v.data() + static_cast<int64_t>(r0) * c,
              static_cast<int64_t>(r1 - r0) * c, out.v.data());
  return push(std::move(out), needs(a), [a, r0, c](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      S* dst = ga->v.data() + static_cast<int64_t>(r0) * c;
      for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g.v[i];
    }
  }, "slice_rows");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::select_cols4(Id a, std::vector<int> offsets) {
  const TensorT<S>& va = value(a);
  check(va.ndims() == 2, "select_cols4: input must be 2-d");
  const int n = va.dim(0), cols = va.dim(1);
  check(static_cast<int>(offsets.size()) == n, "select_cols4: one offset per row required");
  for (int off : offsets) check(off >= 0 && off + 4 <= cols, "select_cols4: offset out of range");
  TensorT<S> out({n, 4});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 4; ++j) out.at2(i, j) = va.at2(i, offsets[static_cast<size_t>(i)] + j);
  return push(std::move(out), needs(a), [a, offsets, n](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const TensorT<S>& g = t.grad(self);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < 4; ++j)
          ga->at2(i, offsets[static_cast<size_t>(i)] + j) += g.at2(i, j);
    }
  }, "select_cols4");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::sum(Id a) {
  const TensorT<S>& va = value(a);
  S total = S(0);
  for (S x : va.v) total += x;
  TensorT<S> out({1});
  out.v[0] = total;
  return push(std::move(out), needs(a), [a](TapeT& t, Id self) {
    if (auto* ga = t.grad_buf(a)) {
      const S g = t.grad(self).v[0];
      for (int64_t i = 0; i < ga->numel(); ++i) ga->v[i] += g;
    }
  }, "sum");
}

template <typename S>
typename TapeT<S>::Id TapeT<S>::stop_gradient(Id a) {
  TensorT<S> out = value(a);
  return push(std::move(out), false, nullptr, "stop_gradient");
}

template <typename S>
typename TapeT<S>::LossValue TapeT<S>::softmax_ce(Id logits, std::vector<int> labels) {
  const TensorT<S>& vl = value(logits);
  check(vl.ndims() == 2, "softmax_ce: logits must be [N,K]");
  const int n = vl.dim(0), k = vl.dim(1);
  check(static_cast<int>(labels.size()) == n, "softmax_ce: one label per row required");
  for (int lab : labels) check(lab >= 0 && lab < k, "softmax_ce: label out of range");
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const S* row = &vl.v[static_cast<size_t>(i) * k];
    double m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
    double se = 0;
    for (int j = 0; j < k; ++j) se += std::exp(static_cast<double>(row[j]) - m);
    total += m + std::log(se) - static_cast<double>(row[labels[static_cast<size_t>(i)]]);
  }
  TensorT<S> out({1});
  out.v[0] = static_cast<S>(total / n);
  Id id = push(std::move(out), needs(logits), [logits, labels, n, k](TapeT& t, Id self) {
    if (auto* gl = t.grad_buf(logits)) {
      const S g = t.grad(self).v[0];
      const TensorT<S>& vl = t.value(logits);
      for (int i = 0; i < n; ++i) {
        const S* row = &vl.v[static_cast<size_t>(i) * k];
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
        double se = 0;
        for (int j = 0; j < k; ++j) se += std::exp(static_cast<double>(row[j]) - m);
        S* gr = &gl->v[static_cast<size_t>(i) * k];
        for (int j = 0; j < k; ++j) {
          double p = std::exp(static_cast<double>(row[j]) - m) / se;
          double onehot = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          gr[j] += static_cast<S>(g * (p - onehot) / n);
        }
      }
    }
  }, "softmax_ce");
  return {id, n};
}

template <typename S>
typename TapeT<S>::LossValue TapeT<S>::bce_with_logits(Id logits, TensorT<S> target,
                                                       const TensorT<S>* weight) {
  const TensorT<S>& vl = value(logits);
  check(vl.same_shape(target), "bce_with_logits: prediction/target shape mismatch");
  if (weight) check(vl.same_shape(*weight), "bce_with_logits: weight shape mismatch");
  int64_t count = 0;
  double total = 0;
  for (int64_t i = 0; i < vl.numel(); ++i) {
    const double wgt = weight ? static_cast<double>(weight->v[i]) : 1.0;
    if (wgt == 0.0) continue;
    ++count;
    const double x = vl.v[i];
    const double tgt = target.v[i];
    total += std::max(x, 0.0) - x * tgt + std::log1p(std::exp(-std::abs(x)));
  }
  if (count == 0) return {zero_scalar(), 0};
  TensorT<S> out({1});
  out.v[0] = static_cast<S>(total / count);
  auto tgt = std::make_shared<TensorT<S>>(std::move(target));
  std::shared_ptr<TensorT<S>> wsh;
  if (weight) wsh = std::make_shared<TensorT<S>>(*weight);
  Id id = push(std::move(out), needs(logits), [logits, tgt, wsh, count](TapeT& t, Id self) {
    if (auto* gl = t.grad_buf(logits)) {
      const S g = t.grad(self).v[0];
      const TensorT<S>& vl = t.value(logits);
      for (int64_t i = 0; i < vl.numel(); ++i) {
        const double wgt = wsh ? static_cast<double>(wsh->v[i]) : 1.0;
        if (wgt == 0.0) continue;
        const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(vl.v[i])));
        gl->v[i] += static_cast<S>(g * (sig - tgt->v[i]) / count);
      }
    }
  }, "bce_with_logits");
  return {id, count};
}

template <typename S>
typename TapeT<S>::LossValue TapeT<S>::smooth_l1(Id pred, TensorT<S> target) {
  const TensorT<S>& vp = value(pred);
  check(vp.same_shape(target), "smooth_l1: prediction/target shape mismatch");
  const int64_t count = vp.numel();
  double total = 0;
  for (int64_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(vp.v[i]) - target.v[i];
    const double a = std::abs(d);
    total += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  TensorT<S> out({1});
  out.v[0] = static_cast<S>(total / count);
  auto tgt = std::make_shared<TensorT<S>>(std::move(target));
  Id id = push(std::move(out), needs(pred), [pred, tgt, count](TapeT& t, Id self) {
    if (auto* gp = t.grad_buf(pred)) {
      const S g = t.grad(self).v[0];
      const TensorT<S>& vp = t.value(pred);
      for (int64_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(vp.v[i]) - tgt->v[i];
        const double slope = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
        gp->v[i] += static_cast<S>(g * slope / count);
      }
    }
  }, "smooth_l1");
  return {id, count};
}

template <typename S>
void TapeT<S>::backward(Id loss) {
  check(!consumed_, "backward: tape already consumed");
  const size_t li = check_id(loss);
  check(nodes_[li].value.numel() == 1, "backward: loss must be scalar");
  consumed_ = true;
  Node& ln = nodes_[li];
  if (!ln.grad_alloc) {
    ln.grad = TensorT<S>(ln.value.shape);
    ln.grad_alloc = true;
  }
  ln.grad.v[0] = S(1);
  for (Id id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad_alloc && n.backward) n.backward(*this, id);
  }
}

template class TapeT<float>;
template class TapeT<double>;

double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  check(analytic.size() == numeric.size(), "max_rel_err: size mismatch");
  double worst = 0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(1.0, std::abs(numeric[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

double finite_diff_check(
    const std::function<TapeT<double>::Id(TapeT<double>&, TapeT<double>::Id)>& build,
    const TensorT<double>& point, double eps) {
  check(eps > 0, "finite_diff_check: eps must be > 0");
  TapeD tape;
  auto x = tape.leaf(point, true);
  auto loss = build(tape, x);
  check(tape.value(loss).numel() == 1, "finite_diff_check: function must return a scalar");
  tape.backward(loss);
  std::vector<double> analytic(static_cast<size_t>(point.numel()), 0.0);
  if (tape.has_grad(x)) analytic = tape.grad(x).v;

  auto eval = [&](int64_t i, double delta) {
    TapeD t;
    TensorT<double> p = point;
    p.v[static_cast<size_t>(i)] += delta;
    auto id = build(t, t.leaf(p, false));
    const double val = t.value(id).v[0];
    check(std::isfinite(val), "finite_diff_check: non-finite evaluation");
    return val;
  };

  std::vector<double> numeric(static_cast<size_t>(point.numel()));
  for (int64_t i = 0; i < point.numel(); ++i)
    numeric[static_cast<size_t>(i)] = (eval(i, eps) - eval(i, -eps)) / (2 * eps);
  return max_rel_err(analytic, numeric);
}

}  // namespace maskx
