#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskx {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

/// Dense n-dimensional array, row-major. Scalar type S is float for
/// training and double for gradient verification.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> v;

  TensorT() = default;
  explicit TensorT(std::vector<int> sh, S fill = S(0)) : shape(std::move(sh)) {
    v.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static TensorT from(std::vector<int> sh, std::vector<S> vals) {
    TensorT t;
    t.shape = std::move(sh);
    check(numel_of(t.shape) == static_cast<int64_t>(vals.size()),
          "tensor value count does not match shape");
    t.v = std::move(vals);
    return t;
  }

  static int64_t numel_of(const std::vector<int>& sh) {
    int64_t n = 1;
    for (int e : sh) {
      check(e > 0, "tensor extent must be positive");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int ndims() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  S& at2(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
  S at2(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }

  S& at3(int c, int i, int j) {
    return v[(static_cast<size_t>(c) * shape[1] + i) * shape[2] + j];
  }
  S at3(int c, int i, int j) const {
    return v[(static_cast<size_t>(c) * shape[1] + i) * shape[2] + j];
  }

  TensorT<double> to_double() const {
    TensorT<double> out;
    out.shape = shape;
    out.v.assign(v.begin(), v.end());
    return out;
  }
  TensorT<float> to_float() const {
    TensorT<float> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<float>(v[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& sh) {
  std::string s = "[";
  for (size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sh[i]);
  }
  return s + "]";
}

}  // namespace maskx
