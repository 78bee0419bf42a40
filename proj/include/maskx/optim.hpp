#pragma once

#include <cmath>

#include "maskx/tensor.hpp"

namespace maskx {

struct SgdConfig {
  float lr = 0.02f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
};

/// SGD with classical momentum and decoupled-from-nothing L2:
///   v' = m*v + (g + wd*p);  p' = p - lr*v'
inline void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity,
                              const SgdConfig& cfg) {
  check(param.same_shape(grad), "sgd: param/grad shape mismatch");
  check(param.same_shape(velocity), "sgd: param/velocity shape mismatch");
  for (int64_t i = 0; i < param.numel(); ++i) {
    check(std::isfinite(grad.v[i]), "sgd: non-finite gradient");
    const float vn = cfg.momentum * velocity.v[i] + (grad.v[i] + cfg.weight_decay * param.v[i]);
    velocity.v[i] = vn;
    param.v[i] -= cfg.lr * vn;
  }
}

}  // namespace maskx
