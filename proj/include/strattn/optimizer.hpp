// SPDX-License-Identifier: Apache-2.0
//
// SGD with momentum and Adam over a parameter registry, plus the step-decay
// schedule. Update rules:
//   sgd-momentum: v <- mu*v + g + wd*p;  p <- p - lr*v
//   adam:         bias-corrected first/second moments, wd added to the
//                 gradient
// State tensors are ordered like the registry and serialize with it.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "strattn/block.hpp"

namespace strattn {

enum class OptKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptKind kind = OptKind::sgd_momentum;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  // step decay: lr * factor^floor(epoch / interval)
  double decay_factor = 1.0;
  int decay_interval = 1;

  double lr_at_epoch(int epoch) const {
    if (decay_factor == 1.0 || decay_interval < 1) return lr;
    double out = lr;
    for (int k = 0; k < epoch / decay_interval; ++k) out *= decay_factor;
    return out;
  }
};

template <class S>
struct OptimizerState {
  std::vector<Tensor<S>> moment1;  // momentum buffer / Adam first moment
  std::vector<Tensor<S>> moment2;  // Adam second moment; empty for SGD
  std::uint64_t step = 0;

  static OptimizerState init(const std::vector<ParamRef<S>>& params, OptKind kind) {
    OptimizerState st;
    for (const auto& p : params) st.moment1.emplace_back(p.value->shape());
    if (kind == OptKind::adam)
      for (const auto& p : params) st.moment2.emplace_back(p.value->shape());
    return st;
  }
};

template <class S>
void optimizer_step(const std::vector<ParamRef<S>>& params, OptimizerState<S>& st,
                    const OptimizerConfig& cfg, double lr) {
  if (params.size() != st.moment1.size())
    throw ShapeError("optimizer: state has " + std::to_string(st.moment1.size()) +
                     " slots for " + std::to_string(params.size()) + " parameters");
  ++st.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i].value;
    const Tensor<S>& g = *params[i].grad;
    Tensor<S>& m = st.moment1[i];
    require_same_shape(p, g, "optimizer grads");
    require_same_shape(p, m, "optimizer state");
    if (cfg.kind == OptKind::sgd_momentum) {
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double gk = double(g[k]) + cfg.weight_decay * double(p[k]);
        const double vk = cfg.momentum * double(m[k]) + gk;
        m[k] = S(vk);
        p[k] = S(double(p[k]) - lr * vk);
      }
    } else {
      Tensor<S>& v = st.moment2[i];
      const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double gk = double(g[k]) + cfg.weight_decay * double(p[k]);
        const double mk = cfg.beta1 * double(m[k]) + (1.0 - cfg.beta1) * gk;
        const double vk = cfg.beta2 * double(v[k]) + (1.0 - cfg.beta2) * gk * gk;
        m[k] = S(mk);
        v[k] = S(vk);
        p[k] = S(double(p[k]) - lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps));
      }
    }
  }
}

}  // namespace strattn
