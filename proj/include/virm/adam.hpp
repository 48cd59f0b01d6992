#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "virm/tensor.hpp"

namespace virm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second-moment accumulators (one pair per parameter tensor, in a
/// fixed order) with the shared step counter.
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  static AdamState init(std::span<Tensor* const> params, AdamConfig cfg) {
    AdamState s;
    s.cfg = cfg;
    for (Tensor* p : params) {
      s.m.push_back(Tensor::zeros(p->shape()));
      s.v.push_back(Tensor::zeros(p->shape()));
    }
    return s;
  }

  /// p <- p - lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    if (params.size() != m.size() || grads.size() != m.size()) {
      throw ShapeError("adam: " + std::to_string(params.size()) + " params / " +
                       std::to_string(grads.size()) + " grads for " + std::to_string(m.size()) +
                       " state slots");
    }
    ++t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < m.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      require_same_shape(p, g, "adam");
      require_same_shape(p, m[i], "adam");
      for (std::size_t j = 0; j < p.numel(); ++j) {
        m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g[j];
        v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g[j] * g[j];
        const double mhat = m[i][j] / c1;
        const double vhat = v[i][j] / c2;
        p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
};

}  // namespace virm
