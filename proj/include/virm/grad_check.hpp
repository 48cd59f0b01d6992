#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "virm/tensor.hpp"

namespace virm {

/// Central-difference check of an analytic gradient. `f` maps a flat
/// parameter tensor to a scalar loss; `analytic` is d f / d point at `point`.
/// Returns the maximum over coordinates of
///   |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
inline double finite_diff_check(const std::function<double(const Tensor&)>& f,
                                const Tensor& point, const Tensor& analytic, double step) {
  require_same_shape(point, analytic, "finite_diff_check");
  if (step <= 0.0) throw ValueError("finite_diff_check: step must be positive");
  Tensor x = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace virm
