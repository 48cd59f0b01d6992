#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "virm/rng.hpp"
#include "virm/sda.hpp"
#include "virm/tensor.hpp"

namespace virm {

// ---------------------------------------------------------------------------
// Empirical Rademacher complexity of the linear unit-ball class
// ---------------------------------------------------------------------------

/// Monte Carlo (or exact) estimate of E_sigma ||sum_i sigma_i x_i||_2 / m
/// together with its standard error and the instance dimensions.
struct RademacherEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t draws = 0;
  std::size_t m = 0;
  std::size_t k = 0;
};

inline double max_row_norm_sq(const Tensor& s) {
  if (s.rank() != 2 || s.dim(0) == 0) {
    throw ValueError("expected a nonempty row matrix, got " + s.shape_str());
  }
  double best = 0.0;
  for (std::size_t i = 0; i < s.dim(0); ++i) {
    double n2 = 0.0;
    for (double v : s.row(i)) n2 += v * v;
    best = std::max(best, n2);
  }
  return best;
}

/// sqrt(max_i ||x_i||^2 / m): the norm-based upper bound on the empirical
/// Rademacher complexity of the linear unit-ball class.
inline double lemma2_bound(const Tensor& s) {
  return std::sqrt(max_row_norm_sq(s) / static_cast<double>(s.dim(0)));
}

/// sqrt((base_max_norm_sq + k) / n) with n the augmented-set row count:
/// the bound for the class evaluated on n noise-translated copies, where the
/// noise contributes its dimension k globally.
inline double theorem1_bound(const Tensor& s_aug, double base_max_norm_sq, std::size_t k) {
  if (s_aug.rank() != 2 || s_aug.dim(0) == 0) {
    throw ValueError("expected a nonempty row matrix, got " + s_aug.shape_str());
  }
  if (base_max_norm_sq < 0.0) throw ValueError("base_max_norm_sq must be >= 0");
  return std::sqrt((base_max_norm_sq + static_cast<double>(k)) /
                   static_cast<double>(s_aug.dim(0)));
}

/// Monte Carlo estimate over i.i.d. uniform sign vectors.
inline RademacherEstimate empirical_rademacher_linear(const Tensor& s, std::size_t draws,
                                                      Rng& rng) {
  if (s.rank() != 2 || s.dim(0) == 0) {
    throw ValueError("expected a nonempty row matrix, got " + s.shape_str());
  }
  if (draws < 1) throw ValueError("draws must be >= 1");
  const std::size_t m = s.dim(0), k = s.dim(1);
  std::vector<double> acc(k);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double sigma = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const auto row = s.row(i);
      for (std::size_t j = 0; j < k; ++j) acc[j] += sigma * row[j];
    }
    double n2 = 0.0;
    for (double v : acc) n2 += v * v;
    const double value = std::sqrt(n2) / static_cast<double>(m);
    sum += value;
    sum_sq += value * value;
  }
  RademacherEstimate est;
  est.draws = draws;
  est.m = m;
  est.k = k;
  est.mean = sum / static_cast<double>(draws);
  if (draws > 1) {
    const double var =
        std::max(0.0, (sum_sq - sum * sum / static_cast<double>(draws)) /
                          static_cast<double>(draws - 1));
    est.stderr_ = std::sqrt(var / static_cast<double>(draws));
  }
  return est;
}

/// Exact average over all 2^m sign vectors; tractable only for small m.
inline RademacherEstimate exact_rademacher_linear(const Tensor& s) {
  if (s.rank() != 2 || s.dim(0) == 0) {
    throw ValueError("expected a nonempty row matrix, got " + s.shape_str());
  }
  const std::size_t m = s.dim(0), k = s.dim(1);
  if (m > 20) {
    throw ValueError("exact enumeration limited to m <= 20, got m = " + std::to_string(m));
  }
  const std::size_t total = std::size_t{1} << m;
  std::vector<double> acc(k);
  double sum = 0.0;
  for (std::size_t pattern = 0; pattern < total; ++pattern) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double sigma = (pattern >> i) & 1 ? 1.0 : -1.0;
      const auto row = s.row(i);
      for (std::size_t j = 0; j < k; ++j) acc[j] += sigma * row[j];
    }
    double n2 = 0.0;
    for (double v : acc) n2 += v * v;
    sum += std::sqrt(n2) / static_cast<double>(m);
  }
  RademacherEstimate est;
  est.draws = total;
  est.m = m;
  est.k = k;
  est.mean = sum / static_cast<double>(total);
  est.stderr_ = 0.0;
  return est;
}

/// Replicates every row U times with fresh noise and masks:
/// block u holds rows S_i + d_u (.) xi_{u,i}. Output has U*m rows.
inline Tensor build_augmented_set(const Tensor& s, const SdaParams& sda, std::size_t U,
                                  double lambda, Rng& rng) {
  if (U < 1) throw ValueError("U must be >= 1");
  if (s.rank() != 2) throw ShapeError("expected a row matrix, got " + s.shape_str());
  const std::size_t m = s.dim(0), k = s.dim(1);
  const Tensor logvar = encode_logvar(sda, s);
  Tensor out({U * m, k});
  for (std::size_t u = 0; u < U; ++u) {
    const Tensor xi = sample_xi(logvar, rng);
    const Tensor d = bernoulli_mask(k, lambda, rng);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        out((u * m) + i, j) = s(i, j) + d[j] * xi[i * k + j];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver and 2-D principal-component projection
// ---------------------------------------------------------------------------

/// Eigenvalues (descending) and matching eigenvectors (columns) of a
/// symmetric matrix, via cyclic Jacobi rotations.
struct EigenSym {
  std::vector<double> values;
  Tensor vectors;  // k x k, column j pairs with values[j]
};

inline EigenSym jacobi_eigen_sym(const Tensor& a_in) {
  if (a_in.rank() != 2 || a_in.dim(0) != a_in.dim(1)) {
    throw ShapeError("eigensolver expects a square matrix, got " + a_in.shape_str());
  }
  const std::size_t n = a_in.dim(0);
  Tensor a = a_in;
  Tensor v = Tensor::identity(n);
  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
    return std::sqrt(2.0 * s);
  };
  double frob = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) frob += a[i] * a[i];
  frob = std::sqrt(frob);
  const double tol = std::max(1e-300, 1e-14 * frob);
  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a(i, p), aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a(p, i), aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  EigenSym out;
  out.values.resize(n);
  out.vectors = Tensor({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  return out;
}

/// Orthonormal basis of the top-2 principal directions of the centered data,
/// sign-fixed so each component's largest-magnitude loading is positive.
/// Returns a k x 2 matrix.
inline Tensor pca2_basis(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("expected a row matrix, got " + x.shape_str());
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (n < 3) throw ValueError("principal-component projection needs n >= 3 rows");
  if (k < 2) throw ValueError("principal-component projection needs k >= 2 columns");
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    for (std::size_t j = 0; j < k; ++j) mean[j] += row[j];
  }
  for (double& mu : mean) mu /= static_cast<double>(n);
  Tensor cov({k, k});
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double dp = row[p] - mean[p];
      for (std::size_t q = p; q < k; ++q) cov(p, q) += dp * (row[q] - mean[q]);
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t q = p; q < k; ++q) {
      cov(p, q) /= static_cast<double>(n - 1);
      cov(q, p) = cov(p, q);
    }
  }
  EigenSym eig = jacobi_eigen_sym(cov);
  const double tol = 1e-12 * std::max(eig.values[0], 1.0);
  if (eig.values.size() < 2 || eig.values[1] <= tol) {
    throw ValueError("degenerate data: fewer than 2 nonzero principal components");
  }
  Tensor basis({k, 2});
  for (std::size_t comp = 0; comp < 2; ++comp) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (std::abs(eig.vectors(i, comp)) > std::abs(eig.vectors(arg, comp))) arg = i;
    }
    const double flip = eig.vectors(arg, comp) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < k; ++i) basis(i, comp) = flip * eig.vectors(i, comp);
  }
  return basis;
}

/// Projection of centered data onto its top-2 principal components.
inline Tensor project_pca2(const Tensor& x) {
  const Tensor basis = pca2_basis(x);
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    for (std::size_t j = 0; j < k; ++j) mean[j] += row[j];
  }
  for (double& mu : mean) mu /= static_cast<double>(n);
  Tensor out({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    for (std::size_t comp = 0; comp < 2; ++comp) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += (row[j] - mean[j]) * basis(j, comp);
      out(i, comp) = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernel-density overlap
// ---------------------------------------------------------------------------

/// Overlap coefficients between two feature samples: one per dimension plus
/// one on the shared 2-D principal-component projection. `bandwidth` > 0 when
/// a fixed kernel width was supplied; otherwise per-dimension (and projected)
/// widths follow the rule-of-thumb and are recorded separately.
struct OverlapReport {
  std::vector<double> per_dim;
  double projected2d = 0.0;
  double bandwidth = 0.0;
  std::vector<double> per_dim_bandwidth_a, per_dim_bandwidth_b;
  std::size_t grid = 0;
};

/// 0.9 * min(sd, IQR/1.34) * n^(-1/5) with linear-interpolation quartiles.
inline double silverman_bandwidth(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) throw ValueError("bandwidth rule needs >= 2 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  const double sd = std::sqrt(var);
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  if (spread <= 0.0) {
    throw ValueError("degenerate support: sample has zero spread");
  }
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

namespace detail_kde {

inline void require_spread(std::span<const double> values, std::size_t dim) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) {
    throw ValueError("degenerate support: all samples identical in dimension " +
                     std::to_string(dim));
  }
}

inline std::vector<double> column(const Tensor& x, std::size_t j) {
  std::vector<double> out(x.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i) out[i] = x(i, j);
  return out;
}

/// sum over a uniform grid of min(p_hat_A, p_hat_B) * delta, with the grid
/// spanning both supports plus 3 bandwidths on each side.
inline double overlap_1d(std::span<const double> a, std::span<const double> b, double ha,
                         double hb, std::size_t grid) {
  const auto [a_lo, a_hi] = std::minmax_element(a.begin(), a.end());
  const auto [b_lo, b_hi] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*a_lo - 3.0 * ha, *b_lo - 3.0 * hb);
  const double hi = std::max(*a_hi + 3.0 * ha, *b_hi + 3.0 * hb);
  const double delta = (hi - lo) / static_cast<double>(grid - 1);
  const double inv_norm_a = 1.0 / (static_cast<double>(a.size()) * ha * std::numbers::sqrt2 *
                                   std::sqrt(std::numbers::pi));
  const double inv_norm_b = 1.0 / (static_cast<double>(b.size()) * hb * std::numbers::sqrt2 *
                                   std::sqrt(std::numbers::pi));
  double total = 0.0;
  for (std::size_t g = 0; g < grid; ++g) {
    const double x = lo + delta * static_cast<double>(g);
    double pa = 0.0, pb = 0.0;
    for (double v : a) {
      const double z = (x - v) / ha;
      pa += std::exp(-0.5 * z * z);
    }
    for (double v : b) {
      const double z = (x - v) / hb;
      pb += std::exp(-0.5 * z * z);
    }
    total += std::min(pa * inv_norm_a, pb * inv_norm_b) * delta;
  }
  return total;
}

/// Product-kernel density of `pts` evaluated on the full grid, via per-axis
/// kernel tables (G x G output, sum over points of outer products).
inline std::vector<double> grid_density_2d(const Tensor& pts, double hx, double hy,
                                           std::span<const double> gx,
                                           std::span<const double> gy) {
  const std::size_t n = pts.dim(0), G = gx.size();
  std::vector<double> kx(G), ky(G), density(G * G, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < G; ++g) {
      const double zx = (gx[g] - pts(i, 0)) / hx;
      kx[g] = std::exp(-0.5 * zx * zx);
      const double zy = (gy[g] - pts(i, 1)) / hy;
      ky[g] = std::exp(-0.5 * zy * zy);
    }
    for (std::size_t p = 0; p < G; ++p) {
      if (kx[p] == 0.0) continue;
      const double kxp = kx[p];
      double* row = density.data() + p * G;
      for (std::size_t q = 0; q < G; ++q) row[q] += kxp * ky[q];
    }
  }
  const double norm =
      1.0 / (static_cast<double>(n) * hx * hy * 2.0 * std::numbers::pi);
  for (double& d : density) d *= norm;
  return density;
}

inline double overlap_2d(const Tensor& a, const Tensor& b, double hax, double hay, double hbx,
                         double hby, std::size_t grid) {
  auto axis_range = [&](std::size_t comp, double ha, double hb) {
    double lo = a(0, comp), hi = a(0, comp);
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      lo = std::min(lo, a(i, comp));
      hi = std::max(hi, a(i, comp));
    }
    double blo = b(0, comp), bhi = b(0, comp);
    for (std::size_t i = 0; i < b.dim(0); ++i) {
      blo = std::min(blo, b(i, comp));
      bhi = std::max(bhi, b(i, comp));
    }
    lo = std::min(lo - 3.0 * ha, blo - 3.0 * hb);
    hi = std::max(hi + 3.0 * ha, bhi + 3.0 * hb);
    std::vector<double> pts(grid);
    const double delta = (hi - lo) / static_cast<double>(grid - 1);
    for (std::size_t g = 0; g < grid; ++g) pts[g] = lo + delta * static_cast<double>(g);
    return std::make_pair(pts, delta);
  };
  const auto [gx, dx] = axis_range(0, hax, hbx);
  const auto [gy, dy] = axis_range(1, hay, hby);
  const auto pa = grid_density_2d(a, hax, hay, gx, gy);
  const auto pb = grid_density_2d(b, hbx, hby, gx, gy);
  double total = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) total += std::min(pa[i], pb[i]);
  return total * dx * dy;
}

inline OverlapReport kde_overlap_impl(const Tensor& a, const Tensor& b, double fixed_bandwidth,
                                      std::size_t grid) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("overlap expects row matrices, got " + a.shape_str() + " and " +
                     b.shape_str());
  }
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("overlap: feature widths differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  if (a.dim(0) < 2 || b.dim(0) < 2) {
    throw ValueError("overlap needs >= 2 samples on each side");
  }
  if (grid < 2) throw ValueError("grid must have >= 2 points");
  const std::size_t k = a.dim(1);
  OverlapReport rep;
  rep.grid = grid;
  rep.bandwidth = fixed_bandwidth;
  for (std::size_t j = 0; j < k; ++j) {
    const auto ca = column(a, j);
    const auto cb = column(b, j);
    require_spread(ca, j);
    require_spread(cb, j);
    const double ha = fixed_bandwidth > 0.0 ? fixed_bandwidth : silverman_bandwidth(ca);
    const double hb = fixed_bandwidth > 0.0 ? fixed_bandwidth : silverman_bandwidth(cb);
    rep.per_dim_bandwidth_a.push_back(ha);
    rep.per_dim_bandwidth_b.push_back(hb);
    rep.per_dim.push_back(overlap_1d(ca, cb, ha, hb, grid));
  }
  if (k < 2) {
    rep.projected2d = rep.per_dim[0];
    return rep;
  }
  Tensor stacked({a.dim(0) + b.dim(0), k});
  for (std::size_t i = 0; i < a.numel(); ++i) stacked[i] = a[i];
  for (std::size_t i = 0; i < b.numel(); ++i) stacked[a.numel() + i] = b[i];
  const Tensor basis = pca2_basis(stacked);
  auto project = [&](const Tensor& x) {
    Tensor out({x.dim(0), 2});
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const auto row = x.row(i);
      for (std::size_t comp = 0; comp < 2; ++comp) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += row[j] * basis(j, comp);
        out(i, comp) = s;
      }
    }
    return out;
  };
  const Tensor pa = project(a);
  const Tensor pb = project(b);
  for (std::size_t comp = 0; comp < 2; ++comp) {
    require_spread(column(pa, comp), comp);
    require_spread(column(pb, comp), comp);
  }
  const std::size_t grid2 = std::min<std::size_t>(grid, 64);
  double hax, hay, hbx, hby;
  if (fixed_bandwidth > 0.0) {
    hax = hay = hbx = hby = fixed_bandwidth;
  } else {
    hax = silverman_bandwidth(column(pa, 0));
    hay = silverman_bandwidth(column(pa, 1));
    hbx = silverman_bandwidth(column(pb, 0));
    hby = silverman_bandwidth(column(pb, 1));
  }
  rep.projected2d = overlap_2d(pa, pb, hax, hay, hbx, hby, grid2);
  return rep;
}

}  // namespace detail_kde

/// Per-dimension and projected overlap with one fixed kernel bandwidth.
inline OverlapReport kde_overlap(const Tensor& a, const Tensor& b, double bandwidth,
                                 std::size_t grid) {
  if (bandwidth <= 0.0) throw ValueError("bandwidth must be > 0");
  return detail_kde::kde_overlap_impl(a, b, bandwidth, grid);
}

/// Per-dimension and projected overlap with rule-of-thumb bandwidths.
inline OverlapReport kde_overlap_auto(const Tensor& a, const Tensor& b, std::size_t grid = 200) {
  return detail_kde::kde_overlap_impl(a, b, 0.0, grid);
}

/// Density curves for one dimension on the overlap grid, for plot-ready dumps:
/// rows of (x, density_A, density_B).
inline std::vector<std::array<double, 3>> kde_grid_dump(std::span<const double> a,
                                                        std::span<const double> b, double ha,
                                                        double hb, std::size_t grid) {
  const auto [a_lo, a_hi] = std::minmax_element(a.begin(), a.end());
  const auto [b_lo, b_hi] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*a_lo - 3.0 * ha, *b_lo - 3.0 * hb);
  const double hi = std::max(*a_hi + 3.0 * ha, *b_hi + 3.0 * hb);
  const double delta = (hi - lo) / static_cast<double>(grid - 1);
  const double na = 1.0 / (static_cast<double>(a.size()) * ha * std::numbers::sqrt2 *
                           std::sqrt(std::numbers::pi));
  const double nb = 1.0 / (static_cast<double>(b.size()) * hb * std::numbers::sqrt2 *
                           std::sqrt(std::numbers::pi));
  std::vector<std::array<double, 3>> rows;
  rows.reserve(grid);
  for (std::size_t g = 0; g < grid; ++g) {
    const double x = lo + delta * static_cast<double>(g);
    double pa = 0.0, pb = 0.0;
    for (double v : a) {
      const double z = (x - v) / ha;
      pa += std::exp(-0.5 * z * z);
    }
    for (double v : b) {
      const double z = (x - v) / hb;
      pb += std::exp(-0.5 * z * z);
    }
    rows.push_back({x, pa * na, pb * nb});
  }
  return rows;
}

}  // namespace virm
