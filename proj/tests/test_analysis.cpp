#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

#include "virm/analysis.hpp"
#include "virm/rng.hpp"
#include "virm/sda.hpp"
#include "virm/tensor.hpp"

using namespace virm;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using Catch::Matchers::WithinAbs;

namespace {

Tensor gaussian_rows(std::size_t m, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor({m, k}, 1.0);
}

double column_variance(const Tensor& x, std::size_t j) {
  double mean = 0.0;
  for (std::size_t i = 0; i < x.dim(0); ++i) mean += x(i, j);
  mean /= static_cast<double>(x.dim(0));
  double var = 0.0;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    var += (x(i, j) - mean) * (x(i, j) - mean);
  }
  return var / static_cast<double>(x.dim(0) - 1);
}

}  // namespace

TEST_CASE("one unit row has complexity exactly one") {
  Tensor s = Tensor::matrix({{0.6, 0.8}});
  Rng rng(1);
  RademacherEstimate mc = empirical_rademacher_linear(s, 50, rng);
  REQUIRE(mc.mean == 1.0);
  REQUIRE(mc.m == 1);
  REQUIRE(mc.k == 2);
  RademacherEstimate exact = exact_rademacher_linear(s);
  REQUIRE(exact.mean == 1.0);
  REQUIRE(exact.draws == 2);
}

TEST_CASE("orthonormal rows give exactly one over sqrt m") {
  const std::size_t m = 8;
  Tensor s = Tensor::identity(m);
  Rng rng(2);
  RademacherEstimate mc = empirical_rademacher_linear(s, 100, rng);
  // ||sum sigma_i e_i|| = sqrt(m) for every sign vector.
  REQUIRE_THAT(mc.mean, WithinAbs(1.0 / std::sqrt(8.0), 1e-15));
  REQUIRE_THAT(mc.stderr_, WithinAbs(0.0, 1e-8));
  RademacherEstimate exact = exact_rademacher_linear(s);
  REQUIRE_THAT(exact.mean, WithinAbs(1.0 / std::sqrt(8.0), 1e-14));
}

TEST_CASE("estimate stays below the norm bound across one hundred instances") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Tensor s = gaussian_rows(64, 16, 1000 + seed);
    Rng rng(seed);
    RademacherEstimate est = empirical_rademacher_linear(s, 2000, rng);
    REQUIRE(est.mean <= lemma2_bound(s));
  }
}

TEST_CASE("enumeration sandwiches the Monte Carlo estimate") {
  Tensor s = gaussian_rows(10, 4, 77);
  RademacherEstimate exact = exact_rademacher_linear(s);
  REQUIRE(exact.draws == 1024);
  REQUIRE(exact.mean <= lemma2_bound(s));
  Rng rng(78);
  RademacherEstimate mc = empirical_rademacher_linear(s, 4000, rng);
  REQUIRE(std::fabs(mc.mean - exact.mean) <= 3.0 * mc.stderr_);
}

TEST_CASE("same sign draws make the estimate rotation invariant") {
  Tensor s = gaussian_rows(20, 3, 5);
  const double c = std::cos(0.7), sn = std::sin(0.7);
  Tensor rotated = s;
  for (std::size_t i = 0; i < s.dim(0); ++i) {
    rotated(i, 0) = c * s(i, 0) - sn * s(i, 1);
    rotated(i, 1) = sn * s(i, 0) + c * s(i, 1);
  }
  Rng rng_a(9), rng_b(9);
  RademacherEstimate a = empirical_rademacher_linear(s, 500, rng_a);
  RademacherEstimate b = empirical_rademacher_linear(rotated, 500, rng_b);
  REQUIRE_THAT(a.mean, WithinAbs(b.mean, 1e-12));
}

TEST_CASE("row permutation moves the estimate by at most Monte Carlo error") {
  Tensor s = gaussian_rows(12, 4, 11);
  Tensor perm({12, 4});
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 4; ++j) perm(11 - i, j) = s(i, j);
  }
  Rng rng_a(13), rng_b(13);
  RademacherEstimate a = empirical_rademacher_linear(s, 3000, rng_a);
  RademacherEstimate b = empirical_rademacher_linear(perm, 3000, rng_b);
  REQUIRE(std::fabs(a.mean - b.mean) <= 3.0 * (a.stderr_ + b.stderr_));
  RademacherEstimate ea = exact_rademacher_linear(s);
  RademacherEstimate eb = exact_rademacher_linear(perm);
  REQUIRE_THAT(ea.mean, WithinAbs(eb.mean, 1e-12));
}

TEST_CASE("rademacher estimators reject bad instances") {
  Tensor flat = Tensor::vector({1.0, 2.0});
  Rng rng(1);
  REQUIRE_THROWS_AS(empirical_rademacher_linear(flat, 10, rng), ValueError);
  Tensor s = Tensor::matrix({{1.0}});
  REQUIRE_THROWS_AS(empirical_rademacher_linear(s, 0, rng), ValueError);
  Tensor big({21, 2});
  REQUIRE_THROWS_MATCHES(exact_rademacher_linear(big), ValueError,
                         MessageMatches(ContainsSubstring("m <= 20")));
}

TEST_CASE("norm bound oracles") {
  REQUIRE(lemma2_bound(Tensor::matrix({{0.6, 0.8}})) == 1.0);

  // max row norm 2 over 16 rows -> sqrt(4/16).
  Tensor s({16, 2});
  s(0, 0) = 2.0;
  for (std::size_t i = 1; i < 16; ++i) s(i, 0) = 0.5;
  REQUIRE_THAT(lemma2_bound(s), WithinAbs(0.5, 1e-15));

  Tensor scaled = s;
  for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= 3.0;
  REQUIRE_THAT(lemma2_bound(scaled), WithinAbs(3.0 * lemma2_bound(s), 1e-12));

  REQUIRE_THROWS_AS(lemma2_bound(Tensor::vector({1.0})), ValueError);
}

TEST_CASE("norm bound shrinks as rows accumulate at fixed max norm") {
  double prev = 1e300;
  for (std::size_t m : {2, 4, 8, 16, 32}) {
    Tensor s({m, 1});
    for (std::size_t i = 0; i < m; ++i) s(i, 0) = 1.0;
    const double bound = lemma2_bound(s);
    REQUIRE(bound < prev);
    prev = bound;
  }
}

TEST_CASE("augmented-set bound oracles and the crossover regime") {
  Tensor n4({4, 1});
  for (std::size_t i = 0; i < 4; ++i) n4(i, 0) = 1.0;
  REQUIRE_THAT(theorem1_bound(n4, 1.0, 3), WithinAbs(1.0, 1e-15));

  // Unit-norm rows, m=64, k=16: the augmented bound only beats the plain one
  // once the augmented count dwarfs the feature dimension.
  Tensor base({64, 16});
  for (std::size_t i = 0; i < 64; ++i) base(i, 0) = 1.0;
  Tensor aug640({640, 1});
  Tensor aug6400({6400, 1});
  const double plain = lemma2_bound(base);
  REQUIRE_THAT(plain, WithinAbs(0.125, 1e-15));
  const double loose = theorem1_bound(aug640, 1.0, 16);
  const double tight = theorem1_bound(aug6400, 1.0, 16);
  REQUIRE_THAT(loose, WithinAbs(0.16298006013006622, 1e-12));
  REQUIRE_THAT(tight, WithinAbs(0.05153882032022076, 1e-12));
  REQUIRE(loose > plain);   // small U: inequality reverses
  REQUIRE(tight < plain);   // n >> k: augmented bound is tighter

  // Bound vanishes as the augmented count grows.
  Tensor huge({4000000, 1});
  REQUIRE(theorem1_bound(huge, 1.0, 16) < 0.01);
  REQUIRE(theorem1_bound(huge, 1.0, 16) < theorem1_bound(aug6400, 1.0, 16));

  REQUIRE_THROWS_AS(theorem1_bound(n4, -1.0, 3), ValueError);
}

TEST_CASE("max row norm helper") {
  Tensor s = Tensor::matrix({{3.0, 4.0}, {1.0, 0.0}});
  REQUIRE(max_row_norm_sq(s) == 25.0);
  REQUIRE_THROWS_AS(max_row_norm_sq(Tensor::vector({1.0})), ValueError);
}

TEST_CASE("augmentation with zero direction probability is the identity") {
  Rng init(3);
  SdaParams sda = SdaParams::init(5, init);
  Tensor s = gaussian_rows(12, 5, 4);
  Rng rng(6);
  Tensor out = build_augmented_set(s, sda, 1, 0.0, rng);
  REQUIRE(out.shape() == s.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) REQUIRE(out[i] == s[i]);
}

TEST_CASE("augmented set has U copies per row") {
  Rng init(3);
  SdaParams sda = SdaParams::init(3, init);
  Tensor s = gaussian_rows(7, 3, 8);
  Rng rng(9);
  Tensor out = build_augmented_set(s, sda, 5, 0.8, rng);
  REQUIRE(out.dim(0) == 35);
  REQUIRE(out.dim(1) == 3);
  Rng bad(9);
  REQUIRE_THROWS_AS(build_augmented_set(s, sda, 0, 0.8, bad), ValueError);
}

TEST_CASE("unit noise displaces rows by the feature dimension on average") {
  // Zero-initialized estimator encodes logvar = 0, so xi ~ N(0, I_k) and
  // ||z~ - z||^2 has chi-square mean k when every direction is active.
  const std::size_t k = 8, m = 100, U = 100;
  Rng init(10);
  SdaParams sda = SdaParams::init(k, init);
  Tensor s = gaussian_rows(m, k, 11);
  Rng rng(12);
  Tensor out = build_augmented_set(s, sda, U, 1.0, rng);
  double total = 0.0;
  for (std::size_t u = 0; u < U; ++u) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double d = out((u * m) + i, j) - s(i, j);
        total += d * d;
      }
    }
  }
  const double mean_sq = total / static_cast<double>(U * m);
  REQUIRE_THAT(mean_sq, WithinAbs(8.0, 0.4));  // 5% of k
}

TEST_CASE("principal projection of axis-aligned data is a signed permutation") {
  // Second coordinate carries the larger variance, so components swap.
  Tensor x = Tensor::matrix({{1.0, 0.0},
                             {-1.0, 0.0},
                             {0.5, 0.0},
                             {-0.5, 0.0},
                             {0.0, 5.0},
                             {0.0, -5.0},
                             {0.0, 2.5},
                             {0.0, -2.5}});
  Tensor p = project_pca2(x);
  REQUIRE(p.dim(0) == 8);
  REQUIRE(p.dim(1) == 2);
  for (std::size_t i = 0; i < 8; ++i) {
    REQUIRE_THAT(p(i, 0), WithinAbs(x(i, 1), 1e-9));
    REQUIRE_THAT(p(i, 1), WithinAbs(x(i, 0), 1e-9));
  }
}

TEST_CASE("first projected component carries at least as much variance") {
  Tensor x = gaussian_rows(200, 3, 21);
  for (std::size_t i = 0; i < 200; ++i) x(i, 1) *= 2.5;
  Tensor p = project_pca2(x);
  REQUIRE(column_variance(p, 0) >= column_variance(p, 1));
}

TEST_CASE("projection basis is orthonormal and sign-fixed") {
  Tensor x = gaussian_rows(150, 4, 22);
  Tensor basis = pca2_basis(x);
  for (std::size_t a = 0; a < 2; ++a) {
    double dot_aa = 0.0;
    for (std::size_t i = 0; i < 4; ++i) dot_aa += basis(i, a) * basis(i, a);
    REQUIRE_THAT(dot_aa, WithinAbs(1.0, 1e-9));
    double largest = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(basis(i, a)) > std::abs(largest)) largest = basis(i, a);
    }
    REQUIRE(largest > 0.0);
  }
  double dot_01 = 0.0;
  for (std::size_t i = 0; i < 4; ++i) dot_01 += basis(i, 0) * basis(i, 1);
  REQUIRE_THAT(dot_01, WithinAbs(0.0, 1e-9));
}

TEST_CASE("eigensolver matches the closed form on a 2x2") {
  Tensor a = Tensor::matrix({{2.0, 1.0}, {1.0, 2.0}});
  EigenSym eig = jacobi_eigen_sym(a);
  REQUIRE_THAT(eig.values[0], WithinAbs(3.0, 1e-12));
  REQUIRE_THAT(eig.values[1], WithinAbs(1.0, 1e-12));
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  REQUIRE_THAT(std::abs(eig.vectors(0, 0)), WithinAbs(inv_sqrt2, 1e-12));
  REQUIRE_THAT(std::abs(eig.vectors(1, 0)), WithinAbs(inv_sqrt2, 1e-12));
}

TEST_CASE("discarded variance equals the trailing eigenvalue mass") {
  const std::size_t n = 400, k = 5;
  Tensor x = gaussian_rows(n, k, 23);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) *= 3.0;
    x(i, 1) *= 2.0;
  }

  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) mean[j] += x(i, j);
  }
  for (double& mu : mean) mu /= static_cast<double>(n);
  Tensor cov({k, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t q = 0; q < k; ++q) {
        cov(p, q) += (x(i, p) - mean[p]) * (x(i, q) - mean[q]) /
                     static_cast<double>(n - 1);
      }
    }
  }
  EigenSym eig = jacobi_eigen_sym(cov);

  double trace = 0.0, eigen_sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    trace += cov(j, j);
    eigen_sum += eig.values[j];
  }
  REQUIRE_THAT(eigen_sum, WithinAbs(trace, 1e-9));

  // Project, reconstruct, and compare the residual to eigenvalues 3..5.
  Tensor basis = pca2_basis(x);
  double residual = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double proj[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t j = 0; j < k; ++j) {
        proj[c] += (x(i, j) - mean[j]) * basis(j, c);
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      double recon = proj[0] * basis(j, 0) + proj[1] * basis(j, 1);
      const double r = (x(i, j) - mean[j]) - recon;
      residual += r * r;
    }
  }
  residual /= static_cast<double>(n - 1);
  const double trailing = eig.values[2] + eig.values[3] + eig.values[4];
  REQUIRE_THAT(residual, WithinAbs(trailing, 1e-9));
}

TEST_CASE("power iteration agrees with the top principal direction") {
  Tensor x = gaussian_rows(300, 3, 29);
  for (std::size_t i = 0; i < 300; ++i) x(i, 2) *= 4.0;
  Tensor basis = pca2_basis(x);

  std::vector<double> mean(3, 0.0);
  for (std::size_t i = 0; i < 300; ++i) {
    for (std::size_t j = 0; j < 3; ++j) mean[j] += x(i, j);
  }
  for (double& mu : mean) mu /= 300.0;
  double cov[3][3] = {};
  for (std::size_t i = 0; i < 300; ++i) {
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t q = 0; q < 3; ++q) {
        cov[p][q] += (x(i, p) - mean[p]) * (x(i, q) - mean[q]) / 299.0;
      }
    }
  }
  double v[3] = {1.0, 1.0, 1.0};
  for (int it = 0; it < 500; ++it) {
    double w[3] = {};
    for (int p = 0; p < 3; ++p) {
      for (int q = 0; q < 3; ++q) w[p] += cov[p][q] * v[q];
    }
    double norm = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    for (int p = 0; p < 3; ++p) v[p] = w[p] / norm;
  }
  double dot = 0.0;
  for (std::size_t p = 0; p < 3; ++p) dot += v[p] * basis(p, 0);
  REQUIRE_THAT(std::abs(dot), WithinAbs(1.0, 1e-6));
}

TEST_CASE("projection rejects degenerate inputs") {
  REQUIRE_THROWS_AS(project_pca2(Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}})), ValueError);

  Tensor line({10, 2});
  for (std::size_t i = 0; i < 10; ++i) {
    line(i, 0) = static_cast<double>(i);
    line(i, 1) = 2.0 * static_cast<double>(i);
  }
  REQUIRE_THROWS_MATCHES(project_pca2(line), ValueError,
                         MessageMatches(ContainsSubstring("degenerate")));

  Tensor thin({5, 1});
  for (std::size_t i = 0; i < 5; ++i) thin(i, 0) = static_cast<double>(i);
  REQUIRE_THROWS_AS(project_pca2(thin), ValueError);
}

TEST_CASE("a sample overlaps itself") {
  Tensor a = gaussian_rows(300, 2, 31);
  OverlapReport rep = kde_overlap_auto(a, a, 200);
  REQUIRE(rep.per_dim.size() == 2);
  for (double o : rep.per_dim) REQUIRE_THAT(o, WithinAbs(1.0, 0.01));
  REQUIRE_THAT(rep.projected2d, WithinAbs(1.0, 0.01));
  for (double o : rep.per_dim) REQUIRE(o <= 1.0 + 0.01);
}

TEST_CASE("separated supports barely overlap") {
  Rng rng(33);
  Tensor a = rng.normal_tensor({100, 1}, 1.0);
  Tensor b = rng.normal_tensor({100, 1}, 1.0);
  for (std::size_t i = 0; i < 100; ++i) b(i, 0) += 100.0;
  OverlapReport rep = kde_overlap(a, b, 0.5, 400);
  REQUIRE(rep.per_dim[0] < 0.01);
  REQUIRE(rep.projected2d == rep.per_dim[0]);  // 1-D input reuses the same curve
}

TEST_CASE("two unit gaussians two apart overlap like the closed form") {
  Rng rng(35);
  const std::size_t n = 10000;
  Tensor a = rng.normal_tensor({n, 1}, 1.0);
  Tensor b = rng.normal_tensor({n, 1}, 1.0);
  for (std::size_t i = 0; i < n; ++i) b(i, 0) += 2.0;
  OverlapReport rep = kde_overlap_auto(a, b, 200);
  REQUIRE_THAT(rep.per_dim[0], WithinAbs(0.31731050786291415, 0.03));
}

TEST_CASE("overlap is symmetric") {
  Rng rng(37);
  Tensor a = rng.normal_tensor({80, 2}, 1.0);
  Tensor b = rng.normal_tensor({80, 2}, 1.5);
  OverlapReport ab = kde_overlap(a, b, 0.4, 150);
  OverlapReport ba = kde_overlap(b, a, 0.4, 150);
  REQUIRE(ab.per_dim.size() == ba.per_dim.size());
  for (std::size_t j = 0; j < ab.per_dim.size(); ++j) {
    REQUIRE(ab.per_dim[j] == ba.per_dim[j]);
  }
  // The shared projection stacks the samples in either order, so the last
  // floating-point bits of the basis may differ.
  REQUIRE_THAT(ab.projected2d, WithinAbs(ba.projected2d, 1e-9));
}

TEST_CASE("overlap input validation") {
  Rng rng(39);
  Tensor a = rng.normal_tensor({50, 2}, 1.0);
  Tensor b = rng.normal_tensor({50, 2}, 1.0);
  REQUIRE_THROWS_AS(kde_overlap(a, b, 0.0, 100), ValueError);
  REQUIRE_THROWS_AS(kde_overlap(a, b, -1.0, 100), ValueError);
  REQUIRE_THROWS_AS(kde_overlap(a, b, 0.5, 1), ValueError);
  Tensor wide = rng.normal_tensor({50, 3}, 1.0);
  REQUIRE_THROWS_AS(kde_overlap(a, wide, 0.5, 100), ShapeError);
  Tensor tiny = rng.normal_tensor({1, 2}, 1.0);
  REQUIRE_THROWS_AS(kde_overlap(a, tiny, 0.5, 100), ValueError);

  Tensor flat({50, 2});
  for (std::size_t i = 0; i < 50; ++i) {
    flat(i, 0) = 7.0;  // zero spread in dimension 0
    flat(i, 1) = rng.normal();
  }
  REQUIRE_THROWS_MATCHES(kde_overlap(flat, b, 0.5, 100), ValueError,
                         MessageMatches(ContainsSubstring("degenerate support")));
}

TEST_CASE("bandwidth rule of thumb oracle") {
  std::vector<double> vals = {1.0, 2.0, 3.0, 4.0, 5.0};
  REQUIRE_THAT(silverman_bandwidth(vals), WithinAbs(0.9735846228506357, 1e-12));
  std::vector<double> two = {1.0};
  REQUIRE_THROWS_AS(silverman_bandwidth(two), ValueError);
  std::vector<double> constant = {2.0, 2.0, 2.0};
  REQUIRE_THROWS_AS(silverman_bandwidth(constant), ValueError);
}

TEST_CASE("density dump integrates to about one per side") {
  Rng rng(41);
  std::vector<double> a(500), b(500);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal() + 1.0;
  auto rows = kde_grid_dump(a, b, 0.3, 0.3, 400);
  REQUIRE(rows.size() == 400);
  const double delta = rows[1][0] - rows[0][0];
  double mass_a = 0.0, mass_b = 0.0;
  for (const auto& r : rows) {
    REQUIRE(r[1] >= 0.0);
    REQUIRE(r[2] >= 0.0);
    mass_a += r[1] * delta;
    mass_b += r[2] * delta;
  }
  REQUIRE_THAT(mass_a, WithinAbs(1.0, 0.01));
  REQUIRE_THAT(mass_b, WithinAbs(1.0, 0.01));
}
