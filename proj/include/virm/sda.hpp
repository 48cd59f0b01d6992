#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "virm/rng.hpp"
#include "virm/tape.hpp"
#include "virm/tensor.hpp"

namespace virm {

inline constexpr double kBatchNormEps = 1e-5;

/// Augmentation hyperparameters: per-coordinate translation probability,
/// number of augmented copies per row, and the weight of the estimator loss
/// inside the total objective.
struct SdaConfig {
  double lambda = 0.8;
  std::size_t U = 10;
  double alpha = 0.5;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ValueError("sda.lambda outside [0,1]");
    if (U < 1) throw ValueError("sda.U must be >= 1");
    if (alpha < 0.0) throw ValueError("sda.alpha must be >= 0");
  }
};

/// Weights of the shared noise estimator. Encoder maps features z to a
/// per-entry log-variance (linear -> batch norm -> GeLU -> affine); the
/// decoder mirrors it, reconstructing z from the sampled translation noise.
/// The first layer carries no bias: batch norm is invariant to per-column
/// shifts, so such a bias would be a dead parameter (its shift role is played
/// by the batch-norm beta). Final layers start at zero so the initial noise
/// scale is exactly 1 (logvar = 0) and the initial reconstruction is 0.
struct SdaParams {
  Tensor enc_w1, enc_gamma, enc_beta, enc_w2, enc_b2;
  Tensor dec_w1, dec_gamma, dec_beta, dec_w2, dec_b2;

  static SdaParams init(std::size_t k, Rng& rng) {
    SdaParams p;
    const double scale = 1.0 / std::sqrt(static_cast<double>(k));
    p.enc_w1 = rng.normal_tensor({k, k}, scale);
    p.enc_gamma = Tensor::full({k}, 1.0);
    p.enc_beta = Tensor::zeros({k});
    p.enc_w2 = Tensor::zeros({k, k});
    p.enc_b2 = Tensor::zeros({k});
    p.dec_w1 = rng.normal_tensor({k, k}, scale);
    p.dec_gamma = Tensor::full({k}, 1.0);
    p.dec_beta = Tensor::zeros({k});
    p.dec_w2 = Tensor::zeros({k, k});
    p.dec_b2 = Tensor::zeros({k});
    return p;
  }

  std::size_t dim() const { return enc_beta.numel(); }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    return {{"enc_w1", &enc_w1}, {"enc_gamma", &enc_gamma}, {"enc_beta", &enc_beta},
            {"enc_w2", &enc_w2}, {"enc_b2", &enc_b2},
            {"dec_w1", &dec_w1}, {"dec_gamma", &dec_gamma}, {"dec_beta", &dec_beta},
            {"dec_w2", &dec_w2}, {"dec_b2", &dec_b2}};
  }
};

// ---------------------------------------------------------------------------
// Tape-free evaluation path
// ---------------------------------------------------------------------------

/// Per-example per-feature log sigma^2; the noise mean is fixed at zero.
inline Tensor encode_logvar(const SdaParams& p, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != p.dim()) {
    throw ShapeError("encode_logvar: features " + z.shape_str() + " do not match estimator width " +
                     std::to_string(p.dim()));
  }
  Tensor h = affine_eval(z, p.enc_w1, Tensor::zeros({p.dim()}));
  h = batchnorm_eval(h, p.enc_gamma, p.enc_beta, kBatchNormEps);
  h = gelu_eval(h);
  return affine_eval(h, p.enc_w2, p.enc_b2);
}

/// Decodes sampled noise back into feature space (the reconstruction target
/// is the original z).
inline Tensor reconstruct(const SdaParams& p, const Tensor& xi) {
  if (xi.rank() != 2 || xi.dim(1) != p.dim()) {
    throw ShapeError("reconstruct: noise " + xi.shape_str() + " does not match estimator width " +
                     std::to_string(p.dim()));
  }
  Tensor h = affine_eval(xi, p.dec_w1, Tensor::zeros({p.dim()}));
  h = batchnorm_eval(h, p.dec_gamma, p.dec_beta, kBatchNormEps);
  h = gelu_eval(h);
  return affine_eval(h, p.dec_w2, p.dec_b2);
}

/// xi = exp(logvar / 2) * eps with eps ~ N(0, I).
inline Tensor sample_xi(const Tensor& logvar, Rng& rng) {
  Tensor xi = logvar;
  for (auto& v : xi.data()) v = std::exp(0.5 * v) * rng.normal();
  return xi;
}

/// Independent 0/1 draws with P(1) = lambda, one per feature dimension.
inline Tensor bernoulli_mask(std::size_t k, double lambda, Rng& rng) {
  Tensor d({k});
  for (std::size_t i = 0; i < k; ++i) d[i] = rng.bernoulli(lambda) ? 1.0 : 0.0;
  return d;
}

/// z~ = z + d (.) xi, with the mask broadcast over rows.
inline Tensor augment(const Tensor& z, const Tensor& xi, const Tensor& d) {
  require_same_shape(z, xi, "augment");
  const std::size_t k = z.rank() == 2 ? z.dim(1) : z.numel();
  if (d.numel() != k) {
    throw ShapeError("augment: mask " + d.shape_str() + " does not cover " + std::to_string(k) +
                     " features");
  }
  Tensor out = z;
  const std::size_t rows = z.numel() / k;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += d[j] * xi[i * k + j];
  return out;
}

/// Estimator loss: sum over all entries of -1/2 (1 + logvar - exp(logvar))
/// plus the reconstruction error (1/(2n)) sum (z_hat - z)^2 with n = rows.
inline double sda_loss(const Tensor& logvar, const Tensor& z_hat, const Tensor& z) {
  require_same_shape(logvar, z, "sda_loss");
  require_same_shape(z_hat, z, "sda_loss");
  double kl = 0.0;
  for (std::size_t i = 0; i < logvar.numel(); ++i) {
    kl += 1.0 + logvar[i] - std::exp(logvar[i]);
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double d = z_hat[i] - z[i];
    sq += d * d;
  }
  return -0.5 * kl + sq / (2.0 * static_cast<double>(z.rows()));
}

// ---------------------------------------------------------------------------
// Tape-bound path (gradients flow into the estimator weights)
// ---------------------------------------------------------------------------

/// Node ids of one SdaParams set registered on a tape. The zero bias of the
/// first layers is a shared constant node, not a parameter.
struct SdaNodes {
  NodeId enc_w1, enc_gamma, enc_beta, enc_w2, enc_b2;
  NodeId dec_w1, dec_gamma, dec_beta, dec_w2, dec_b2;
  NodeId zero_bias;

  static SdaNodes bind(Tape& t, const SdaParams& p) {
    SdaNodes n;
    n.enc_w1 = t.input(p.enc_w1);
    n.enc_gamma = t.input(p.enc_gamma);
    n.enc_beta = t.input(p.enc_beta);
    n.enc_w2 = t.input(p.enc_w2);
    n.enc_b2 = t.input(p.enc_b2);
    n.dec_w1 = t.input(p.dec_w1);
    n.dec_gamma = t.input(p.dec_gamma);
    n.dec_beta = t.input(p.dec_beta);
    n.dec_w2 = t.input(p.dec_w2);
    n.dec_b2 = t.input(p.dec_b2);
    n.zero_bias = t.input(Tensor::zeros({p.dim()}));
    return n;
  }

  std::vector<NodeId> ids() const {
    return {enc_w1, enc_gamma, enc_beta, enc_w2, enc_b2,
            dec_w1, dec_gamma, dec_beta, dec_w2, dec_b2};
  }

  NodeId encode_logvar(Tape& t, NodeId z) const {
    NodeId h = t.affine(z, enc_w1, zero_bias);
    h = t.batchnorm_train(h, enc_gamma, enc_beta, kBatchNormEps);
    h = t.gelu(h);
    return t.affine(h, enc_w2, enc_b2);
  }

  NodeId reconstruct(Tape& t, NodeId xi) const {
    NodeId h = t.affine(xi, dec_w1, zero_bias);
    h = t.batchnorm_train(h, dec_gamma, dec_beta, kBatchNormEps);
    h = t.gelu(h);
    return t.affine(h, dec_w2, dec_b2);
  }
};

inline NodeId sda_loss_node(Tape& t, NodeId logvar, NodeId z_hat, NodeId z) {
  return t.add(t.gaussian_kl(logvar), t.mse(z_hat, z));
}

}  // namespace virm
