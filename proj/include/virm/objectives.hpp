#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "virm/datasets.hpp"
#include "virm/rng.hpp"
#include "virm/tape.hpp"
#include "virm/tensor.hpp"

namespace virm {

/// Which loss composition is trained. ERM: plain sum of per-environment
/// risks. A: augmentation consistency only. V: variance penalty on original
/// risks. VA: variance penalty on augmented risks. A_plus_V: variance penalty
/// on original risks, classification through augmented copies.
enum class AblationMode { ERM, A, V, VA, A_plus_V };

/// Which invariance penalty implements the variance term: risk variance
/// across environments (vrex) or the squared risk-derivative with respect to
/// a unit logit multiplier (irmv1).
enum class PenaltyKind { vrex, irmv1 };

inline std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::ERM: return "ERM";
    case AblationMode::A: return "A";
    case AblationMode::V: return "V";
    case AblationMode::VA: return "VA";
    case AblationMode::A_plus_V: return "A_plus_V";
  }
  throw ValueError("unreachable mode");
}

inline AblationMode mode_from_string(const std::string& s) {
  if (s == "ERM") return AblationMode::ERM;
  if (s == "A") return AblationMode::A;
  if (s == "V") return AblationMode::V;
  if (s == "VA") return AblationMode::VA;
  if (s == "A_plus_V") return AblationMode::A_plus_V;
  throw ConfigError("unknown mode '" + s + "' (expected ERM|A|V|VA|A_plus_V)");
}

inline std::string to_string(PenaltyKind p) {
  return p == PenaltyKind::vrex ? "vrex" : "irmv1";
}

inline PenaltyKind penalty_from_string(const std::string& s) {
  if (s == "vrex") return PenaltyKind::vrex;
  if (s == "irmv1") return PenaltyKind::irmv1;
  throw ConfigError("unknown penalty '" + s + "' (expected vrex|irmv1)");
}

inline bool mode_uses_augmentation(AblationMode m) {
  return m == AblationMode::A || m == AblationMode::VA || m == AblationMode::A_plus_V;
}

inline bool mode_uses_penalty(AblationMode m) {
  return m == AblationMode::V || m == AblationMode::VA || m == AblationMode::A_plus_V;
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

/// Featurizer (affine+GeLU stack ending in a plain affine to the feature
/// dimension) plus a linear classifier on features.
struct ModelParams {
  std::vector<Tensor> feat_w, feat_b;
  Tensor cls_w, cls_b;

  static ModelParams init(std::size_t input_dim, std::size_t hidden_width,
                          std::size_t hidden_layers, std::size_t feature_dim,
                          std::size_t classes, Rng& rng) {
    if (hidden_width == 0 || feature_dim == 0 || classes < 2) {
      throw ValueError("model: hidden_width/feature_dim must be positive and classes >= 2");
    }
    ModelParams p;
    std::size_t in = input_dim;
    for (std::size_t l = 0; l < hidden_layers; ++l) {
      p.feat_w.push_back(rng.normal_tensor({in, hidden_width},
                                           1.0 / std::sqrt(static_cast<double>(in))));
      p.feat_b.push_back(Tensor::zeros({hidden_width}));
      in = hidden_width;
    }
    p.feat_w.push_back(rng.normal_tensor({in, feature_dim},
                                         1.0 / std::sqrt(static_cast<double>(in))));
    p.feat_b.push_back(Tensor::zeros({feature_dim}));
    p.cls_w = rng.normal_tensor({feature_dim, classes},
                                1.0 / std::sqrt(static_cast<double>(feature_dim)));
    p.cls_b = Tensor::zeros({classes});
    return p;
  }

  std::size_t feature_dim() const { return cls_w.dim(0); }
  std::size_t classes() const { return cls_w.dim(1); }
  std::size_t input_dim() const { return feat_w.front().dim(0); }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t l = 0; l < feat_w.size(); ++l) {
      out.emplace_back("feat_w" + std::to_string(l), &feat_w[l]);
      out.emplace_back("feat_b" + std::to_string(l), &feat_b[l]);
    }
    out.emplace_back("cls_w", &cls_w);
    out.emplace_back("cls_b", &cls_b);
    return out;
  }
};

/// Tape-free forward pass to features.
inline Tensor featurize_eval(const ModelParams& p, const Tensor& x) {
  Tensor h = x;
  for (std::size_t l = 0; l < p.feat_w.size(); ++l) {
    h = affine_eval(h, p.feat_w[l], p.feat_b[l]);
    if (l + 1 < p.feat_w.size()) h = gelu_eval(h);
  }
  return h;
}

inline Tensor logits_eval(const ModelParams& p, const Tensor& x) {
  return affine_eval(featurize_eval(p, x), p.cls_w, p.cls_b);
}

/// Node ids of one ModelParams set registered on a tape.
struct ModelNodes {
  std::vector<NodeId> feat_w, feat_b;
  NodeId cls_w, cls_b;

  static ModelNodes bind(Tape& t, const ModelParams& p) {
    ModelNodes n;
    for (std::size_t l = 0; l < p.feat_w.size(); ++l) {
      n.feat_w.push_back(t.input(p.feat_w[l]));
      n.feat_b.push_back(t.input(p.feat_b[l]));
    }
    n.cls_w = t.input(p.cls_w);
    n.cls_b = t.input(p.cls_b);
    return n;
  }

  std::vector<NodeId> ids() const {
    std::vector<NodeId> out;
    for (std::size_t l = 0; l < feat_w.size(); ++l) {
      out.push_back(feat_w[l]);
      out.push_back(feat_b[l]);
    }
    out.push_back(cls_w);
    out.push_back(cls_b);
    return out;
  }

  NodeId featurize(Tape& t, NodeId x) const {
    NodeId h = x;
    for (std::size_t l = 0; l < feat_w.size(); ++l) {
      h = t.affine(h, feat_w[l], feat_b[l]);
      if (l + 1 < feat_w.size()) h = t.gelu(h);
    }
    return h;
  }

  NodeId classify(Tape& t, NodeId features) const { return t.affine(features, cls_w, cls_b); }
};

// ---------------------------------------------------------------------------
// Risks and penalties
// ---------------------------------------------------------------------------

/// Mean cross-entropy of the model on one environment batch.
inline NodeId env_risk(Tape& t, const ModelNodes& model, const Tensor& x,
                       std::vector<int> labels) {
  NodeId z = model.featurize(t, t.input(x));
  return t.softmax_cross_entropy(model.classify(t, z), std::move(labels));
}

/// beta * Var({risks}) + sum(risks) as one differentiable scalar. beta = 0
/// returns the plain sum node so the reduction to the risk sum is exact.
inline NodeId vrex_penalty(Tape& t, std::span<const NodeId> risks, double beta) {
  if (risks.empty()) throw ValueError("vrex_penalty: empty risk list");
  NodeId total = t.add_scalars(risks);
  if (beta == 0.0) return total;
  return t.add(t.scale(t.population_variance(risks), beta), total);
}

/// Tape-free counterpart for scalar inputs.
inline double vrex_penalty(std::span<const double> risks, double beta) {
  if (risks.empty()) throw ValueError("vrex_penalty: empty risk list");
  double mean = 0.0, total = 0.0;
  for (double r : risks) total += r;
  mean = total / static_cast<double>(risks.size());
  double var = 0.0;
  for (double r : risks) var += (r - mean) * (r - mean);
  var /= static_cast<double>(risks.size());
  return beta == 0.0 ? total : beta * var + total;
}

/// Sum over environments of the squared derivative of the environment risk
/// with respect to a scalar logit multiplier at 1.
inline NodeId irmv1_penalty(Tape& t, std::span<const NodeId> per_env_logits,
                            std::span<const std::vector<int>> labels) {
  if (per_env_logits.empty()) throw ValueError("irmv1_penalty: empty environment list");
  if (per_env_logits.size() != labels.size()) {
    throw ShapeError("irmv1_penalty: " + std::to_string(per_env_logits.size()) +
                     " logit sets vs " + std::to_string(labels.size()) + " label sets");
  }
  std::vector<NodeId> terms;
  for (std::size_t e = 0; e < per_env_logits.size(); ++e) {
    terms.push_back(t.square(t.logit_scale_grad(per_env_logits[e], labels[e])));
  }
  return t.add_scalars(terms);
}

/// Cross-entropy of the classifier on augmented feature rows with the
/// original labels replicated to match.
inline NodeId consistency_loss(Tape& t, const ModelNodes& model, NodeId z_aug,
                               std::vector<int> labels_rep) {
  return t.softmax_cross_entropy(model.classify(t, z_aug), std::move(labels_rep));
}

// ---------------------------------------------------------------------------
// Composite objective
// ---------------------------------------------------------------------------

/// Pre-built per-environment scalar nodes feeding the composite loss.
struct LossParts {
  std::vector<NodeId> risks;      // risks on original features
  std::vector<NodeId> aug_risks;  // consistency risks on augmented copies
  std::optional<NodeId> sda_l;    // estimator loss (KL + reconstruction)
  std::vector<NodeId> irm_grads;  // per-env logit-scale gradient nodes (irmv1 only)
};

/// Composes the mode's total loss. In augmentation modes the consistency
/// risks take the place of the plain risk sum (they degenerate to it when the
/// translation probability is 0), while the variance penalty acts on original
/// risks (V, A_plus_V) or augmented risks (VA). Zero weights drop their terms
/// entirely so every mode reduces exactly to the ERM sum as
/// (beta, alpha, lambda) -> 0.
inline NodeId virm_total_loss(Tape& t, AblationMode mode, PenaltyKind penalty,
                              const LossParts& parts, double alpha, double beta) {
  const bool aug = mode_uses_augmentation(mode);
  if (parts.risks.empty() && !(mode == AblationMode::A || mode == AblationMode::VA)) {
    throw ValueError("virm_total_loss: mode " + to_string(mode) + " needs original risks");
  }
  if (aug && parts.aug_risks.empty()) {
    throw ValueError("virm_total_loss: mode " + to_string(mode) + " needs augmented risks");
  }

  // classification term
  NodeId total = aug ? t.add_scalars(parts.aug_risks) : t.add_scalars(parts.risks);

  // invariance term
  if (mode_uses_penalty(mode) && beta != 0.0) {
    NodeId pen;
    if (penalty == PenaltyKind::vrex) {
      const auto& src = (mode == AblationMode::VA) ? parts.aug_risks : parts.risks;
      pen = t.population_variance(src);
    } else {
      if (parts.irm_grads.empty()) {
        throw ValueError("virm_total_loss: irmv1 penalty needs per-environment gradient nodes");
      }
      std::vector<NodeId> sq;
      for (NodeId g : parts.irm_grads) sq.push_back(t.square(g));
      pen = t.add_scalars(sq);
    }
    total = t.add(total, t.scale(pen, beta));
  }

  // estimator term
  if (aug && alpha != 0.0) {
    if (!parts.sda_l) {
      throw ValueError("virm_total_loss: mode " + to_string(mode) + " needs the estimator loss");
    }
    total = t.add(total, t.scale(*parts.sda_l, alpha));
  }
  return total;
}

}  // namespace virm
