#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "virm/adam.hpp"
#include "virm/datasets.hpp"
#include "virm/objectives.hpp"
#include "virm/rng.hpp"
#include "virm/sda.hpp"

namespace virm {

/// Full experiment configuration for one training run.
struct VirmConfig {
  AblationMode mode = AblationMode::A_plus_V;
  PenaltyKind penalty = PenaltyKind::vrex;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  SdaConfig sda;
  double beta = 10.0;
  double lr = 1e-3;
  std::size_t eval_every = 10;
  std::size_t hidden_width = 128;
  std::size_t hidden_layers = 2;
  std::size_t feature_dim = 64;
  std::size_t penalty_warmup = 0;  // steps trained with the invariance weight off

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch statistics)");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (lr <= 0.0) throw ConfigError("lr must be > 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (hidden_width < 1 || feature_dim < 1) {
      throw ConfigError("hidden_width and feature_dim must be >= 1");
    }
    sda.validate();
  }
};

/// Results of one training run.
struct TrainReport {
  std::map<int, double> per_env_accuracy;
  double avg_accuracy = 0.0;
  std::vector<std::pair<std::size_t, double>> loss_trace;
  VirmConfig config;
  std::uint64_t seed = 0;
  int held_out_env = -1;  // -1 when no environment was excluded from training
};

/// Fraction of argmax predictions matching the labels; augmentation plays no
/// part in evaluation.
inline double evaluate_accuracy(const ModelParams& params, const EnvDataset& env) {
  env.validate(static_cast<int>(params.classes()));
  const Tensor logits = logits_eval(params, env.features);
  const std::size_t n = env.size(), c = params.classes();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    if (static_cast<int>(best) == env.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Multi-environment training loop: one uniformly sampled batch per
/// environment per step, a single optimizer over model and estimator weights,
/// and a mode-dependent composite loss. Fully deterministic given
/// (config, data, seed).
class Trainer {
public:
  Trainer(VirmConfig config, std::vector<EnvDataset> train_envs)
      : cfg_(std::move(config)), envs_(std::move(train_envs)), rng_(mix_seed(cfg_.seed)) {
    cfg_.validate();
    if (envs_.empty()) throw ConfigError("no training environments");
    if (mode_uses_penalty(cfg_.mode) && envs_.size() < 2) {
      throw ConfigError("mode " + to_string(cfg_.mode) + " needs >= 2 training environments");
    }
    classes_ = static_cast<std::size_t>(num_classes(envs_));
    for (const auto& e : envs_) e.validate(static_cast<int>(classes_));
    const std::size_t input_dim = envs_.front().features.dim(1);
    for (const auto& e : envs_) {
      if (e.features.dim(1) != input_dim) {
        throw ShapeError("environment " + std::to_string(e.env_id) + " feature width " +
                         e.features.shape_str() + " differs from " + std::to_string(input_dim));
      }
    }
    model_ = ModelParams::init(input_dim, cfg_.hidden_width, cfg_.hidden_layers,
                               cfg_.feature_dim, classes_, rng_);
    sda_ = SdaParams::init(cfg_.feature_dim, rng_);
    adam_ = AdamState::init(param_ptrs(), AdamConfig{cfg_.lr, 0.9, 0.999, 1e-8});
  }

  const VirmConfig& config() const { return cfg_; }
  const std::vector<EnvDataset>& train_envs() const { return envs_; }
  ModelParams& model() { return model_; }
  const ModelParams& model() const { return model_; }
  SdaParams& sda() { return sda_; }
  const SdaParams& sda() const { return sda_; }
  AdamState& adam() { return adam_; }
  Rng& rng() { return rng_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  const std::vector<std::pair<std::size_t, double>>& trace() const { return trace_; }
  std::vector<std::pair<std::size_t, double>>& trace() { return trace_; }

  std::vector<Tensor*> param_ptrs() {
    std::vector<Tensor*> out;
    for (auto& [name, ptr] : model_.named_params()) out.push_back(ptr);
    for (auto& [name, ptr] : sda_.named_params()) out.push_back(ptr);
    return out;
  }

  /// Runs one optimization step and returns the loss value at the old params.
  double step_once() {
    const bool aug = mode_uses_augmentation(cfg_.mode);
    const double beta_now = step_ < cfg_.penalty_warmup ? 0.0 : cfg_.beta;
    const std::size_t k = cfg_.feature_dim;

    Tape t;
    ModelNodes model_nodes = ModelNodes::bind(t, model_);
    SdaNodes sda_nodes = SdaNodes::bind(t, sda_);

    LossParts parts;
    std::vector<NodeId> sda_terms;
    const bool need_irm_grads = mode_uses_penalty(cfg_.mode) &&
                                cfg_.penalty == PenaltyKind::irmv1 && beta_now != 0.0;

    // All batches are drawn before any augmentation noise so that, for a fixed
    // seed, every mode trains on the same example indices.
    std::vector<std::pair<Tensor, std::vector<int>>> batches;
    batches.reserve(envs_.size());
    for (const auto& env : envs_) batches.push_back(sample_batch(env));

    for (auto& [x, y] : batches) {
      NodeId z = model_nodes.featurize(t, t.input(std::move(x)));
      NodeId logits = model_nodes.classify(t, z);
      parts.risks.push_back(t.softmax_cross_entropy(logits, y));

      NodeId penalty_logits = logits;
      std::vector<int> penalty_labels = y;

      if (aug) {
        NodeId logvar = sda_nodes.encode_logvar(t, z);
        std::vector<NodeId> copies;
        std::vector<int> labels_rep;
        NodeId first_xi = 0;
        for (std::size_t u = 0; u < cfg_.sda.U; ++u) {
          Tensor eps = rng_.normal_tensor({cfg_.batch_size, k}, 1.0);
          Tensor mask = bernoulli_mask(k, cfg_.sda.lambda, rng_);
          NodeId xi = t.reparam_sample(logvar, std::move(eps));
          if (u == 0) first_xi = xi;
          copies.push_back(t.translate_masked(z, xi, std::move(mask)));
          labels_rep.insert(labels_rep.end(), y.begin(), y.end());
        }
        NodeId z_aug = t.concat_rows(copies);
        NodeId aug_logits = model_nodes.classify(t, z_aug);
        parts.aug_risks.push_back(t.softmax_cross_entropy(aug_logits, labels_rep));
        NodeId z_hat = sda_nodes.reconstruct(t, first_xi);
        sda_terms.push_back(sda_loss_node(t, logvar, z_hat, z));
        if (cfg_.mode == AblationMode::VA) {
          penalty_logits = aug_logits;
          penalty_labels = std::move(labels_rep);
        }
      }
      if (need_irm_grads) {
        parts.irm_grads.push_back(t.logit_scale_grad(penalty_logits, std::move(penalty_labels)));
      }
    }
    if (!sda_terms.empty()) parts.sda_l = t.add_scalars(sda_terms);

    NodeId loss = virm_total_loss(t, cfg_.mode, cfg_.penalty, parts, cfg_.sda.alpha, beta_now);
    const double loss_value = t.value(loss).value();
    t.backward(loss);

    std::vector<Tensor*> params = param_ptrs();
    std::vector<NodeId> ids = model_nodes.ids();
    for (NodeId id : sda_nodes.ids()) ids.push_back(id);
    std::vector<const Tensor*> grads;
    grads.reserve(ids.size());
    for (NodeId id : ids) grads.push_back(&t.grad(id));
    adam_.step(params, grads);

    if (step_ % cfg_.eval_every == 0 || step_ + 1 == cfg_.steps) {
      trace_.emplace_back(step_, loss_value);
    }
    ++step_;
    return loss_value;
  }

  void run() {
    while (step_ < cfg_.steps) step_once();
  }

  /// Evaluates on the given environments (training ones plus any held-out).
  TrainReport report(const std::vector<EnvDataset>& eval_envs, int held_out_env = -1) const {
    TrainReport r;
    r.config = cfg_;
    r.seed = cfg_.seed;
    r.held_out_env = held_out_env;
    r.loss_trace = trace_;
    double sum = 0.0;
    for (const auto& env : eval_envs) {
      const double acc = evaluate_accuracy(model_, env);
      r.per_env_accuracy[env.env_id] = acc;
      sum += acc;
    }
    if (!eval_envs.empty()) r.avg_accuracy = sum / static_cast<double>(eval_envs.size());
    return r;
  }

private:
  std::pair<Tensor, std::vector<int>> sample_batch(const EnvDataset& env) {
    const std::size_t n = env.size(), d = env.features.dim(1);
    Tensor x({cfg_.batch_size, d});
    std::vector<int> y(cfg_.batch_size);
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
      const std::size_t idx = rng_.index(n);
      const auto row = env.features.row(idx);
      for (std::size_t j = 0; j < d; ++j) x(i, j) = row[j];
      y[i] = env.labels[idx];
    }
    return {std::move(x), std::move(y)};
  }

  VirmConfig cfg_;
  std::vector<EnvDataset> envs_;
  Rng rng_;
  std::size_t classes_ = 2;
  ModelParams model_;
  SdaParams sda_;
  AdamState adam_;
  std::size_t step_ = 0;
  std::vector<std::pair<std::size_t, double>> trace_;
};

/// Trains on the given environments and evaluates on them.
inline std::tuple<ModelParams, SdaParams, TrainReport> train_run(
    const VirmConfig& config, const std::vector<EnvDataset>& envs) {
  Trainer trainer(config, envs);
  trainer.run();
  TrainReport report = trainer.report(envs);
  return {trainer.model(), trainer.sda(), std::move(report)};
}

/// For each environment: train on all the others (fold seed = seed + fold
/// index), then evaluate everywhere. The held-out environment never enters a
/// training batch; its id is recorded on the fold's report.
inline std::vector<TrainReport> leave_one_domain_out(const VirmConfig& config,
                                                     const std::vector<EnvDataset>& all_envs) {
  if (all_envs.size() < 3) {
    throw ConfigError("leave-one-domain-out needs >= 3 environments, got " +
                      std::to_string(all_envs.size()));
  }
  std::vector<TrainReport> reports;
  for (std::size_t fold = 0; fold < all_envs.size(); ++fold) {
    std::vector<EnvDataset> train_envs;
    for (std::size_t e = 0; e < all_envs.size(); ++e) {
      if (e != fold) train_envs.push_back(all_envs[e]);
    }
    VirmConfig fold_cfg = config;
    fold_cfg.seed = config.seed + fold;
    Trainer trainer(fold_cfg, std::move(train_envs));
    trainer.run();
    reports.push_back(trainer.report(all_envs, all_envs[fold].env_id));
  }
  return reports;
}

}  // namespace virm
