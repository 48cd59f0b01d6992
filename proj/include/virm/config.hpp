#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "virm/datasets.hpp"
#include "virm/idx.hpp"
#include "virm/trainer.hpp"

namespace virm {

using json = nlohmann::json;

namespace detail {

inline std::string scoped(const std::string& scope, const std::string& key) {
  return scope.empty() ? key : scope + "." + key;
}

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& scope) {
  if (!j.is_object()) {
    throw ConfigError("config: expected an object at " + (scope.empty() ? "top level" : scope));
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const auto& k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("config: unknown key '" + scoped(scope, it.key()) + "'");
  }
}

inline double get_number(const json& j, const std::string& key, double fallback,
                         const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number()) {
    throw ConfigError("config: key '" + scoped(scope, key) + "' expected a number, got " +
                      std::string(v.type_name()));
  }
  return v.get<double>();
}

inline std::size_t get_count(const json& j, const std::string& key, std::size_t fallback,
                             const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
    throw ConfigError("config: key '" + scoped(scope, key) +
                      "' expected a nonnegative integer, got " + v.dump());
  }
  return v.get<std::size_t>();
}

inline std::uint64_t get_seed(const json& j, const std::string& key, std::uint64_t fallback,
                              const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("config: key '" + scoped(scope, key) +
                      "' expected a nonnegative integer seed, got " + v.dump());
  }
  return v.get<std::uint64_t>();
}

inline bool get_bool(const json& j, const std::string& key, bool fallback,
                     const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_boolean()) {
    throw ConfigError("config: key '" + scoped(scope, key) + "' expected a boolean, got " +
                      std::string(v.type_name()));
  }
  return v.get<bool>();
}

inline std::string get_string(const json& j, const std::string& key, const std::string& fallback,
                              const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_string()) {
    throw ConfigError("config: key '" + scoped(scope, key) + "' expected a string, got " +
                      std::string(v.type_name()));
  }
  return v.get<std::string>();
}

inline std::vector<double> get_number_list(const json& j, const std::string& key,
                                           std::vector<double> fallback,
                                           const std::string& scope) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array()) {
    throw ConfigError("config: key '" + scoped(scope, key) + "' expected an array of numbers");
  }
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) {
      throw ConfigError("config: key '" + scoped(scope, key) + "' expected numbers, got " +
                        x.dump());
    }
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset specification
// ---------------------------------------------------------------------------

/// Which dataset a run draws from: the 2-feature toy generator, the
/// color-corrupted digit benchmark built from IDX files, or a pre-exported
/// CSV.
struct DatasetSpec {
  std::string kind = "sem2d";
  Sem2dSpec sem2d;
  bool seed_set = false;  // whether the spec pinned its own seed

  // colored_mnist fields
  std::string images_path, labels_path;
  std::size_t subset = 10000;
  ColoredMnistSpec colored;
  std::uint64_t colored_seed = 0;

  // csv kind
  std::string csv_path;
};

inline DatasetSpec parse_dataset_spec(const json& j, const std::string& scope) {
  DatasetSpec spec;
  spec.kind = detail::get_string(j, "kind", "sem2d", scope);
  if (spec.kind == "sem2d") {
    detail::check_keys(j, {"kind", "n_per_env", "inv_mean", "inv_std", "spurious_corr",
                           "spurious_std", "seed"}, scope);
    spec.sem2d.n_per_env = detail::get_count(j, "n_per_env", spec.sem2d.n_per_env, scope);
    spec.sem2d.inv_mean = detail::get_number(j, "inv_mean", spec.sem2d.inv_mean, scope);
    spec.sem2d.inv_std = detail::get_number(j, "inv_std", spec.sem2d.inv_std, scope);
    spec.sem2d.spurious_corr =
        detail::get_number_list(j, "spurious_corr", spec.sem2d.spurious_corr, scope);
    spec.sem2d.spurious_std = detail::get_number(j, "spurious_std", spec.sem2d.spurious_std, scope);
    spec.seed_set = j.contains("seed");
    spec.sem2d.seed = detail::get_seed(j, "seed", spec.sem2d.seed, scope);
    spec.sem2d.validate();
  } else if (spec.kind == "colored_mnist") {
    detail::check_keys(j, {"kind", "images", "labels", "subset", "env_color_flip", "label_noise",
                           "downsample", "seed"}, scope);
    spec.images_path = detail::get_string(j, "images", "", scope);
    spec.labels_path = detail::get_string(j, "labels", "", scope);
    if (spec.images_path.empty() || spec.labels_path.empty()) {
      throw ConfigError("config: colored_mnist needs 'images' and 'labels' IDX paths");
    }
    spec.subset = detail::get_count(j, "subset", spec.subset, scope);
    spec.colored.env_color_flip =
        detail::get_number_list(j, "env_color_flip", spec.colored.env_color_flip, scope);
    spec.colored.label_noise = detail::get_number(j, "label_noise", spec.colored.label_noise, scope);
    spec.colored.downsample = detail::get_bool(j, "downsample", spec.colored.downsample, scope);
    spec.seed_set = j.contains("seed");
    spec.colored_seed = detail::get_seed(j, "seed", spec.colored_seed, scope);
    spec.colored.validate();
  } else if (spec.kind == "csv") {
    detail::check_keys(j, {"kind", "path"}, scope);
    spec.csv_path = detail::get_string(j, "path", "", scope);
    if (spec.csv_path.empty()) throw ConfigError("config: csv dataset needs 'path'");
  } else {
    throw ConfigError("config: unknown dataset kind '" + spec.kind +
                      "' (expected sem2d|colored_mnist|csv)");
  }
  return spec;
}

inline json dataset_spec_to_json(const DatasetSpec& spec) {
  json j;
  j["kind"] = spec.kind;
  if (spec.kind == "sem2d") {
    j["n_per_env"] = spec.sem2d.n_per_env;
    j["inv_mean"] = spec.sem2d.inv_mean;
    j["inv_std"] = spec.sem2d.inv_std;
    j["spurious_corr"] = spec.sem2d.spurious_corr;
    j["spurious_std"] = spec.sem2d.spurious_std;
    j["seed"] = spec.sem2d.seed;
  } else if (spec.kind == "colored_mnist") {
    j["images"] = spec.images_path;
    j["labels"] = spec.labels_path;
    j["subset"] = spec.subset;
    j["env_color_flip"] = spec.colored.env_color_flip;
    j["label_noise"] = spec.colored.label_noise;
    j["downsample"] = spec.colored.downsample;
    j["seed"] = spec.colored_seed;
  } else {
    j["path"] = spec.csv_path;
  }
  return j;
}

/// Materializes the environments a spec describes.
inline std::vector<EnvDataset> build_dataset(const DatasetSpec& spec) {
  if (spec.kind == "sem2d") return gen_sem_2d(spec.sem2d);
  if (spec.kind == "csv") return dataset_from_csv(spec.csv_path);
  Tensor images = load_idx_images(spec.images_path);
  std::vector<int> digits = load_idx_labels(spec.labels_path);
  if (images.dim(0) != digits.size()) {
    throw FormatError("idx: " + std::to_string(images.dim(0)) + " images vs " +
                      std::to_string(digits.size()) + " labels");
  }
  if (spec.subset > 0 && spec.subset < images.dim(0)) {
    const std::size_t h = images.dim(1), w = images.dim(2);
    Tensor sub({spec.subset, h, w});
    for (std::size_t i = 0; i < spec.subset * h * w; ++i) sub[i] = images[i];
    images = std::move(sub);
    digits.resize(spec.subset);
  }
  return build_colored_mnist(images, digits, spec.colored, spec.colored_seed);
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Training configuration plus dataset spec plus sweep settings for the
/// ablation command.
struct ExperimentConfig {
  VirmConfig train;
  bool train_seed_set = false;
  DatasetSpec dataset;
  std::vector<std::uint64_t> seeds;    // ablation sweep; defaults to {train.seed}
  std::vector<AblationMode> modes;     // ablation sweep; defaults to all five
  std::string protocol = "holdout_last";  // or "leave_one_out"
  bool save_checkpoint = false;
};

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    throw ConfigError("config: " + msg);
  }
  detail::check_keys(j, {"mode", "penalty", "steps", "batch_size", "seed", "beta", "lr",
                         "eval_every", "hidden_width", "hidden_layers", "feature_dim",
                         "penalty_warmup", "sda", "dataset", "seeds", "modes", "protocol",
                         "save_checkpoint"},
                     "");
  ExperimentConfig cfg;
  cfg.train.mode = mode_from_string(detail::get_string(j, "mode", to_string(cfg.train.mode), ""));
  cfg.train.penalty =
      penalty_from_string(detail::get_string(j, "penalty", to_string(cfg.train.penalty), ""));
  cfg.train.steps = detail::get_count(j, "steps", cfg.train.steps, "");
  cfg.train.batch_size = detail::get_count(j, "batch_size", cfg.train.batch_size, "");
  cfg.train_seed_set = j.contains("seed");
  cfg.train.seed = detail::get_seed(j, "seed", cfg.train.seed, "");
  cfg.train.beta = detail::get_number(j, "beta", cfg.train.beta, "");
  cfg.train.lr = detail::get_number(j, "lr", cfg.train.lr, "");
  cfg.train.eval_every = detail::get_count(j, "eval_every", cfg.train.eval_every, "");
  cfg.train.hidden_width = detail::get_count(j, "hidden_width", cfg.train.hidden_width, "");
  cfg.train.hidden_layers = detail::get_count(j, "hidden_layers", cfg.train.hidden_layers, "");
  cfg.train.feature_dim = detail::get_count(j, "feature_dim", cfg.train.feature_dim, "");
  cfg.train.penalty_warmup = detail::get_count(j, "penalty_warmup", cfg.train.penalty_warmup, "");

  if (j.contains("sda")) {
    const json& s = j.at("sda");
    detail::check_keys(s, {"lambda", "U", "alpha"}, "sda");
    cfg.train.sda.lambda = detail::get_number(s, "lambda", cfg.train.sda.lambda, "sda");
    cfg.train.sda.U = detail::get_count(s, "U", cfg.train.sda.U, "sda");
    cfg.train.sda.alpha = detail::get_number(s, "alpha", cfg.train.sda.alpha, "sda");
  }
  cfg.train.validate();

  if (j.contains("dataset")) {
    cfg.dataset = parse_dataset_spec(j.at("dataset"), "dataset");
  }

  if (j.contains("seeds")) {
    const auto& v = j.at("seeds");
    if (!v.is_array() || v.empty()) throw ConfigError("config: 'seeds' expects a nonempty array");
    for (const auto& x : v) {
      if (!x.is_number_integer() || x.get<long long>() < 0) {
        throw ConfigError("config: 'seeds' expects nonnegative integers, got " + x.dump());
      }
      cfg.seeds.push_back(x.get<std::uint64_t>());
    }
  }

  if (j.contains("modes")) {
    const auto& v = j.at("modes");
    if (!v.is_array() || v.empty()) throw ConfigError("config: 'modes' expects a nonempty array");
    for (const auto& x : v) {
      if (!x.is_string()) throw ConfigError("config: 'modes' expects strings, got " + x.dump());
      cfg.modes.push_back(mode_from_string(x.get<std::string>()));
    }
  } else {
    cfg.modes = {AblationMode::ERM, AblationMode::A, AblationMode::V, AblationMode::VA,
                 AblationMode::A_plus_V};
  }

  cfg.protocol = detail::get_string(j, "protocol", cfg.protocol, "");
  if (cfg.protocol != "holdout_last" && cfg.protocol != "leave_one_out") {
    throw ConfigError("config: unknown protocol '" + cfg.protocol +
                      "' (expected holdout_last|leave_one_out)");
  }
  cfg.save_checkpoint = detail::get_bool(j, "save_checkpoint", cfg.save_checkpoint, "");
  return cfg;
}

inline json virm_config_to_json(const VirmConfig& c) {
  json j;
  j["mode"] = to_string(c.mode);
  j["penalty"] = to_string(c.penalty);
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["beta"] = c.beta;
  j["lr"] = c.lr;
  j["eval_every"] = c.eval_every;
  j["hidden_width"] = c.hidden_width;
  j["hidden_layers"] = c.hidden_layers;
  j["feature_dim"] = c.feature_dim;
  j["penalty_warmup"] = c.penalty_warmup;
  j["sda"] = {{"lambda", c.sda.lambda}, {"U", c.sda.U}, {"alpha", c.sda.alpha}};
  return j;
}

inline VirmConfig virm_config_from_json(const json& j) {
  ExperimentConfig parsed = parse_experiment_config(j.dump());
  return parsed.train;
}

/// Fully-populated echo of an experiment config, defaults applied.
inline json experiment_config_to_json(const ExperimentConfig& cfg) {
  json j = virm_config_to_json(cfg.train);
  j["dataset"] = dataset_spec_to_json(cfg.dataset);
  std::vector<std::uint64_t> seeds = cfg.seeds.empty()
                                         ? std::vector<std::uint64_t>{cfg.train.seed}
                                         : cfg.seeds;
  j["seeds"] = seeds;
  std::vector<std::string> modes;
  for (AblationMode m : cfg.modes) modes.push_back(to_string(m));
  j["modes"] = modes;
  j["protocol"] = cfg.protocol;
  j["save_checkpoint"] = cfg.save_checkpoint;
  return j;
}

}  // namespace virm
