#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "virm/csv.hpp"
#include "virm/rng.hpp"
#include "virm/tensor.hpp"

namespace virm {

/// Labeled examples tagged with the environment they were drawn from.
struct EnvDataset {
  int env_id = 0;
  Tensor features;          // n x k
  std::vector<int> labels;  // class indices, length n
  std::string meta;

  std::size_t size() const { return labels.size(); }

  void validate(int num_classes) const {
    if (labels.empty()) throw ValueError("environment " + std::to_string(env_id) + " is empty");
    if (features.rank() != 2 || features.dim(0) != labels.size()) {
      throw ShapeError("environment " + std::to_string(env_id) + ": features " +
                       features.shape_str() + " vs " + std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
      if (y < 0 || y >= num_classes) {
        throw IndexError("environment " + std::to_string(env_id) + ": label " +
                         std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
};

inline int num_classes(const std::vector<EnvDataset>& envs) {
  int c = 0;
  for (const auto& e : envs)
    for (int y : e.labels) c = std::max(c, y + 1);
  return std::max(c, 2);
}

// ---------------------------------------------------------------------------
// Color-corrupted digit environments
// ---------------------------------------------------------------------------

/// Recipe parameters for the color-corrupted digit benchmark: a binary digit
/// label with fixed label noise, and one color-flip probability per
/// environment controlling how strongly color tracks the (noisy) label.
struct ColoredMnistSpec {
  std::vector<double> env_color_flip = {0.1, 0.2, 0.9};
  double label_noise = 0.25;
  bool downsample = true;

  void validate() const {
    if (env_color_flip.empty()) throw ValueError("env_color_flip must name at least one environment");
    for (double p : env_color_flip) {
      if (p < 0.0 || p > 1.0) {
        throw ValueError("env_color_flip probability " + fmt_double(p) + " outside [0,1]");
      }
    }
    if (label_noise < 0.0 || label_noise > 1.0) {
      throw ValueError("label_noise " + fmt_double(label_noise) + " outside [0,1]");
    }
  }
};

inline std::string colored_env_name(double flip_prob) {
  const double corr = 1.0 - 2.0 * flip_prob;  // correlation between color and label
  const int pct = static_cast<int>(std::lround(std::abs(corr) * 100.0));
  return (corr >= 0 ? "+" : "-") + std::to_string(pct) + "%";
}

/// Builds per-environment feature sets from raw grayscale digit images:
///   y  = [digit < 5], flipped with probability label_noise;
///   c  = y, flipped with probability env_color_flip[e];
///   feature = 2-channel image with channel (1 - c) zeroed, optionally
///             2x-downsampled (stride 2) to 14x14 per channel, flattened.
/// Examples are shuffled once, then dealt round-robin across environments.
inline std::vector<EnvDataset> build_colored_mnist(const Tensor& images,
                                                   const std::vector<int>& digits,
                                                   const ColoredMnistSpec& spec,
                                                   std::uint64_t seed) {
  spec.validate();
  if (images.rank() != 3) {
    throw ShapeError("expected images [n x h x w], got " + images.shape_str());
  }
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2);
  if (n == 0) throw ValueError("empty image set");
  if (digits.size() != n) {
    throw ShapeError(std::to_string(digits.size()) + " digit labels for " + std::to_string(n) +
                     " images");
  }
  for (int d : digits) {
    if (d < 0 || d >= 10) throw IndexError("digit " + std::to_string(d) + " outside [0, 10)");
  }

  Rng rng(mix_seed(seed));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates with the local stream
    std::swap(order[i - 1], order[rng.index(i)]);
  }

  const std::size_t num_envs = spec.env_color_flip.size();
  const std::size_t oh = spec.downsample ? (h + 1) / 2 : h;
  const std::size_t ow = spec.downsample ? (w + 1) / 2 : w;
  const std::size_t feat = 2 * oh * ow;

  std::vector<EnvDataset> envs(num_envs);
  std::vector<std::vector<double>> feats(num_envs);
  for (std::size_t e = 0; e < num_envs; ++e) {
    envs[e].env_id = static_cast<int>(e);
    envs[e].meta = "colored_digits env " + colored_env_name(spec.env_color_flip[e]) +
                   " color_flip=" + fmt_double(spec.env_color_flip[e]);
  }

  const std::size_t step = spec.downsample ? 2 : 1;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t idx = order[pos];
    const std::size_t e = pos % num_envs;
    int y = digits[idx] < 5 ? 0 : 1;
    if (rng.bernoulli(spec.label_noise)) y = 1 - y;
    int c = y;
    if (rng.bernoulli(spec.env_color_flip[e])) c = 1 - c;

    auto& buf = feats[e];
    const std::size_t base = buf.size();
    buf.resize(base + feat, 0.0);
    // channel c carries the image, the other channel stays zero
    double* chan = buf.data() + base + static_cast<std::size_t>(c) * oh * ow;
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t col = 0; col < ow; ++col) {
        chan[r * ow + col] = images[idx * h * w + (r * step) * w + (col * step)];
      }
    }
    envs[e].labels.push_back(y);
  }

  for (std::size_t e = 0; e < num_envs; ++e) {
    const std::size_t rows = envs[e].labels.size();
    if (rows == 0) throw ValueError("environment " + std::to_string(e) + " received no examples");
    envs[e].features = Tensor({rows, feat}, std::move(feats[e]));
  }
  return envs;
}

// ---------------------------------------------------------------------------
// 2-D structural-equation toy
// ---------------------------------------------------------------------------

/// Two-feature toy generator with one invariant and one spuriously correlated
/// coordinate. The spurious coordinate's alignment with the class sign is set
/// per environment, so it can be made dominant in training and reversed at
/// test time.
struct Sem2dSpec {
  std::size_t n_per_env = 2000;
  double inv_mean = 1.0;
  double inv_std = 0.75;
  std::vector<double> spurious_corr = {0.95, 0.85, -0.9};
  double spurious_std = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_per_env == 0) throw ValueError("n_per_env must be positive");
    if (inv_std <= 0.0 || spurious_std <= 0.0) {
      throw ValueError("inv_std and spurious_std must be positive");
    }
    if (spurious_corr.empty()) throw ValueError("spurious_corr must name at least one environment");
    for (double r : spurious_corr) {
      if (r < -1.0 || r > 1.0) {
        throw ValueError("spurious correlation " + fmt_double(r) + " outside [-1,1]");
      }
    }
  }
};

/// y uniform in {0,1}; s = 2y - 1; x_inv = s*inv_mean + N(0, inv_std^2);
/// x_sp = rho_e*s*inv_mean + N(0, spurious_std^2).
inline std::vector<EnvDataset> gen_sem_2d(const Sem2dSpec& spec) {
  spec.validate();
  std::vector<EnvDataset> envs(spec.spurious_corr.size());
  for (std::size_t e = 0; e < envs.size(); ++e) {
    const double rho = spec.spurious_corr[e];
    Rng rng(mix_seed(spec.seed + 0x9E3779B97F4A7C15ull * (e + 1)));
    EnvDataset& env = envs[e];
    env.env_id = static_cast<int>(e);
    env.meta = "sem2d rho=" + fmt_double(rho);
    env.features = Tensor({spec.n_per_env, 2});
    env.labels.resize(spec.n_per_env);
    for (std::size_t i = 0; i < spec.n_per_env; ++i) {
      const int y = rng.bernoulli(0.5) ? 1 : 0;
      const double s = y == 1 ? 1.0 : -1.0;
      env.features(i, 0) = s * spec.inv_mean + rng.normal() * spec.inv_std;
      env.features(i, 1) = rho * s * spec.inv_mean + rng.normal() * spec.spurious_std;
      env.labels[i] = y;
    }
  }
  return envs;
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

/// Writes all environments into one CSV with header env,label,f0,...,f{k-1}.
inline std::string dataset_to_csv(const std::vector<EnvDataset>& envs) {
  if (envs.empty()) throw ValueError("no environments to export");
  const std::size_t k = envs.front().features.dim(1);
  std::string out = "env,label";
  for (std::size_t j = 0; j < k; ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (const auto& env : envs) {
    if (env.features.dim(1) != k) {
      throw ShapeError("environment " + std::to_string(env.env_id) +
                       " feature width differs: " + env.features.shape_str());
    }
    for (std::size_t i = 0; i < env.size(); ++i) {
      out += std::to_string(env.env_id);
      out += ',';
      out += std::to_string(env.labels[i]);
      for (std::size_t j = 0; j < k; ++j) {
        out += ',';
        out += fmt_double(env.features(i, j));
      }
      out += '\n';
    }
  }
  return out;
}

/// Reads a dataset CSV written by dataset_to_csv back into environments.
inline std::vector<EnvDataset> dataset_from_csv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw FormatError("csv: empty dataset file " + path);
  const auto head = split_csv_line(lines[0]);
  if (head.size() < 3 || head[0] != "env" || head[1] != "label") {
    throw FormatError("csv: expected header env,label,f0,... in " + path);
  }
  const std::size_t k = head.size() - 2;
  std::vector<int> env_ids;
  std::vector<std::vector<double>> feats;
  std::vector<std::vector<int>> labels;
  auto env_slot = [&](int id) -> std::size_t {
    for (std::size_t i = 0; i < env_ids.size(); ++i)
      if (env_ids[i] == id) return i;
    env_ids.push_back(id);
    feats.emplace_back();
    labels.emplace_back();
    return env_ids.size() - 1;
  };
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto fields = split_csv_line(lines[i]);
    if (fields.size() != head.size()) {
      throw FormatError("csv: row " + std::to_string(i + 1) + " has " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(head.size()));
    }
    const std::size_t slot = env_slot(static_cast<int>(parse_double(fields[0])));
    labels[slot].push_back(static_cast<int>(parse_double(fields[1])));
    for (std::size_t j = 0; j < k; ++j) feats[slot].push_back(parse_double(fields[2 + j]));
  }
  std::vector<EnvDataset> envs;
  for (std::size_t s = 0; s < env_ids.size(); ++s) {
    EnvDataset env;
    env.env_id = env_ids[s];
    env.meta = "loaded from " + path;
    env.labels = std::move(labels[s]);
    env.features = Tensor({env.labels.size(), k}, std::move(feats[s]));
    envs.push_back(std::move(env));
  }
  return envs;
}

}  // namespace virm
