#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "virm/analysis.hpp"
#include "virm/checkpoint.hpp"
#include "virm/config.hpp"
#include "virm/csv.hpp"
#include "virm/trainer.hpp"

namespace virm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Report writing
// ---------------------------------------------------------------------------

/// Per-run trace file name: trace_<seed>.csv when every report shares one
/// mode, trace_<mode>_<seed>.csv otherwise (ablation sweeps would collide on
/// seed alone).
inline std::string trace_file_name(const TrainReport& r, bool single_mode) {
  if (single_mode) return "trace_" + std::to_string(r.seed) + ".csv";
  return "trace_" + to_string(r.config.mode) + "_" + std::to_string(r.seed) + ".csv";
}

/// results.csv body: one row per evaluated environment per run. Runs with a
/// held-out environment report only that environment (the generalization
/// number); full runs report every environment. One summary row per mode
/// (seed column `all`, env column `avg`) carries the mode's mean.
inline std::string results_csv_from_reports(const std::vector<TrainReport>& reports) {
  if (reports.empty()) throw ValueError("no reports to emit");
  std::string out = "mode,seed,env_id,accuracy\n";
  std::vector<std::string> mode_order;
  std::map<std::string, std::vector<double>> mode_rows;
  for (const auto& r : reports) {
    const std::string mode = to_string(r.config.mode);
    if (mode_rows.find(mode) == mode_rows.end()) mode_order.push_back(mode);
    auto emit_row = [&](int env_id, double acc) {
      out += mode + "," + std::to_string(r.seed) + "," + std::to_string(env_id) + "," +
             fmt_double(acc) + "\n";
      mode_rows[mode].push_back(acc);
    };
    if (r.held_out_env >= 0) {
      emit_row(r.held_out_env, r.per_env_accuracy.at(r.held_out_env));
    } else {
      for (const auto& [env_id, acc] : r.per_env_accuracy) emit_row(env_id, acc);
    }
  }
  for (const auto& mode : mode_order) {
    const auto& vals = mode_rows[mode];
    double sum = 0.0;
    for (double v : vals) sum += v;
    out += mode + ",all,avg," + fmt_double(sum / static_cast<double>(vals.size())) + "\n";
  }
  return out;
}

inline std::string trace_csv(const TrainReport& r) {
  std::string out = "step,loss\n";
  for (const auto& [step, loss] : r.loss_trace) {
    out += std::to_string(step) + "," + fmt_double(loss) + "\n";
  }
  return out;
}

/// Table shaped like the ablation summaries: one row per mode, one column per
/// environment plus the row mean. Cell (mode, env) averages that mode's
/// results.csv rows for that environment across seeds.
inline std::string table_csv_from_reports(const std::vector<TrainReport>& reports) {
  if (reports.empty()) throw ValueError("no reports to tabulate");
  std::set<int> env_ids;
  std::vector<std::string> mode_order;
  std::map<std::string, std::map<int, std::vector<double>>> cells;
  for (const auto& r : reports) {
    const std::string mode = to_string(r.config.mode);
    if (cells.find(mode) == cells.end()) mode_order.push_back(mode);
    if (r.held_out_env >= 0) {
      env_ids.insert(r.held_out_env);
      cells[mode][r.held_out_env].push_back(r.per_env_accuracy.at(r.held_out_env));
    } else {
      for (const auto& [env_id, acc] : r.per_env_accuracy) {
        env_ids.insert(env_id);
        cells[mode][env_id].push_back(acc);
      }
    }
  }
  std::string out = "mode";
  for (int e : env_ids) out += ",env" + std::to_string(e);
  out += ",Avg\n";
  for (const auto& mode : mode_order) {
    out += mode;
    double row_sum = 0.0;
    std::size_t row_n = 0;
    for (int e : env_ids) {
      const auto it = cells[mode].find(e);
      if (it == cells[mode].end() || it->second.empty()) {
        throw ValueError("mode " + mode + " has no result for environment " + std::to_string(e));
      }
      double s = 0.0;
      for (double v : it->second) s += v;
      const double cell = s / static_cast<double>(it->second.size());
      out += "," + fmt_double(cell);
      row_sum += cell;
      ++row_n;
    }
    out += "," + fmt_double(row_sum / static_cast<double>(row_n)) + "\n";
  }
  return out;
}

inline void require_writable(const fs::path& path, bool force) {
  if (!force && fs::exists(path)) {
    throw IoError("output file exists: " + path.string() + " (use --force to overwrite)");
  }
}

/// Writes results.csv, config_echo.json, and one trace file per run into
/// `dir` (created if absent). Refuses to overwrite existing report files
/// unless `force` is set.
inline void emit_report(const std::vector<TrainReport>& reports, const std::string& dir,
                        const std::string& config_echo_json, bool force) {
  if (reports.empty()) throw ValueError("no reports to emit");
  fs::create_directories(dir);
  bool single_mode = true;
  for (const auto& r : reports) {
    if (to_string(r.config.mode) != to_string(reports.front().config.mode)) single_mode = false;
  }
  std::vector<fs::path> targets = {fs::path(dir) / "results.csv",
                                   fs::path(dir) / "config_echo.json"};
  for (const auto& r : reports) targets.push_back(fs::path(dir) / trace_file_name(r, single_mode));
  for (const auto& t : targets) require_writable(t, force);
  write_text_file((fs::path(dir) / "results.csv").string(), results_csv_from_reports(reports));
  write_text_file((fs::path(dir) / "config_echo.json").string(), config_echo_json);
  for (const auto& r : reports) {
    write_text_file((fs::path(dir) / trace_file_name(r, single_mode)).string(), trace_csv(r));
  }
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Runs the configured modes x seeds sweep under the configured protocol and
/// returns every fold's report, in deterministic (mode, seed, fold) order.
inline std::vector<TrainReport> run_ablate(const ExperimentConfig& cfg,
                                           const std::vector<EnvDataset>& envs) {
  if (envs.size() < 3) {
    throw ConfigError("ablation needs >= 3 environments, got " + std::to_string(envs.size()));
  }
  const std::vector<std::uint64_t> seeds =
      cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : cfg.seeds;
  std::vector<TrainReport> reports;
  for (AblationMode mode : cfg.modes) {
    for (std::uint64_t seed : seeds) {
      VirmConfig run_cfg = cfg.train;
      run_cfg.mode = mode;
      run_cfg.seed = seed;
      if (cfg.protocol == "leave_one_out") {
        for (auto& r : leave_one_domain_out(run_cfg, envs)) reports.push_back(std::move(r));
      } else {
        std::vector<EnvDataset> train_envs(envs.begin(), envs.end() - 1);
        Trainer trainer(run_cfg, std::move(train_envs));
        trainer.run();
        reports.push_back(trainer.report(envs, envs.back().env_id));
      }
    }
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Analysis CSV emission
// ---------------------------------------------------------------------------

/// One row of the complexity-estimate CSV.
struct RademacherRow {
  std::string quantity;
  RademacherEstimate estimate;
  std::size_t n = 0;
  double lemma2 = 0.0;
  double theorem1 = 0.0;
};

inline std::string rademacher_csv(const std::vector<RademacherRow>& rows) {
  std::string out = "quantity,m,n,k,draws,estimate,stderr,lemma2_bound,theorem1_bound\n";
  for (const auto& r : rows) {
    out += r.quantity + "," + std::to_string(r.estimate.m) + "," + std::to_string(r.n) + "," +
           std::to_string(r.estimate.k) + "," + std::to_string(r.estimate.draws) + "," +
           fmt_double(r.estimate.mean) + "," + fmt_double(r.estimate.stderr_) + "," +
           fmt_double(r.lemma2) + "," + fmt_double(r.theorem1) + "\n";
  }
  return out;
}

inline std::string overlap_csv(const OverlapReport& rep) {
  std::string out = "dim,overlap\n";
  for (std::size_t j = 0; j < rep.per_dim.size(); ++j) {
    out += std::to_string(j) + "," + fmt_double(rep.per_dim[j]) + "\n";
  }
  out += "pca2d," + fmt_double(rep.projected2d) + "\n";
  return out;
}

inline std::string density_grid_csv(std::span<const std::array<double, 3>> rows) {
  std::string out = "x,density_A,density_B\n";
  for (const auto& r : rows) {
    out += fmt_double(r[0]) + "," + fmt_double(r[1]) + "," + fmt_double(r[2]) + "\n";
  }
  return out;
}

}  // namespace virm
