// Command-line front end: dataset generation, training, ablation sweeps,
// complexity estimates, and feature-overlap reports. Every command is a pure
// function of (config file, input files, seed); identical inputs produce
// byte-identical outputs.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "virm/analysis.hpp"
#include "virm/checkpoint.hpp"
#include "virm/config.hpp"
#include "virm/csv.hpp"
#include "virm/datasets.hpp"
#include "virm/idx.hpp"
#include "virm/report.hpp"
#include "virm/trainer.hpp"

namespace fs = std::filesystem;
using namespace virm;

namespace {

std::string single_line(std::string msg) {
  for (auto& c : msg) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return msg;
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

/// Seed precedence: explicit --seed flag, then the config file, then the
/// VIRM_SEED environment variable, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, bool config_set,
                           std::uint64_t config_value) {
  if (flag) return *flag;
  if (config_set) return config_value;
  if (const char* env = std::getenv("VIRM_SEED")) {
    const std::string s(env);
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("VIRM_SEED is not a nonnegative integer: '" + s + "'");
    }
  }
  return 0;
}

void apply_dataset_seed(DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == "sem2d") {
    spec.sem2d.seed = seed;
  } else if (spec.kind == "colored_mnist") {
    spec.colored_seed = seed;
  }
  spec.seed_set = true;
}

struct GenDataArgs {
  std::string spec_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void run_gen_data(const GenDataArgs& args) {
  json j;
  try {
    j = json::parse(read_text(args.spec_path));
  } catch (const json::exception& e) {
    throw ConfigError("config: " + single_line(e.what()));
  }
  DatasetSpec spec = j.is_object() && j.contains("dataset")
                         ? parse_experiment_config(j.dump()).dataset
                         : parse_dataset_spec(j, "dataset");
  const std::uint64_t seed = resolve_seed(
      args.seed, spec.seed_set, spec.kind == "sem2d" ? spec.sem2d.seed : spec.colored_seed);
  apply_dataset_seed(spec, seed);

  const auto envs = build_dataset(spec);
  fs::create_directories(args.out_dir);
  const fs::path csv_path = fs::path(args.out_dir) / "dataset.csv";
  const fs::path echo_path = fs::path(args.out_dir) / "spec_echo.json";
  require_writable(csv_path, args.force);
  require_writable(echo_path, args.force);
  write_text_file(csv_path.string(), dataset_to_csv(envs));
  write_text_file(echo_path.string(), dataset_spec_to_json(spec).dump(2) + "\n");
}

struct TrainArgs {
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

ExperimentConfig load_experiment(const TrainArgs& args) {
  ExperimentConfig cfg = parse_experiment_config(read_text(args.config_path));
  cfg.train.seed = resolve_seed(args.seed, cfg.train_seed_set, cfg.train.seed);
  if (!cfg.dataset.seed_set) {
    // couple the data stream to the run seed unless the spec pinned its own
    apply_dataset_seed(cfg.dataset, cfg.train.seed);
  }
  return cfg;
}

void run_train(const TrainArgs& args) {
  ExperimentConfig cfg = load_experiment(args);
  const auto envs = build_dataset(cfg.dataset);
  std::vector<TrainReport> reports;
  std::vector<Trainer> trainers;
  if (cfg.protocol == "leave_one_out") {
    reports = leave_one_domain_out(cfg.train, envs);
  } else {
    if (envs.size() < 2) {
      throw ConfigError("holdout_last needs >= 2 environments, got " +
                        std::to_string(envs.size()));
    }
    std::vector<EnvDataset> train_envs(envs.begin(), envs.end() - 1);
    Trainer trainer(cfg.train, std::move(train_envs));
    trainer.run();
    reports.push_back(trainer.report(envs, envs.back().env_id));
    if (cfg.save_checkpoint) trainers.push_back(std::move(trainer));
  }
  fs::create_directories(args.out_dir);
  if (cfg.save_checkpoint && !trainers.empty()) {
    const fs::path ckpt =
        fs::path(args.out_dir) / ("checkpoint_" + std::to_string(cfg.train.seed) + ".json");
    require_writable(ckpt, args.force);
    emit_report(reports, args.out_dir, experiment_config_to_json(cfg).dump(2) + "\n", args.force);
    save_checkpoint(trainers.front(), ckpt.string());
  } else {
    emit_report(reports, args.out_dir, experiment_config_to_json(cfg).dump(2) + "\n", args.force);
  }
}

void run_ablate_cmd(const TrainArgs& args) {
  ExperimentConfig cfg = load_experiment(args);
  const auto envs = build_dataset(cfg.dataset);
  const auto reports = run_ablate(cfg, envs);
  fs::create_directories(args.out_dir);
  const fs::path table_path = fs::path(args.out_dir) / "table.csv";
  require_writable(table_path, args.force);
  emit_report(reports, args.out_dir, experiment_config_to_json(cfg).dump(2) + "\n", args.force);
  write_text_file(table_path.string(), table_csv_from_reports(reports));
}

struct RademacherArgs {
  std::size_t m = 64, k = 16, U = 100, draws = 2000;
  double lambda = 0.8;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool force = false;
};

void run_rademacher(const RademacherArgs& args) {
  const std::uint64_t seed = resolve_seed(args.seed, false, 0);
  Rng rng(mix_seed(seed));
  Tensor s({args.m, args.k});
  for (std::size_t i = 0; i < args.m; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < args.k; ++j) {
      s(i, j) = rng.normal();
      n2 += s(i, j) * s(i, j);
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t j = 0; j < args.k; ++j) s(i, j) *= inv;  // unit-norm rows
  }
  SdaParams sda = SdaParams::init(args.k, rng);
  const Tensor aug = build_augmented_set(s, sda, args.U, args.lambda, rng);
  const double lemma2 = lemma2_bound(s);
  const double theorem1 = theorem1_bound(aug, max_row_norm_sq(s), args.k);

  std::vector<RademacherRow> rows;
  rows.push_back({"original_mc", empirical_rademacher_linear(s, args.draws, rng), args.m, lemma2,
                  theorem1});
  if (args.m <= 12) {
    rows.push_back({"original_exact", exact_rademacher_linear(s), args.m, lemma2, theorem1});
  }
  rows.push_back({"augmented_mc", empirical_rademacher_linear(aug, args.draws, rng),
                  aug.dim(0), lemma2, theorem1});

  fs::create_directories(args.out_dir);
  const fs::path csv_path = fs::path(args.out_dir) / "rademacher.csv";
  require_writable(csv_path, args.force);
  write_text_file(csv_path.string(), rademacher_csv(rows));
}

struct OverlapArgs {
  std::string features_a, features_b, out_dir;
  std::size_t grid = 200;
  double bandwidth = 0.0;  // 0 = rule-of-thumb
  bool force = false;
};

void run_overlap(const OverlapArgs& args) {
  const Tensor a = read_features_csv(args.features_a);
  const Tensor b = read_features_csv(args.features_b);
  const OverlapReport rep = args.bandwidth > 0.0 ? kde_overlap(a, b, args.bandwidth, args.grid)
                                                 : kde_overlap_auto(a, b, args.grid);
  fs::create_directories(args.out_dir);
  std::vector<fs::path> targets = {fs::path(args.out_dir) / "overlap.csv"};
  for (std::size_t j = 0; j < rep.per_dim.size(); ++j) {
    targets.push_back(fs::path(args.out_dir) / ("density_dim" + std::to_string(j) + ".csv"));
  }
  for (const auto& t : targets) require_writable(t, args.force);
  write_text_file(targets[0].string(), overlap_csv(rep));
  for (std::size_t j = 0; j < rep.per_dim.size(); ++j) {
    std::vector<double> ca(a.dim(0)), cb(b.dim(0));
    for (std::size_t i = 0; i < a.dim(0); ++i) ca[i] = a(i, j);
    for (std::size_t i = 0; i < b.dim(0); ++i) cb[i] = b(i, j);
    const auto dump = kde_grid_dump(ca, cb, rep.per_dim_bandwidth_a[j],
                                    rep.per_dim_bandwidth_b[j], args.grid);
    write_text_file(targets[j + 1].string(), density_grid_csv(dump));
  }
}

struct ReportArgs {
  std::string results_path, out_dir;
  bool force = false;
};

void run_report(const ReportArgs& args) {
  const auto lines = read_lines(args.results_path);
  if (lines.empty() || split_csv_line(lines[0]) !=
                           std::vector<std::string>{"mode", "seed", "env_id", "accuracy"}) {
    throw FormatError("expected header mode,seed,env_id,accuracy in " + args.results_path);
  }
  std::vector<std::string> mode_order;
  std::map<std::string, std::map<int, std::vector<double>>> cells;
  std::set<int> env_ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 4) {
      throw FormatError("row " + std::to_string(i + 1) + " has " + std::to_string(f.size()) +
                        " fields, expected 4");
    }
    if (f[2] == "avg") continue;  // summary rows are derived, not aggregated
    if (cells.find(f[0]) == cells.end()) mode_order.push_back(f[0]);
    const int env_id = static_cast<int>(parse_double(f[2]));
    env_ids.insert(env_id);
    cells[f[0]][env_id].push_back(parse_double(f[3]));
  }
  if (cells.empty()) throw FormatError("no result rows in " + args.results_path);
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
        throw FormatError("mode " + mode + " has no rows for environment " + std::to_string(e));
      }
      double sum = 0.0;
      for (double v : it->second) sum += v;
      const double cell = sum / static_cast<double>(it->second.size());
      out += "," + fmt_double(cell);
      row_sum += cell;
      ++row_n;
    }
    out += "," + fmt_double(row_sum / static_cast<double>(row_n)) + "\n";
  }
  fs::create_directories(args.out_dir);
  const fs::path table_path = fs::path(args.out_dir) / "table.csv";
  require_writable(table_path, args.force);
  write_text_file(table_path.string(), out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariance-penalized training with feature-space augmentation: datasets, "
               "training, ablations, complexity estimates, and overlap diagnostics"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Generate a dataset CSV from a spec file");
  gen->add_option("--spec", gen_args.spec_path, "dataset spec (JSON)")->required();
  gen->add_option("--out", gen_args.out_dir, "output directory")->required();
  std::uint64_t gen_seed = 0;
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "seed override");
  gen->add_flag("--force", gen_args.force, "overwrite existing outputs");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train one configuration and report accuracies");
  train->add_option("--config", train_args.config_path, "experiment config (JSON)")->required();
  train->add_option("--out", train_args.out_dir, "output directory")->required();
  std::uint64_t train_seed = 0;
  auto* train_seed_opt = train->add_option("--seed", train_seed, "seed override");
  train->add_flag("--force", train_args.force, "overwrite existing outputs");

  TrainArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "Sweep modes x seeds and tabulate accuracies");
  ablate->add_option("--config", ablate_args.config_path, "experiment config (JSON)")->required();
  ablate->add_option("--out", ablate_args.out_dir, "output directory")->required();
  std::uint64_t ablate_seed = 0;
  auto* ablate_seed_opt = ablate->add_option("--seed", ablate_seed, "seed override");
  ablate->add_flag("--force", ablate_args.force, "overwrite existing outputs");

  RademacherArgs rad_args;
  auto* rad = app.add_subcommand("rademacher",
                                 "Estimate linear-class complexity and its bounds");
  rad->add_option("--m", rad_args.m, "number of base rows");
  rad->add_option("--k", rad_args.k, "feature dimension");
  rad->add_option("--U", rad_args.U, "augmentation multiplicity");
  rad->add_option("--draws", rad_args.draws, "Monte Carlo sign draws");
  rad->add_option("--lambda", rad_args.lambda, "translation probability");
  std::uint64_t rad_seed = 0;
  auto* rad_seed_opt = rad->add_option("--seed", rad_seed, "seed override");
  rad->add_option("--out", rad_args.out_dir, "output directory")->required();
  rad->add_flag("--force", rad_args.force, "overwrite existing outputs");

  OverlapArgs ov_args;
  auto* ov = app.add_subcommand("overlap", "Kernel-density overlap between two feature sets");
  ov->add_option("--features-a", ov_args.features_a, "first feature CSV")->required();
  ov->add_option("--features-b", ov_args.features_b, "second feature CSV")->required();
  ov->add_option("--grid", ov_args.grid, "density grid points");
  ov->add_option("--bandwidth", ov_args.bandwidth, "fixed kernel bandwidth (default: rule-of-thumb)");
  ov->add_option("--out", ov_args.out_dir, "output directory")->required();
  ov->add_flag("--force", ov_args.force, "overwrite existing outputs");

  ReportArgs rep_args;
  auto* rep = app.add_subcommand("report", "Aggregate a results.csv into a mode x env table");
  rep->add_option("--results", rep_args.results_path, "results.csv to aggregate")->required();
  rep->add_option("--out", rep_args.out_dir, "output directory")->required();
  rep->add_flag("--force", rep_args.force, "overwrite existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << single_line(e.what()) << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) {
      if (gen_seed_opt->count() > 0) gen_args.seed = gen_seed;
      run_gen_data(gen_args);
    } else if (train->parsed()) {
      if (train_seed_opt->count() > 0) train_args.seed = train_seed;
      run_train(train_args);
    } else if (ablate->parsed()) {
      if (ablate_seed_opt->count() > 0) ablate_args.seed = ablate_seed;
      run_ablate_cmd(ablate_args);
    } else if (rad->parsed()) {
      if (rad_seed_opt->count() > 0) rad_args.seed = rad_seed;
      run_rademacher(rad_args);
    } else if (ov->parsed()) {
      run_overlap(ov_args);
    } else if (rep->parsed()) {
      run_report(rep_args);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << single_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
