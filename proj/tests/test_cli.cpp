#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "support/synthetic_digits.hpp"
#include "virm/config.hpp"
#include "virm/csv.hpp"

using namespace virm;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using Catch::Matchers::WithinAbs;

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Runs the binary through the shell with stdout/stderr captured. The parent
/// VIRM_SEED is scrubbed unless the caller sets one explicitly.
CliResult run_cli(const std::string& args, const std::string& env_prefix = "env -u VIRM_SEED") {
  static int counter = 0;
  const fs::path io = fs::temp_directory_path() / "virm_cli_io";
  fs::create_directories(io);
  const fs::path out = io / ("out_" + std::to_string(counter) + ".txt");
  const fs::path err = io / ("err_" + std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd = env_prefix + " " + std::string(VIRM_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "virm_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

int count_newlines(const std::string& s) {
  return static_cast<int>(std::count(s.begin(), s.end(), '\n'));
}

const std::string kTinySem2d =
    R"({"kind":"sem2d","n_per_env":40,"spurious_corr":[0.9,0.8,-0.9],"seed":11})";

std::string tiny_train_config(const std::string& extra = "") {
  return R"({"mode":"ERM","steps":4,"batch_size":8,"hidden_width":8,"hidden_layers":1,)"
         R"("feature_dim":4,"eval_every":2,"seed":5,"sda":{"U":2},)"
         R"("dataset":)" +
         kTinySem2d + extra + "}";
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing (in-process)
// ---------------------------------------------------------------------------

TEST_CASE("empty config object yields the documented defaults") {
  ExperimentConfig cfg = parse_experiment_config("{}");
  REQUIRE(cfg.train.sda.lambda == 0.8);
  REQUIRE(cfg.train.sda.U == 10);
  REQUIRE(cfg.train.sda.alpha == 0.5);
  REQUIRE(cfg.train.mode == AblationMode::A_plus_V);  // full method is the default
  REQUIRE(cfg.protocol == "holdout_last");
  REQUIRE(cfg.modes.size() == 5);
  REQUIRE_FALSE(cfg.save_checkpoint);

  const json echo = experiment_config_to_json(cfg);
  REQUIRE(echo.at("sda").at("lambda").get<double>() == 0.8);
  REQUIRE(echo.at("sda").at("U").get<std::size_t>() == 10);
  REQUIRE(echo.at("sda").at("alpha").get<double>() == 0.5);
}

TEST_CASE("config parser names the offending key") {
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"wat":1})"), ConfigError,
                         MessageMatches(ContainsSubstring("unknown key 'wat'")));
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"sda":{"bogus":1}})"), ConfigError,
                         MessageMatches(ContainsSubstring("sda.bogus")));
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"mode":"bogus"})"), ConfigError,
                         MessageMatches(ContainsSubstring("unknown mode 'bogus'")));
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"steps":"many"})"), ConfigError,
                         MessageMatches(ContainsSubstring("nonnegative integer")));
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"beta":"big"})"), ConfigError,
                         MessageMatches(ContainsSubstring("expected a number")));
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"sda":{"lambda":1.5}})"), ValueError,
                         MessageMatches(ContainsSubstring("lambda")));
  REQUIRE_THROWS_AS(parse_experiment_config(R"({"seeds":[]})"), ConfigError);
  REQUIRE_THROWS_AS(parse_experiment_config(R"({"protocol":"sideways"})"), ConfigError);
  REQUIRE_THROWS_MATCHES(parse_experiment_config(R"({"dataset":{"kind":"wat"}})"), ConfigError,
                         MessageMatches(ContainsSubstring("unknown dataset kind")));
  REQUIRE_THROWS_AS(parse_experiment_config("not json"), ConfigError);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

TEST_CASE("gen-data writes the dataset and refuses silent overwrites") {
  const fs::path dir = fresh_dir("gen_sem");
  const fs::path spec = dir / "spec.json";
  write_file(spec, kTinySem2d);
  const fs::path out = dir / "out";

  CliResult first = run_cli("gen-data --spec " + spec.string() + " --out " + out.string());
  REQUIRE(first.exit_code == 0);
  REQUIRE(first.err.empty());

  const auto lines = read_lines((out / "dataset.csv").string());
  REQUIRE(lines.at(0) == "env,label,f0,f1");
  REQUIRE(lines.size() == 1 + 3 * 40);

  const json echo = json::parse(slurp(out / "spec_echo.json"));
  REQUIRE(echo.at("kind") == "sem2d");
  REQUIRE(echo.at("seed").get<std::uint64_t>() == 11);

  CliResult refuse = run_cli("gen-data --spec " + spec.string() + " --out " + out.string());
  REQUIRE(refuse.exit_code != 0);
  REQUIRE_THAT(refuse.err, ContainsSubstring("error: "));
  REQUIRE_THAT(refuse.err, ContainsSubstring("output file exists"));
  REQUIRE_THAT(refuse.err, ContainsSubstring("use --force to overwrite"));
  REQUIRE(count_newlines(refuse.err) == 1);  // single-line machine-readable error

  const std::string before = slurp(out / "dataset.csv");
  CliResult forced =
      run_cli("gen-data --spec " + spec.string() + " --out " + out.string() + " --force");
  REQUIRE(forced.exit_code == 0);
  REQUIRE(slurp(out / "dataset.csv") == before);  // byte-identical rerun
}

TEST_CASE("seed precedence: flag beats config beats environment variable") {
  const fs::path dir = fresh_dir("gen_seed");
  const fs::path unseeded = dir / "spec.json";
  write_file(unseeded, R"({"kind":"sem2d","n_per_env":30,"spurious_corr":[0.9,0.8]})");

  auto gen = [&](const std::string& name, const std::string& args, const std::string& env) {
    const fs::path out = dir / name;
    CliResult r = run_cli("gen-data --spec " + unseeded.string() + " --out " + out.string() +
                              " " + args,
                          env);
    REQUIRE(r.exit_code == 0);
    return slurp(out / "dataset.csv");
  };

  const std::string via_env = gen("a", "", "env VIRM_SEED=7");
  const std::string via_flag = gen("b", "--seed 7", "env -u VIRM_SEED");
  const std::string flag_wins = gen("c", "--seed 9", "env VIRM_SEED=7");
  const std::string plain_nine = gen("d", "--seed 9", "env -u VIRM_SEED");
  REQUIRE(via_env == via_flag);
  REQUIRE(flag_wins == plain_nine);
  REQUIRE(via_env != flag_wins);

  // A seed pinned inside the spec wins over the environment variable.
  const fs::path seeded = dir / "seeded.json";
  write_file(seeded, R"({"kind":"sem2d","n_per_env":30,"spurious_corr":[0.9,0.8],"seed":5})");
  const fs::path out_cfg = dir / "e";
  CliResult r = run_cli("gen-data --spec " + seeded.string() + " --out " + out_cfg.string(),
                        "env VIRM_SEED=7");
  REQUIRE(r.exit_code == 0);
  const json echo = json::parse(slurp(out_cfg / "spec_echo.json"));
  REQUIRE(echo.at("seed").get<std::uint64_t>() == 5);

  CliResult bad = run_cli("gen-data --spec " + unseeded.string() + " --out " +
                              (dir / "f").string(),
                          "env VIRM_SEED=abc");
  REQUIRE(bad.exit_code != 0);
  REQUIRE_THAT(bad.err, ContainsSubstring("VIRM_SEED is not a nonnegative integer"));
}

TEST_CASE("gen-data builds the color-corrupted digit benchmark from IDX files") {
  const fs::path dir = fresh_dir("gen_colored");
  testsupport::write_synthetic_idx((dir / "images.idx").string(), (dir / "labels.idx").string(),
                                   50, 2);
  const fs::path spec = dir / "spec.json";
  write_file(spec, R"({"kind":"colored_mnist","images":")" + (dir / "images.idx").string() +
                       R"(","labels":")" + (dir / "labels.idx").string() +
                       R"(","subset":30,"seed":1})");
  const fs::path out = dir / "out";
  CliResult r = run_cli("gen-data --spec " + spec.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  const auto lines = read_lines((out / "dataset.csv").string());
  const auto header = split_csv_line(lines.at(0));
  REQUIRE(header.size() == 2 + 2 * 14 * 14);  // two color channels, downsampled
  REQUIRE(header[0] == "env");
  REQUIRE(header[1] == "label");
  REQUIRE(lines.size() == 1 + 30);
  std::set<std::string> env_values;
  for (std::size_t i = 1; i < lines.size(); ++i) env_values.insert(split_csv_line(lines[i])[0]);
  REQUIRE(env_values == std::set<std::string>{"0", "1", "2"});
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TEST_CASE("train emits exactly the report files with a round-trippable results table") {
  const fs::path dir = fresh_dir("train_tiny");
  const fs::path cfg = dir / "config.json";
  write_file(cfg, tiny_train_config());
  const fs::path out = dir / "out";
  CliResult r = run_cli("train --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  std::set<std::string> files;
  for (const auto& e : fs::directory_iterator(out)) files.insert(e.path().filename().string());
  REQUIRE(files == std::set<std::string>{"results.csv", "config_echo.json", "trace_5.csv"});

  const auto lines = read_lines((out / "results.csv").string());
  REQUIRE(lines.at(0) == "mode,seed,env_id,accuracy");
  // Held-out protocol: one row for the held-out environment plus the summary.
  REQUIRE(lines.size() == 3);
  const auto row = split_csv_line(lines.at(1));
  REQUIRE(row[0] == "ERM");
  REQUIRE(row[1] == "5");
  REQUIRE(row[2] == "2");
  REQUIRE(fmt_double(parse_double(row[3])) == row[3]);  // full-precision round trip
  const auto summary = split_csv_line(lines.at(2));
  REQUIRE(summary[1] == "all");
  REQUIRE(summary[2] == "avg");
  REQUIRE(parse_double(summary[3]) == parse_double(row[3]));

  const auto trace = read_lines((out / "trace_5.csv").string());
  REQUIRE(trace.at(0) == "step,loss");
  REQUIRE(trace.size() == 4);  // steps 0, 2, and the final step 3
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const auto f = split_csv_line(trace[i]);
    REQUIRE(fmt_double(parse_double(f[1])) == f[1]);
  }
}

TEST_CASE("zero-step train still echoes the fully-defaulted config") {
  const fs::path dir = fresh_dir("train_zero");
  const fs::path cfg = dir / "config.json";
  write_file(cfg,
             R"({"steps":0,"hidden_width":8,"hidden_layers":1,"feature_dim":4,"seed":5,)"
             R"("dataset":)" +
                 kTinySem2d + "}");
  const fs::path out = dir / "out";
  CliResult r = run_cli("train --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  const json echo = json::parse(slurp(out / "config_echo.json"));
  REQUIRE(echo.at("steps").get<std::size_t>() == 0);
  REQUIRE(echo.at("sda").at("lambda").get<double>() == 0.8);
  REQUIRE(echo.at("sda").at("U").get<std::size_t>() == 10);
  REQUIRE(echo.at("sda").at("alpha").get<double>() == 0.5);
  REQUIRE(read_lines((out / "trace_5.csv").string()).size() == 1);  // header only
}

TEST_CASE("train reruns are byte-identical and can save a loadable checkpoint") {
  const fs::path dir = fresh_dir("train_ckpt");
  const fs::path cfg = dir / "config.json";
  write_file(cfg, tiny_train_config(R"(,"save_checkpoint":true)"));
  const fs::path out = dir / "out";
  CliResult r = run_cli("train --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  const std::string results = slurp(out / "results.csv");
  const std::string ckpt = slurp(out / "checkpoint_5.json");
  const json parsed = json::parse(ckpt);
  REQUIRE(parsed.at("format") == "virm-checkpoint");
  REQUIRE(parsed.at("step").get<std::size_t>() == 4);

  CliResult again =
      run_cli("train --config " + cfg.string() + " --out " + out.string() + " --force");
  REQUIRE(again.exit_code == 0);
  REQUIRE(slurp(out / "results.csv") == results);
  REQUIRE(slurp(out / "checkpoint_5.json") == ckpt);
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

TEST_CASE("ablate tabulates five modes across held-out folds") {
  const fs::path dir = fresh_dir("ablate_tiny");
  const fs::path cfg = dir / "config.json";
  write_file(cfg,
             R"({"steps":2,"batch_size":8,"hidden_width":8,"hidden_layers":1,"feature_dim":4,)"
             R"("eval_every":1,"seed":0,"sda":{"U":2},"protocol":"leave_one_out",)"
             R"("dataset":)" +
                 kTinySem2d + "}");
  const fs::path out = dir / "out";
  CliResult r = run_cli("ablate --config " + cfg.string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  const auto lines = read_lines((out / "table.csv").string());
  REQUIRE(lines.at(0) == "mode,env0,env1,env2,Avg");
  REQUIRE(lines.size() == 1 + 5);
  const std::vector<std::string> expected_modes = {"ERM", "A", "V", "VA", "A_plus_V"};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto f = split_csv_line(lines.at(i + 1));
    REQUIRE(f.size() == 5);
    REQUIRE(f[0] == expected_modes[i]);
    const double avg = parse_double(f[4]);
    const double mean = (parse_double(f[1]) + parse_double(f[2]) + parse_double(f[3])) / 3.0;
    REQUIRE_THAT(avg, WithinAbs(mean, 1e-9));
  }

  // Fold traces are mode-qualified; fold seeds are base seed plus fold index.
  REQUIRE(fs::exists(out / "trace_ERM_0.csv"));
  REQUIRE(fs::exists(out / "trace_ERM_2.csv"));
  REQUIRE(fs::exists(out / "trace_A_plus_V_1.csv"));

  const std::string table = slurp(out / "table.csv");
  CliResult again =
      run_cli("ablate --config " + cfg.string() + " --out " + out.string() + " --force");
  REQUIRE(again.exit_code == 0);
  REQUIRE(slurp(out / "table.csv") == table);
}

// ---------------------------------------------------------------------------
// rademacher
// ---------------------------------------------------------------------------

TEST_CASE("rademacher command reports estimates against both bounds") {
  const fs::path dir = fresh_dir("rad");
  const fs::path out = dir / "out";
  CliResult r = run_cli("rademacher --m 10 --k 4 --U 5 --draws 200 --seed 3 --out " +
                        out.string());
  REQUIRE(r.exit_code == 0);

  const auto lines = read_lines((out / "rademacher.csv").string());
  REQUIRE(lines.at(0) == "quantity,m,n,k,draws,estimate,stderr,lemma2_bound,theorem1_bound");
  REQUIRE(lines.size() == 4);
  const auto mc = split_csv_line(lines.at(1));
  const auto exact = split_csv_line(lines.at(2));
  const auto aug = split_csv_line(lines.at(3));
  REQUIRE(mc[0] == "original_mc");
  REQUIRE(exact[0] == "original_exact");
  REQUIRE(aug[0] == "augmented_mc");
  REQUIRE(mc[1] == "10");
  REQUIRE(mc[2] == "10");
  REQUIRE(aug[2] == "50");  // U*m augmented rows
  REQUIRE(exact[4] == "1024");
  REQUIRE(parse_double(exact[5]) <= parse_double(exact[7]));  // enumeration under the bound
  REQUIRE(std::fabs(parse_double(mc[5]) - parse_double(exact[5])) <=
          3.0 * parse_double(mc[6]) + 1e-12);

  const std::string bytes = slurp(out / "rademacher.csv");
  CliResult again = run_cli("rademacher --m 10 --k 4 --U 5 --draws 200 --seed 3 --force --out " +
                            out.string());
  REQUIRE(again.exit_code == 0);
  REQUIRE(slurp(out / "rademacher.csv") == bytes);
}

// ---------------------------------------------------------------------------
// overlap
// ---------------------------------------------------------------------------

TEST_CASE("overlap command emits coefficients and plot-ready densities") {
  const fs::path dir = fresh_dir("overlap");
  Rng rng(44);
  std::string a_csv, b_csv;
  for (int i = 0; i < 120; ++i) {
    a_csv += fmt_double(rng.normal()) + "," + fmt_double(rng.normal()) + "\n";
    b_csv += fmt_double(rng.normal()) + "," + fmt_double(rng.normal()) + "\n";
  }
  write_file(dir / "a.csv", a_csv);
  write_file(dir / "b.csv", b_csv);
  const fs::path out = dir / "out";
  CliResult r = run_cli("overlap --features-a " + (dir / "a.csv").string() + " --features-b " +
                        (dir / "a.csv").string() + " --out " + out.string());
  REQUIRE(r.exit_code == 0);

  const auto lines = read_lines((out / "overlap.csv").string());
  REQUIRE(lines.at(0) == "dim,overlap");
  REQUIRE(lines.size() == 4);  // two dimensions plus the projected row
  for (std::size_t i = 1; i <= 2; ++i) {
    const auto f = split_csv_line(lines.at(i));
    REQUIRE(f[0] == std::to_string(i - 1));
    REQUIRE_THAT(parse_double(f[1]), WithinAbs(1.0, 0.01));  // a sample overlaps itself
  }
  const auto proj = split_csv_line(lines.at(3));
  REQUIRE(proj[0] == "pca2d");
  REQUIRE_THAT(parse_double(proj[1]), WithinAbs(1.0, 0.01));

  for (const auto& name : {"density_dim0.csv", "density_dim1.csv"}) {
    const auto dens = read_lines((out / name).string());
    REQUIRE(dens.at(0) == "x,density_A,density_B");
    REQUIRE(dens.size() == 1 + 200);  // default grid
  }

  CliResult distinct = run_cli("overlap --features-a " + (dir / "a.csv").string() +
                               " --features-b " + (dir / "b.csv").string() + " --out " +
                               (dir / "out2").string());
  REQUIRE(distinct.exit_code == 0);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

TEST_CASE("report aggregates result rows and skips derived summary rows") {
  const fs::path dir = fresh_dir("report");
  write_file(dir / "results.csv",
             "mode,seed,env_id,accuracy\n"
             "ERM,0,0,0.5\n"
             "ERM,0,1,0.7\n"
             "ERM,1,0,0.9\n"
             "ERM,1,1,0.3\n"
             "V,0,0,1\n"
             "V,0,1,0\n"
             "V,all,avg,0.125\n");
  const fs::path out = dir / "out";
  CliResult r = run_cli("report --results " + (dir / "results.csv").string() + " --out " +
                        out.string());
  REQUIRE(r.exit_code == 0);

  const auto lines = read_lines((out / "table.csv").string());
  REQUIRE(lines.at(0) == "mode,env0,env1,Avg");
  REQUIRE(lines.size() == 3);
  const auto erm = split_csv_line(lines.at(1));
  REQUIRE(erm[0] == "ERM");
  REQUIRE_THAT(parse_double(erm[1]), WithinAbs(0.7, 1e-12));
  REQUIRE_THAT(parse_double(erm[2]), WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(parse_double(erm[3]), WithinAbs(0.6, 1e-12));
  const auto v = split_csv_line(lines.at(2));
  REQUIRE(v[0] == "V");
  REQUIRE_THAT(parse_double(v[3]), WithinAbs(0.5, 1e-12));  // summary row not aggregated

  write_file(dir / "bad.csv", "mode,seed,env_id,accuracy\nERM,0,0\n");
  CliResult bad = run_cli("report --results " + (dir / "bad.csv").string() + " --out " +
                          (dir / "out_bad").string());
  REQUIRE(bad.exit_code != 0);
  REQUIRE_THAT(bad.err, ContainsSubstring("error: "));
}

// ---------------------------------------------------------------------------
// Error surfaces
// ---------------------------------------------------------------------------

TEST_CASE("failures exit nonzero with one error line on stderr") {
  CliResult unknown = run_cli("frobnicate --out /tmp/x");
  REQUIRE(unknown.exit_code != 0);
  REQUIRE_THAT(unknown.err, ContainsSubstring("error: "));
  REQUIRE(count_newlines(unknown.err) == 1);

  const fs::path dir = fresh_dir("errors");
  CliResult missing = run_cli("train --config " + (dir / "nope.json").string() + " --out " +
                              (dir / "out").string());
  REQUIRE(missing.exit_code != 0);
  REQUIRE_THAT(missing.err, ContainsSubstring("error: "));
  REQUIRE(count_newlines(missing.err) == 1);

  write_file(dir / "bad.json", R"({"mode":"bogus"})");
  CliResult bad = run_cli("train --config " + (dir / "bad.json").string() + " --out " +
                          (dir / "out").string());
  REQUIRE(bad.exit_code != 0);
  REQUIRE_THAT(bad.err, ContainsSubstring("unknown mode 'bogus'"));
}
