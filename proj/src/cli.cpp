#include "dtr/cli.hpp"

#include "dtr/dtr.hpp"
#include "dtr/error.hpp"
#include "dtr/evaluation.hpp"
#include "dtr/simulation.hpp"

#include "CLI11.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace dtr::cli {

namespace fs = std::filesystem;

namespace {

/// Bad flags or config content; maps to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open config '{}'", path.string()));
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  f << text;
  if (!f) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));
}

void write_manifest(const fs::path& dir, const std::string& command, nlohmann::json body) {
  body["command"] = command;
  body["version"] = kVersion;
  write_text(dir / "manifest.json", body.dump(1) + "\n");
}

/// Options every subcommand accepts.
struct Common {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
  std::string config;
  std::optional<double> clip_lo, clip_hi;
  std::string log_level;
  /// Used when --log-level is absent. Replicated experiments default to errors only, since the
  /// linear baselines warn about rank-deficient designs in nearly every fit.
  std::string default_level = "warn";

  void attach(CLI::App* app, bool needs_out) {
    app->add_option("--seed", seed, "Master seed; all randomness derives from it");
    app->add_option("--threads", threads, "Worker thread cap (default: all cores)")->check(CLI::NonNegativeNumber);
    auto* o = app->add_option("--out", out, "Output directory");
    if (needs_out) o->required();
    app->add_option("--config", config, "JSON config file; flags override its values");
    app->add_option("--clip-lo", clip_lo, "Lower propensity clip bound");
    app->add_option("--clip-hi", clip_hi, "Upper propensity clip bound");
    app->add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  }

  void apply_runtime() const {
    set_thread_cap(threads);
    logger().set_level(spdlog::level::from_str(log_level.empty() ? default_level : log_level));
  }

  void apply_clip(PropensityOptions& p) const {
    if (clip_lo) p.clip_lo = *clip_lo;
    if (clip_hi) p.clip_hi = *clip_hi;
  }
};

Schema schema_from_file(const fs::path& path) {
  const auto j = read_json_file(path);
  try {
    return Schema::from_json(j.contains("schema") ? j.at("schema") : j);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(fmt::format("'{}' does not hold a schema: {}", path.string(), e.what()));
  }
}

void print_report(std::ostream& out, const EvaluationReport& r) {
  out << fmt::format("{:<8} {:>8} {:<5} {:>18} {:>18} {:>5}\n", "method", "scenario", "split", "regret mean (sd)",
                     "accuracy % (sd)", "runs");
  for (const auto& c : r.cells)
    out << fmt::format("{:<8} {:>8} {:<5} {:>18} {:>18} {:>5}\n", c.method, c.scenario, c.split,
                       fmt::format("{:.3f} ({:.3f})", c.regret_mean, c.regret_sd),
                       fmt::format("{:.1f} ({:.1f})", 100 * c.accuracy_mean, 100 * c.accuracy_sd), c.runs);
}

// ---------------------------------------------------------------------------------------------

struct SimulateCmd {
  Common common;
  int scenario = 1;
  std::optional<std::size_t> n;
  std::optional<int> horizon;

  void attach(CLI::App* app) {
    common.attach(app, true);
    app->add_option("--scenario", scenario, "Data-generating scenario")->check(CLI::IsMember({1, 2}));
    app->add_option("--n", n, "Number of patients")->check(CLI::PositiveNumber);
    app->add_option("--horizon", horizon, "Number of decision steps")->check(CLI::PositiveNumber);
  }

  int run(std::ostream& out) {
    common.apply_runtime();
    DgpConfig c;
    if (!common.config.empty()) {
      try {
        c = DgpConfig::from_json(read_json_file(common.config));
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(fmt::format("bad simulation config: {}", e.what()));
      }
    }
    c.scenario = scenario;
    if (n) c.n_patients = *n;
    if (horizon) c.horizon = *horizon;
    if (common.seed) c.seed = *common.seed;
    try {
      c.validate();
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
    const auto sim = generate_scenario(c);
    const fs::path dir(common.out);
    make_dir(dir);
    write_csv(dir / "data.csv", sim.dataset);
    write_oracle_csv(dir / "oracle.csv", sim.oracle);
    write_manifest(dir, "simulate",
                   {{"config", c.to_json()},
                    {"seed", c.seed},
                    {"schema", sim.dataset.schema().to_json()},
                    {"files", {{"data", "data.csv"}, {"oracle", "oracle.csv"}}}});
    out << fmt::format("wrote {} patients x {} steps to {}\n", sim.dataset.size(), c.horizon, dir.string());
    return ok;
  }
};

/// Hyperparameters for fit: the method keys of an experiment config plus "method".
DtrParams fit_params(const Common& common, const std::string& method_flag, int trees, int min_leaf, std::string& method) {
  ExperimentConfig base;
  nlohmann::json j = nlohmann::json::object();
  if (!common.config.empty()) j = read_json_file(common.config);
  if (!j.is_object()) throw UsageError("fit config must be a JSON object");
  if (j.contains("method")) {
    method = j.at("method").get<std::string>();
    j.erase("method");
  }
  if (!method_flag.empty()) method = method_flag;
  try {
    base = ExperimentConfig::from_json(j);
    if (trees > 0) base.forest.n_trees = trees;
    if (min_leaf > 0) {
      base.tree.min_treated_per_leaf = base.tree.min_control_per_leaf = min_leaf;
      base.forest.tree.min_treated_per_leaf = base.forest.tree.min_control_per_leaf = min_leaf;
    }
    common.apply_clip(base.propensity);
    base.tree.validate();
    base.forest.validate();
    base.propensity.validate();
    auto p = base.dtr_params(method);
    p.seed = common.seed.value_or(base.seed);
    if (p.kind == EstimatorKind::oracle) throw UsageError("the oracle method needs simulator truth; use benchmark");
    return p;
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(fmt::format("bad fit config: {}", e.what()));
  }
}

void write_decisions(const fs::path& path, const DecisionMatrix& d) {
  std::ostringstream s;
  const auto T = d.decisions.cols();
  s << "id";
  for (Eigen::Index t = 1; t <= T; ++t) s << ",d" << t;
  for (Eigen::Index t = 1; t <= T; ++t) s << ",tau" << t;
  s << '\n';
  for (Eigen::Index i = 0; i < d.decisions.rows(); ++i) {
    s << d.patient_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index t = 0; t < T; ++t) s << ',' << d.decisions(i, t);
    for (Eigen::Index t = 0; t < T; ++t) s << ',' << format_real(d.tau_hat(i, t));
    s << '\n';
  }
  write_text(path, s.str());
}

struct FitCmd {
  Common common;
  std::string data, schema, method;
  int trees = 0, min_leaf = 0;

  void attach(CLI::App* app) {
    common.attach(app, true);
    app->add_option("--data", data, "Wide-format dataset CSV")->required()->check(CLI::ExistingFile);
    app->add_option("--schema", schema, "Schema JSON (or a simulate manifest holding one)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--method", method, "dtr-ct, dtr-cf, qlearn, dwols, gest, cart or knn");
    app->add_option("--trees", trees, "Forest size override")->check(CLI::PositiveNumber);
    app->add_option("--min-leaf", min_leaf, "Per-arm leaf minimum override")->check(CLI::PositiveNumber);
  }

  int run(std::ostream& out) {
    common.apply_runtime();
    std::string m = "dtr-ct";
    const auto p = fit_params(common, method, trees, min_leaf, m);
    const auto ds = load_csv(data, schema_from_file(schema));
    const auto est = estimate_dtr(ds, p);
    const fs::path dir(common.out);
    save_bundle(est, dir, {{"command", "fit"}, {"data", data}, {"seed", p.seed}});
    write_decisions(dir / "fit_decisions.csv", est.fit_decisions());
    out << fmt::format("fitted {} on {} patients x {} steps; bundle in {}\n", m, ds.size(), ds.horizon(), dir.string());
    for (const auto& d : est.diagnostics())
      out << fmt::format("  step {}: treat {:.1f}%, tau mean {:.3f} (sd {:.3f}), clipped {:.1f}%\n", d.step,
                         100 * d.treat_fraction, d.tau_mean, d.tau_sd, 100 * d.clipped_fraction);
    return ok;
  }
};

struct ApplyCmd {
  Common common;
  std::string bundle, data, schema;

  void attach(CLI::App* app) {
    common.attach(app, true);
    app->add_option("--bundle", bundle, "Model bundle directory written by fit")->required()->check(CLI::ExistingDirectory);
    app->add_option("--data", data, "Wide-format dataset CSV")->required()->check(CLI::ExistingFile);
    app->add_option("--schema", schema, "Schema JSON for the dataset (default: the bundle's schema)")
        ->check(CLI::ExistingFile);
  }

  int run(std::ostream& out) {
    common.apply_runtime();
    const auto est = load_bundle(bundle);
    Schema s = schema.empty() ? est.encoder().schema() : schema_from_file(schema);
    // Levels are rediscovered from the file; the encoder maps them back by name and encodes
    // levels it never saw as all-zero.
    for (auto* block : {&s.baseline, &s.covariates})
      for (auto& c : *block) c.levels.clear();
    const auto ds = load_csv(data, s);
    const auto dm = apply_policy(est, ds);
    const auto reward = expected_reward(dm.decisions, observed_treatments(ds), dm.tau_hat);

    const fs::path dir(common.out);
    make_dir(dir);
    write_decisions(dir / "decisions.csv", dm);
    std::ostringstream r;
    r << "treatment";
    for (int t = 1; t <= est.horizon(); ++t) r << ",t" << t;
    r << "\na";
    for (double v : reward.cumulative_mean) r << ',' << format_real(v);
    r << '\n';
    write_text(dir / "expected_reward.csv", r.str());
    write_manifest(dir, "apply",
                   {{"bundle", bundle},
                    {"data", data},
                    {"method", method_name(est.kind())},
                    {"patients", ds.size()},
                    {"undefined_effects", dm.undefined_effects},
                    {"mean_expected_reward", reward.mean}});
    out << fmt::format("decisions for {} patients written to {}\n", ds.size(), dir.string());
    out << "cumulative expected reward (mean over patients):";
    for (std::size_t t = 0; t < reward.cumulative_mean.size(); ++t)
      out << fmt::format(" t{}={:.4f}", t + 1, reward.cumulative_mean[t]);
    out << '\n';
    if (dm.undefined_effects) out << fmt::format("{} undefined forest effects decided as no treatment\n", dm.undefined_effects);
    return ok;
  }
};

/// Shared by benchmark and sensitivity.
struct ExperimentFlags {
  Common common;
  std::optional<int> runs;
  std::optional<std::size_t> n;
  std::optional<int> horizon;
  std::optional<int> trees;
  std::vector<std::string> methods;
  std::vector<int> scenarios;

  void attach(CLI::App* app) {
    common.default_level = "error";
    common.attach(app, true);
    app->add_option("--runs", runs, "Replications per scenario")->check(CLI::PositiveNumber);
    app->add_option("--n", n, "Patients per replication")->check(CLI::PositiveNumber);
    app->add_option("--horizon", horizon, "Decision steps")->check(CLI::PositiveNumber);
    app->add_option("--trees", trees, "Causal forest size")->check(CLI::PositiveNumber);
    app->add_option("--methods", methods, "Methods to evaluate")->delimiter(',');
    app->add_option("--scenarios", scenarios, "Scenarios to run")->delimiter(',')->check(CLI::IsMember({1, 2}));
  }

  ExperimentConfig load(std::vector<std::string> default_methods = {}) const {
    ExperimentConfig c;
    try {
      if (!common.config.empty()) c = ExperimentConfig::from_json(read_json_file(common.config));
      else if (!default_methods.empty()) c.methods = default_methods;
      if (common.seed) c.seed = *common.seed;
      if (runs) c.runs = *runs;
      if (n) c.n_patients = *n;
      if (horizon) c.horizon = *horizon;
      if (trees) c.forest.n_trees = *trees;
      if (!methods.empty()) c.methods = methods;
      if (!scenarios.empty()) c.scenarios = scenarios;
      common.apply_clip(c.propensity);
      c.validate();
    } catch (const UsageError&) {
      throw;
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

struct BenchmarkCmd {
  ExperimentFlags flags;
  bool progress = false;

  void attach(CLI::App* app) {
    flags.attach(app);
    app->add_flag("--progress", progress, "Report finished runs on stderr");
  }

  int run(std::ostream& out, std::ostream& err) {
    flags.common.apply_runtime();
    const auto config = flags.load();
    const fs::path dir(flags.common.out);
    make_dir(dir);
    write_manifest(dir, "benchmark",
                   {{"config", config.to_json()}, {"fingerprint", config.fingerprint()}, {"seed", config.seed}});
    ProgressFn hook;
    if (progress) hook = [&err](int s, int r) { err << fmt::format("scenario {} run {} done\n", s, r) << std::flush; };
    try {
      const auto report = run_experiment(config, Execution::parallel, hook);
      report.write(dir);
      print_report(out, report);
      return ok;
    } catch (const ExperimentAborted& e) {
      e.report().write(dir);
      err << "error: " << e.what() << '\n';
      for (const auto& r : e.report().records)
        if (r.failed) err << fmt::format("  scenario {} run {} {}: {}\n", r.scenario, r.run, r.method, r.error);
      return runtime_failure;
    }
  }
};

struct SensitivityCmd {
  ExperimentFlags flags;
  std::vector<int> min_leaf{10, 20, 30, 40, 50, 60, 70};
  bool progress = false;

  void attach(CLI::App* app) {
    flags.attach(app);
    app->add_option("--min-leaf", min_leaf, "Per-arm leaf minima to sweep")->delimiter(',');
    app->add_flag("--progress", progress, "Report finished runs on stderr");
  }

  int run(std::ostream& out, std::ostream& err) {
    flags.common.apply_runtime();
    auto config = flags.load({"dtr-ct", "dtr-cf"});
    if (flags.methods.empty()) config.methods = {"dtr-ct", "dtr-cf"};
    for (int v : min_leaf)
      if (v < 1) throw UsageError(fmt::format("min-leaf value {} must be at least 1", v));
    const fs::path dir(flags.common.out);
    make_dir(dir);
    write_manifest(dir, "sensitivity",
                   {{"config", config.to_json()},
                    {"fingerprint", config.fingerprint()},
                    {"seed", config.seed},
                    {"min_leaf", min_leaf}});
    ProgressFn hook;
    if (progress) hook = [&err](int s, int r) { err << fmt::format("scenario {} run {} done\n", s, r) << std::flush; };
    try {
      const auto rep = run_sensitivity(config, min_leaf, Execution::parallel, hook);
      rep.write(dir);
      out << fmt::format("{:<8} {:>8} {:>8} {:>18} {:>18}\n", "method", "scenario", "min_leaf", "test regret (sd)",
                         "test accuracy %");
      for (const auto& r : rep.rows)
        if (r.split == "test")
          out << fmt::format("{:<8} {:>8} {:>8} {:>18} {:>18}\n", r.method, r.scenario, r.min_leaf,
                             fmt::format("{:.3f} ({:.3f})", r.regret_mean, r.regret_sd),
                             fmt::format("{:.1f} ({:.1f})", 100 * r.accuracy_mean, 100 * r.accuracy_sd));
      return ok;
    } catch (const ExperimentAborted& e) {
      e.report().write(dir);
      err << "error: " << e.what() << '\n';
      return runtime_failure;
    }
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic treatment regimes from longitudinal data via sequential HTE estimation", "dtr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SimulateCmd simulate;
  FitCmd fit;
  ApplyCmd apply;
  BenchmarkCmd benchmark;
  SensitivityCmd sensitivity;
  auto* c_sim = app.add_subcommand("simulate", "Draw a synthetic cohort with its oracle");
  simulate.attach(c_sim);
  auto* c_fit = app.add_subcommand("fit", "Estimate a regime from a dataset CSV and save the bundle");
  fit.attach(c_fit);
  auto* c_apply = app.add_subcommand("apply", "Apply a saved regime to a dataset CSV");
  apply.attach(c_apply);
  auto* c_bench = app.add_subcommand("benchmark", "Replicated regret/accuracy experiment");
  benchmark.attach(c_bench);
  auto* c_sens = app.add_subcommand("sensitivity", "Sweep the per-arm leaf minimum for the tree methods");
  sensitivity.attach(c_sens);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::CallForVersion& e) {
    out << kVersion << '\n';
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    err << "run 'dtr --help' for usage\n";
    return usage_error;
  }

  try {
    if (c_sim->parsed()) return simulate.run(out);
    if (c_fit->parsed()) return fit.run(out);
    if (c_apply->parsed()) return apply.run(out);
    if (c_bench->parsed()) return benchmark.run(out, err);
    if (c_sens->parsed()) return sensitivity.run(out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return usage_error;
  } catch (const SchemaError& e) {
    err << "error: schema mismatch at column '" << e.column() << "': " << e.what() << '\n';
    return runtime_failure;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return runtime_failure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return runtime_failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return runtime_failure;
  }
  return usage_error;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace dtr::cli
