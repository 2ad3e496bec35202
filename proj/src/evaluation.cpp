#include "dtr/evaluation.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>

namespace dtr {

namespace {

void check_shape(const IntMatrix& d, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (d.rows() != rows || d.cols() != cols)
    throw DomainError(fmt::format("{}: decisions are {}x{} but the reference is {}x{}", what, d.rows(), d.cols(), rows,
                                  cols));
}

}  // namespace

RegretResult cumulative_regret(const IntMatrix& decisions, const OracleBundle& oracle) {
  check_shape(decisions, oracle.true_tau.rows(), oracle.true_tau.cols(), "cumulative_regret");
  RegretResult r;
  r.per_patient.assign(static_cast<std::size_t>(decisions.rows()), 0.0);
  for (Eigen::Index i = 0; i < decisions.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index t = 0; t < decisions.cols(); ++t) {
      const double term = (oracle.optimal_decisions(i, t) - decisions(i, t)) * oracle.true_tau(i, t);
      if (term < 0.0)
        throw ContractError(fmt::format("negative regret term {} for patient {} at step {}", term, i, t + 1));
      s += term;
    }
    r.per_patient[static_cast<std::size_t>(i)] = s;
  }
  if (!r.per_patient.empty())
    r.mean = std::accumulate(r.per_patient.begin(), r.per_patient.end(), 0.0) / static_cast<double>(r.per_patient.size());
  return r;
}

AccuracyResult decision_accuracy(const IntMatrix& decisions, const OracleBundle& oracle) {
  check_shape(decisions, oracle.optimal_decisions.rows(), oracle.optimal_decisions.cols(), "decision_accuracy");
  AccuracyResult r;
  const auto n = decisions.rows();
  r.per_step.assign(static_cast<std::size_t>(decisions.cols()), 0.0);
  if (n == 0) return r;
  std::size_t hits = 0;
  for (Eigen::Index t = 0; t < decisions.cols(); ++t) {
    std::size_t h = 0;
    for (Eigen::Index i = 0; i < n; ++i) h += decisions(i, t) == oracle.optimal_decisions(i, t);
    r.per_step[static_cast<std::size_t>(t)] = static_cast<double>(h) / static_cast<double>(n);
    hits += h;
  }
  r.overall = static_cast<double>(hits) / static_cast<double>(n * decisions.cols());
  return r;
}

RewardResult expected_reward(const IntMatrix& decisions, const IntMatrix& observed, const Matrix& tau_hat) {
  check_shape(decisions, tau_hat.rows(), tau_hat.cols(), "expected_reward");
  check_shape(observed, tau_hat.rows(), tau_hat.cols(), "expected_reward (observed treatments)");
  RewardResult r;
  const auto n = decisions.rows();
  const auto T = decisions.cols();
  r.per_patient.assign(static_cast<std::size_t>(n), 0.0);
  r.cumulative_mean.assign(static_cast<std::size_t>(T), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      const double term = (decisions(i, t) - observed(i, t)) * tau_hat(i, t);
      if (term < 0.0 && decisions(i, t) == (tau_hat(i, t) > 0.0 ? 1 : 0))
        throw ContractError(fmt::format("negative expected reward {} for patient {} at step {}", term, i, t + 1));
      s += term;
      r.cumulative_mean[static_cast<std::size_t>(t)] += s;
    }
    r.per_patient[static_cast<std::size_t>(i)] = s;
  }
  if (n > 0) {
    for (double& v : r.cumulative_mean) v /= static_cast<double>(n);
    r.mean = std::accumulate(r.per_patient.begin(), r.per_patient.end(), 0.0) / static_cast<double>(n);
  }
  return r;
}

IntMatrix observed_treatments(const LongitudinalDataset& ds) {
  IntMatrix a(static_cast<Eigen::Index>(ds.size()), ds.horizon());
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (int t = 0; t < ds.horizon(); ++t) a(static_cast<Eigen::Index>(i), t) = ds[i].treatments[static_cast<std::size_t>(t)];
  return a;
}

PatientSplit train_test_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw DomainError("train fraction must lie in (0, 1)");
  const auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n) throw DomainError(fmt::format("cannot split {} patients at fraction {}", n, fraction));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  PatientSplit s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ---------------------------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (scenarios.empty()) throw DomainError("experiment needs at least one scenario");
  for (int s : scenarios)
    if (s != 1 && s != 2) throw DomainError(fmt::format("scenario must be 1 or 2, got {}", s));
  if (methods.empty()) throw DomainError("experiment needs at least one method");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    method_from_name(m);
    if (!seen.insert(m).second) throw DomainError(fmt::format("method '{}' listed twice", m));
  }
  if (runs < 1) throw DomainError("runs must be at least 1");
  if (n_patients < 8) throw DomainError("n_patients must be at least 8");
  if (horizon < 1) throw DomainError("horizon must be at least 1");
  if (!(train_fraction > 0 && train_fraction < 1)) throw DomainError("train_fraction must lie in (0, 1)");
  if (!(max_failure_fraction >= 0 && max_failure_fraction <= 1))
    throw DomainError("max_failure_fraction must lie in [0, 1]");
  if (knn_k < 1) throw DomainError("knn_k must be at least 1");
  tree.validate();
  forest.validate();
  propensity.validate();
  dgp_config(scenarios.front(), 0).validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"scenarios", scenarios},
          {"n_patients", n_patients},
          {"horizon", horizon},
          {"runs", runs},
          {"methods", methods},
          {"train_fraction", train_fraction},
          {"seed", seed},
          {"dgp", dgp},
          {"tree", tree.to_json()},
          {"forest", forest.to_json()},
          {"cart", {{"min_leaf", cart.min_leaf}, {"max_split_buckets", cart.max_split_buckets}, {"complexity", cart.complexity}}},
          {"knn_k", knn_k},
          {"propensity", {{"clip_lo", propensity.clip_lo}, {"clip_hi", propensity.clip_hi}}},
          {"fit_to_raw_outcome", fit_to_raw_outcome},
          {"max_failure_fraction", max_failure_fraction}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"scenarios", "n_patients", "horizon",  "runs",
                                           "methods",   "train_fraction", "seed", "dgp",
                                           "tree",      "forest",     "cart",     "knn_k",
                                           "propensity", "fit_to_raw_outcome", "max_failure_fraction", "comment"};
  if (!j.is_object()) throw SchemaError("", "experiment config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw SchemaError(k, fmt::format("unknown experiment config key '{}'", k));
  ExperimentConfig c;
  try {
    c.scenarios = j.value("scenarios", c.scenarios);
    c.n_patients = j.value("n_patients", c.n_patients);
    c.horizon = j.value("horizon", c.horizon);
    c.runs = j.value("runs", c.runs);
    c.methods = j.value("methods", c.methods);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.seed = j.value("seed", c.seed);
    c.dgp = j.value("dgp", c.dgp);
    if (j.contains("tree")) c.tree = TreeParams::from_json(j.at("tree"), c.tree);
    if (j.contains("forest")) {
      // ForestParams::from_json starts from its own defaults; keep the CLI-level clip bounds consistent.
      nlohmann::json f = c.forest.to_json();
      f.merge_patch(j.at("forest"));
      c.forest = ForestParams::from_json(f);
    }
    if (j.contains("cart")) {
      const auto& cj = j.at("cart");
      c.cart.min_leaf = cj.value("min_leaf", c.cart.min_leaf);
      c.cart.max_split_buckets = cj.value("max_split_buckets", c.cart.max_split_buckets);
      c.cart.complexity = cj.value("complexity", c.cart.complexity);
    }
    c.knn_k = j.value("knn_k", c.knn_k);
    if (j.contains("propensity")) {
      const auto& pj = j.at("propensity");
      c.propensity.clip_lo = pj.value("clip_lo", c.propensity.clip_lo);
      c.propensity.clip_hi = pj.value("clip_hi", c.propensity.clip_hi);
    }
    c.fit_to_raw_outcome = j.value("fit_to_raw_outcome", c.fit_to_raw_outcome);
    c.max_failure_fraction = j.value("max_failure_fraction", c.max_failure_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("", fmt::format("bad experiment config: {}", e.what()));
  }
  return c;
}

std::string ExperimentConfig::fingerprint() const { return fmt::format("{:016x}", fnv1a(to_json().dump())); }

DtrParams ExperimentConfig::dtr_params(const std::string& method) const {
  DtrParams p;
  p.kind = method_from_name(method);
  p.tree = tree;
  p.forest = forest;
  p.cart = cart;
  p.knn_k = knn_k;
  p.propensity.clip_lo = propensity.clip_lo;
  p.propensity.clip_hi = propensity.clip_hi;
  p.fit_to_raw_outcome = fit_to_raw_outcome;
  return p;
}

DgpConfig ExperimentConfig::dgp_config(int scenario, int run) const {
  DgpConfig d = DgpConfig::from_json(dgp);
  d.scenario = scenario;
  d.n_patients = n_patients;
  d.horizon = horizon;
  d.seed = run_seed(*this, scenario, run);
  return d;
}

std::uint64_t run_seed(const ExperimentConfig& c, int scenario, int run) {
  return derive_seed(derive_seed(c.seed, static_cast<std::uint64_t>(scenario)), static_cast<std::uint64_t>(run));
}

std::uint64_t method_seed(std::uint64_t rs, const std::string& method) { return derive_seed(rs, fnv1a(method)); }

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1))};
}

std::vector<SummaryCell> summarise_records(const ExperimentConfig& c, const std::vector<RunRecord>& records) {
  std::vector<SummaryCell> cells;
  for (const auto& m : c.methods)
    for (int s : c.scenarios)
      for (const char* split : {"train", "test"}) {
        std::vector<double> reg, acc;
        int failures = 0;
        for (const auto& r : records) {
          if (r.method != m || r.scenario != s) continue;
          if (r.failed) {
            ++failures;
            continue;
          }
          const bool train = split[1] == 'r';
          reg.push_back(train ? r.train_regret : r.test_regret);
          acc.push_back(train ? r.train_accuracy : r.test_accuracy);
        }
        SummaryCell cell;
        cell.method = m;
        cell.scenario = s;
        cell.split = split;
        std::tie(cell.regret_mean, cell.regret_sd) = mean_sd(reg);
        std::tie(cell.accuracy_mean, cell.accuracy_sd) = mean_sd(acc);
        cell.runs = static_cast<int>(reg.size());
        cell.failures = failures;
        cells.push_back(cell);
      }
  return cells;
}

const SummaryCell& EvaluationReport::cell(const std::string& method, int scenario, const std::string& split) const {
  for (const auto& c : cells)
    if (c.method == method && c.scenario == scenario && c.split == split) return c;
  throw DomainError(fmt::format("report has no cell ({}, scenario {}, {})", method, scenario, split));
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string csv_num(double v) { return std::isfinite(v) ? format_real(v) : "NA"; }

std::string mean_sd_cell(double m, double sd) {
  if (!std::isfinite(m)) return "NA";
  return fmt::format("{:.3f} ({:.3f})", m, sd);
}

void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  body(f);
  if (!f) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
}

}  // namespace

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& c : cells)
    cj.push_back({{"method", c.method},
                  {"scenario", c.scenario},
                  {"split", c.split},
                  {"regret", {{"mean", num(c.regret_mean)}, {"sd", num(c.regret_sd)}}},
                  {"accuracy", {{"mean", num(c.accuracy_mean)}, {"sd", num(c.accuracy_sd)}}},
                  {"runs", c.runs},
                  {"failures", c.failures}});
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& r : records)
    if (r.failed) failures.push_back({{"scenario", r.scenario}, {"run", r.run}, {"method", r.method}, {"error", r.error}});
  return {{"config", config.to_json()},
          {"fingerprint", config.fingerprint()},
          {"runs", config.runs},
          {"cells", std::move(cj)},
          {"failures", std::move(failures)},
          {"monotonicity_checks", monotonicity_checks}};
}

void EvaluationReport::write_summary_csv(std::ostream& out) const {
  out << "method,scenario,split,regret_mean,regret_sd,accuracy_mean,accuracy_sd,runs,failures\n";
  for (const auto& c : cells)
    out << c.method << ',' << c.scenario << ',' << c.split << ',' << csv_num(c.regret_mean) << ','
        << csv_num(c.regret_sd) << ',' << csv_num(c.accuracy_mean) << ',' << csv_num(c.accuracy_sd) << ',' << c.runs
        << ',' << c.failures << '\n';
}

namespace {

void write_wide(const EvaluationReport& r, std::ostream& out, bool regret) {
  out << "method";
  for (int s : r.config.scenarios)
    for (const char* split : {"train", "test"}) out << ",scenario " << s << ' ' << split;
  out << '\n';
  for (const auto& m : r.config.methods) {
    out << m;
    for (int s : r.config.scenarios)
      for (const char* split : {"train", "test"}) {
        const auto& c = r.cell(m, s, split);
        out << ",\"" << (regret ? mean_sd_cell(c.regret_mean, c.regret_sd)
                                : mean_sd_cell(100 * c.accuracy_mean, 100 * c.accuracy_sd))
            << '"';
      }
    out << '\n';
  }
}

}  // namespace

void EvaluationReport::write_regret_table(std::ostream& out) const { write_wide(*this, out, true); }
void EvaluationReport::write_accuracy_table(std::ostream& out) const { write_wide(*this, out, false); }

void EvaluationReport::write_runs_csv(std::ostream& out) const {
  out << "scenario,run,method,failed,train_regret,test_regret,train_accuracy,test_accuracy";
  for (int t = 1; t <= config.horizon; ++t) out << ",test_accuracy_t" << t;
  out << ",undefined_effects,error\n";
  for (const auto& r : records) {
    out << r.scenario << ',' << r.run << ',' << r.method << ',' << (r.failed ? 1 : 0) << ',';
    if (r.failed) {
      out << "NA,NA,NA,NA";
      for (int t = 1; t <= config.horizon; ++t) out << ",NA";
    } else {
      out << csv_num(r.train_regret) << ',' << csv_num(r.test_regret) << ',' << csv_num(r.train_accuracy) << ','
          << csv_num(r.test_accuracy);
      for (double a : r.test_accuracy_per_step) out << ',' << csv_num(a);
    }
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    out << ',' << r.undefined_effects << ",\"" << err << "\"\n";
  }
}

void EvaluationReport::write(const std::filesystem::path& dir) const {
  ensure_dir(dir);
  write_file(dir / "report.json", [&](std::ostream& o) { o << to_json().dump(1) << '\n'; });
  write_file(dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(o); });
  write_file(dir / "table_regret.csv", [&](std::ostream& o) { write_regret_table(o); });
  write_file(dir / "table_accuracy.csv", [&](std::ostream& o) { write_accuracy_table(o); });
  write_file(dir / "runs.csv", [&](std::ostream& o) { write_runs_csv(o); });
}

// ---------------------------------------------------------------------------------------------

namespace {

std::size_t check_monotone(const EstimatedDTR& est, const std::string& method, int scenario, int run) {
  const auto& y = est.pseudo_outcomes();
  std::size_t checks = 0;
  for (int t = est.horizon(); t >= 1; --t) {
    const auto& later = y[static_cast<std::size_t>(t)];
    const auto& earlier = y[static_cast<std::size_t>(t - 1)];
    for (std::size_t i = 0; i < later.size(); ++i)
      if (!(earlier[i] >= later[i]))
        throw ContractError(fmt::format("pseudo-outcome decreased for patient {} at step {} ({}, scenario {}, run {})",
                                        i, t, method, scenario, run));
    ++checks;
  }
  return checks;
}

struct RunOutput {
  std::vector<RunRecord> records;
  std::size_t checks = 0;
};

RunOutput run_one(const ExperimentConfig& c, int scenario, int run, Execution inner) {
  RunOutput out;
  const auto rs = run_seed(c, scenario, run);
  const auto sim = generate_scenario(c.dgp_config(scenario, run));
  const auto split = train_test_split(sim.dataset.size(), c.train_fraction, derive_seed(rs, 1));
  const auto train = sim.dataset.subset(split.train);
  const auto test = sim.dataset.subset(split.test);
  const auto o_train = sim.oracle.subset(split.train);
  const auto o_test = sim.oracle.subset(split.test);

  for (const auto& m : c.methods) {
    RunRecord r;
    r.scenario = scenario;
    r.run = run;
    r.method = m;
    auto p = c.dtr_params(m);
    p.seed = method_seed(rs, m);
    p.exec = inner;
    p.oracle = &sim.oracle;
    try {
      const auto est = estimate_dtr(train, p);
      out.checks += check_monotone(est, m, scenario, run);
      const auto d_train = apply_policy(est, train);
      const auto d_test = apply_policy(est, test);
      r.train_regret = cumulative_regret(d_train.decisions, o_train).mean;
      r.test_regret = cumulative_regret(d_test.decisions, o_test).mean;
      r.train_accuracy = decision_accuracy(d_train.decisions, o_train).overall;
      const auto acc = decision_accuracy(d_test.decisions, o_test);
      r.test_accuracy = acc.overall;
      r.test_accuracy_per_step = acc.per_step;
      r.undefined_effects = d_test.undefined_effects + est.fit_decisions().undefined_effects;
    } catch (const ContractError&) {
      throw;
    } catch (const Error& e) {
      r.failed = true;
      r.error = e.what();
      logger().warn("{} failed in scenario {} run {}: {}", m, scenario, run, e.what());
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

}  // namespace

EvaluationReport run_experiment(const ExperimentConfig& config, Execution exec, const ProgressFn& progress) {
  config.validate();
  std::vector<std::pair<int, int>> tasks;
  for (int s : config.scenarios)
    for (int r = 0; r < config.runs; ++r) tasks.emplace_back(s, r);
  std::vector<RunOutput> outputs(tasks.size());

  const bool outer = exec == Execution::parallel && thread_cap() > 1 && tasks.size() > 1;
  const Execution inner = outer ? Execution::serial : exec;
  std::exception_ptr failure;
  const auto n_tasks = static_cast<std::ptrdiff_t>(tasks.size());
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap()) if (outer)
  for (std::ptrdiff_t k = 0; k < n_tasks; ++k) {
    try {
      const auto [s, r] = tasks[static_cast<std::size_t>(k)];
      outputs[static_cast<std::size_t>(k)] = run_one(config, s, r, inner);
      if (progress) {
#pragma omp critical(dtr_progress)
        progress(s, r);
      }
    } catch (...) {
#pragma omp critical(dtr_experiment_error)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  auto report = std::make_shared<EvaluationReport>();
  report->config = config;
  for (auto& o : outputs) {
    report->monotonicity_checks += o.checks;
    for (auto& r : o.records) report->records.push_back(std::move(r));
  }
  report->cells = summarise_records(config, report->records);

  for (const auto& m : config.methods)
    for (int s : config.scenarios) {
      int failed = 0;
      for (const auto& r : report->records) failed += r.method == m && r.scenario == s && r.failed;
      if (failed > config.max_failure_fraction * config.runs)
        throw ExperimentAborted(fmt::format("{} failed in {} of {} runs of scenario {} (limit {:.0f}%)", m, failed,
                                            config.runs, s, 100 * config.max_failure_fraction),
                                report);
    }
  return *report;
}

// ---------------------------------------------------------------------------------------------

const SensitivityRow& SensitivityReport::row(const std::string& method, int scenario, int min_leaf,
                                             const std::string& split) const {
  for (const auto& r : rows)
    if (r.method == method && r.scenario == scenario && r.min_leaf == min_leaf && r.split == split) return r;
  throw DomainError(fmt::format("sensitivity report has no row ({}, scenario {}, min leaf {}, {})", method, scenario,
                                min_leaf, split));
}

nlohmann::json SensitivityReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows)
    rj.push_back({{"method", r.method},
                  {"scenario", r.scenario},
                  {"min_leaf", r.min_leaf},
                  {"split", r.split},
                  {"regret", {{"mean", num(r.regret_mean)}, {"sd", num(r.regret_sd)}}},
                  {"accuracy", {{"mean", num(r.accuracy_mean)}, {"sd", num(r.accuracy_sd)}}},
                  {"runs", r.runs},
                  {"failures", r.failures}});
  return {{"config", config.to_json()},
          {"fingerprint", config.fingerprint()},
          {"min_leaf_values", min_leaf_values},
          {"rows", std::move(rj)}};
}

void SensitivityReport::write_csv(std::ostream& out) const {
  out << "method,scenario,min_leaf,split,regret_mean,regret_sd,accuracy_mean,accuracy_sd,runs,failures\n";
  for (const auto& r : rows)
    out << r.method << ',' << r.scenario << ',' << r.min_leaf << ',' << r.split << ',' << csv_num(r.regret_mean) << ','
        << csv_num(r.regret_sd) << ',' << csv_num(r.accuracy_mean) << ',' << csv_num(r.accuracy_sd) << ',' << r.runs
        << ',' << r.failures << '\n';
}

void SensitivityReport::write(const std::filesystem::path& dir) const {
  ensure_dir(dir);
  write_file(dir / "sensitivity.json", [&](std::ostream& o) { o << to_json().dump(1) << '\n'; });
  write_file(dir / "sensitivity.csv", [&](std::ostream& o) { write_csv(o); });
}

SensitivityReport run_sensitivity(const ExperimentConfig& config, const std::vector<int>& min_leaf_values,
                                  Execution exec, const ProgressFn& progress) {
  if (min_leaf_values.empty()) throw DomainError("sensitivity sweep needs at least one min-leaf value");
  for (int v : min_leaf_values)
    if (v < 1) throw DomainError(fmt::format("min-leaf value {} must be at least 1", v));
  SensitivityReport out;
  out.config = config;
  out.min_leaf_values = min_leaf_values;
  std::vector<std::vector<SummaryCell>> per_value;
  for (int v : min_leaf_values) {
    auto c = config;
    c.tree.min_treated_per_leaf = c.tree.min_control_per_leaf = v;
    c.forest.tree.min_treated_per_leaf = c.forest.tree.min_control_per_leaf = v;
    per_value.push_back(run_experiment(c, exec, progress).cells);
  }
  for (const auto& m : config.methods)
    for (int s : config.scenarios)
      for (std::size_t k = 0; k < min_leaf_values.size(); ++k)
        for (const auto& cell : per_value[k])
          if (cell.method == m && cell.scenario == s)
            out.rows.push_back(SensitivityRow{m, s, min_leaf_values[k], cell.split, cell.regret_mean, cell.regret_sd,
                                              cell.accuracy_mean, cell.accuracy_sd, cell.runs, cell.failures});
  return out;
}

}  // namespace dtr
