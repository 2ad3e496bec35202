#pragma once

#include "dtr/dtr.hpp"
#include "dtr/error.hpp"
#include "dtr/simulation.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

namespace dtr {

using IntMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RegretResult {
  std::vector<double> per_patient;
  double mean = 0.0;
};

struct AccuracyResult {
  double overall = 0.0;
  std::vector<double> per_step;
};

struct RewardResult {
  std::vector<double> per_patient;
  double mean = 0.0;
  /// Mean over patients of sum_{s <= t} r_s, for t = 1..T.
  std::vector<double> cumulative_mean;
};

/// Per patient sum_t (opt_t - decision_t) * tau_t. Throws DomainError on a shape mismatch and
/// ContractError if any summand is negative (oracle decisions inconsistent with tau).
RegretResult cumulative_regret(const IntMatrix& decisions, const OracleBundle& oracle);

AccuracyResult decision_accuracy(const IntMatrix& decisions, const OracleBundle& oracle);

/// Per patient sum_t (decision_t - a_t) * tau_hat_t. When decision_t = 1{tau_hat_t > 0} every
/// term must be >= 0; a negative term from such a cell throws ContractError.
RewardResult expected_reward(const IntMatrix& decisions, const IntMatrix& observed, const Matrix& tau_hat);

/// Observed treatments of a dataset as an N x T matrix.
IntMatrix observed_treatments(const LongitudinalDataset& dataset);

/// Patient-level split: round(fraction * n) randomly chosen patients for training, both sets sorted.
struct PatientSplit {
  std::vector<std::size_t> train, test;
};
PatientSplit train_test_split(std::size_t n, double train_fraction, std::uint64_t seed);

struct ExperimentConfig {
  std::vector<int> scenarios{1, 2};
  std::size_t n_patients = 5000;
  int horizon = 3;
  int runs = 100;
  std::vector<std::string> methods{"dtr-ct", "dtr-cf", "qlearn", "dwols", "gest", "cart", "knn"};
  double train_fraction = 0.75;
  std::uint64_t seed = 0;
  /// Applied on top of the scenario defaults (scenario, n, horizon and seed are set per run).
  nlohmann::json dgp = nlohmann::json::object();

  TreeParams tree;
  ForestParams forest;
  CartParams cart;
  int knn_k = 10;
  PropensityOptions propensity;
  bool fit_to_raw_outcome = false;
  double max_failure_fraction = 0.10;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected so that typos in config files surface as errors.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// 16 hex digits of a hash over the canonical JSON.
  std::string fingerprint() const;

  DtrParams dtr_params(const std::string& method) const;
  DgpConfig dgp_config(int scenario, int run) const;
};

/// Seeds used by run_experiment, exposed so results can be reproduced individually.
std::uint64_t run_seed(const ExperimentConfig& config, int scenario, int run);
std::uint64_t method_seed(std::uint64_t run_seed, const std::string& method);

struct RunRecord {
  int scenario = 0;
  int run = 0;
  std::string method;
  bool failed = false;
  std::string error;
  double train_regret = 0, test_regret = 0;
  double train_accuracy = 0, test_accuracy = 0;
  std::vector<double> test_accuracy_per_step;
  std::size_t undefined_effects = 0;
};

struct SummaryCell {
  std::string method;
  int scenario = 0;
  std::string split;  // "train" | "test"
  double regret_mean = 0, regret_sd = 0;
  double accuracy_mean = 0, accuracy_sd = 0;
  int runs = 0;
  int failures = 0;
};

struct EvaluationReport {
  ExperimentConfig config;
  std::vector<RunRecord> records;  // ordered by scenario, run, method as configured
  std::vector<SummaryCell> cells;  // ordered by method, scenario, split
  /// Number of (run, method, step) pseudo-outcome monotonicity checks that passed.
  std::size_t monotonicity_checks = 0;

  const SummaryCell& cell(const std::string& method, int scenario, const std::string& split) const;
  nlohmann::json to_json() const;
  /// Long format: method, scenario, split, regret_mean, regret_sd, accuracy_mean, accuracy_sd, runs, failures.
  void write_summary_csv(std::ostream& out) const;
  /// Wide "mean (sd)" tables, one row per method, columns scenario x split.
  void write_regret_table(std::ostream& out) const;
  void write_accuracy_table(std::ostream& out) const;
  /// One row per run and method.
  void write_runs_csv(std::ostream& out) const;
  /// Writes report.json, summary.csv, table_regret.csv, table_accuracy.csv and runs.csv.
  void write(const std::filesystem::path& dir) const;
};

/// Sample mean and SD (n - 1 denominator, 0 for a single value).
std::pair<double, double> mean_sd(const std::vector<double>& v);

/// Aggregates records into cells; used by run_experiment and for recomputation checks.
std::vector<SummaryCell> summarise_records(const ExperimentConfig& config, const std::vector<RunRecord>& records);

/// Thrown when more than max_failure_fraction of the runs of some method fail. Carries the
/// partial report so callers can still write it.
class ExperimentAborted : public Error {
 public:
  ExperimentAborted(std::string what, std::shared_ptr<const EvaluationReport> report)
      : Error(std::move(what)), report_(std::move(report)) {}
  const EvaluationReport& report() const { return *report_; }

 private:
  std::shared_ptr<const EvaluationReport> report_;
};

/// Progress hook called after every finished (scenario, run).
using ProgressFn = std::function<void(int scenario, int run)>;

/// For every scenario and run: fresh DGP draw, patient-level split, estimate_dtr on the training
/// part per method, apply_policy on both parts, metrics against the oracle. Runs execute
/// concurrently under Execution::parallel; results do not depend on scheduling.
/// Pseudo-outcome monotonicity is asserted in every fit (ContractError, never recorded as a
/// run failure).
EvaluationReport run_experiment(const ExperimentConfig& config, Execution exec = Execution::parallel,
                                const ProgressFn& progress = {});

struct SensitivityRow {
  std::string method;
  int scenario = 0;
  int min_leaf = 0;
  std::string split;
  double regret_mean = 0, regret_sd = 0;
  double accuracy_mean = 0, accuracy_sd = 0;
  int runs = 0;
  int failures = 0;
};

struct SensitivityReport {
  ExperimentConfig config;
  std::vector<int> min_leaf_values;
  std::vector<SensitivityRow> rows;  // method, scenario, min_leaf, split

  const SensitivityRow& row(const std::string& method, int scenario, int min_leaf, const std::string& split) const;
  nlohmann::json to_json() const;
  void write_csv(std::ostream& out) const;
  /// Writes sensitivity.json and sensitivity.csv.
  void write(const std::filesystem::path& dir) const;
};

/// Sweeps the per-arm leaf minimum (treated and control alike, trees and forest trees) over
/// `min_leaf_values` for the configured methods (default dtr-ct and dtr-cf). Seeds are those of
/// run_experiment, so the point equal to the base config reproduces the benchmark.
SensitivityReport run_sensitivity(const ExperimentConfig& config, const std::vector<int>& min_leaf_values = {10, 20, 30, 40, 50, 60, 70},
                                  Execution exec = Execution::parallel, const ProgressFn& progress = {});

}  // namespace dtr
