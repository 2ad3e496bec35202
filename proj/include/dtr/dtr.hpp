#pragma once

#include "dtr/baselines.hpp"
#include "dtr/causal_forest.hpp"
#include "dtr/causal_tree.hpp"
#include "dtr/core.hpp"
#include "dtr/propensity.hpp"
#include "dtr/simulation.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace dtr {

enum class EstimatorKind { causal_tree, causal_forest, qlearning, dwols, gestimation, cart, knn, oracle };

/// Method tags used on the command line and in reports: dtr-ct, dtr-cf, qlearn, dwols,
/// gest, cart, knn, oracle.
std::string method_name(EstimatorKind k);
EstimatorKind method_from_name(const std::string& name);
const std::vector<EstimatorKind>& all_estimator_kinds();

/// Per-step HTE estimator as seen by the backward recursion.
class HteModel {
 public:
  virtual ~HteModel() = default;
  virtual EstimatorKind kind() const = 0;
  /// tau-hat for one encoded history row. NaN marks an undefined effect.
  virtual double predict(std::span<const double> h) const = 0;
  /// tau-hat for every row of `h`.
  virtual std::vector<double> predict(const HistoryMatrix& h) const;
  virtual nlohmann::json to_json() const = 0;
  /// Human-oriented export (tree structure, importances, coefficients).
  virtual nlohmann::json explain(const std::vector<std::string>& column_names) const = 0;
};

std::unique_ptr<HteModel> model_from_json(const nlohmann::json& j);

/// Looks up the simulator's true tau by patient id; stands in for an estimator so the
/// recursion can be checked against the truth.
class OracleModel final : public HteModel {
 public:
  OracleModel(int step, std::map<std::string, double> tau) : step_(step), tau_(std::move(tau)) {}
  OracleModel(const OracleBundle& oracle, int step);
  EstimatorKind kind() const override { return EstimatorKind::oracle; }
  /// Throws ContractError: the oracle needs the patient id, use the batch overload.
  double predict(std::span<const double> h) const override;
  std::vector<double> predict(const HistoryMatrix& h) const override;
  nlohmann::json to_json() const override;
  nlohmann::json explain(const std::vector<std::string>&) const override;

 private:
  int step_;
  std::map<std::string, double> tau_;
};

struct DtrParams {
  EstimatorKind kind = EstimatorKind::causal_tree;
  TreeParams tree;
  ForestParams forest;
  CartParams cart;
  int knn_k = 10;
  PropensityOptions propensity;
  /// Fit every step to the observed Y instead of the pseudo-outcome (ablation).
  bool fit_to_raw_outcome = false;
  std::uint64_t seed = 0;
  Execution exec = Execution::parallel;
  /// Needed by EstimatorKind::oracle; rows are matched by patient id.
  const OracleBundle* oracle = nullptr;

  nlohmann::json to_json() const;
};

struct StepDiagnostics {
  int step = 0;
  std::size_t n = 0;
  std::size_t clipped = 0;
  double clipped_fraction = 0;
  bool propensity_converged = false;
  bool propensity_fallback = false;
  double tau_mean = 0, tau_sd = 0, tau_min = 0, tau_max = 0;
  double treat_fraction = 0;
  /// Forest queries without treatment variation; their decision falls back to 0.
  std::size_t undefined_effects = 0;

  nlohmann::json to_json() const;
};

/// decision(h) = 1{tau(h) > 0}; an undefined (NaN) effect yields 0.
struct StepPolicy {
  int step = 0;
  PropensityModel propensity;
  std::shared_ptr<const HteModel> model;

  double tau(std::span<const double> h) const { return model->predict(h); }
  int decision(std::span<const double> h) const { return tau(h) > 0.0 ? 1 : 0; }
};

struct DecisionMatrix {
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> decisions;  // N x T
  Matrix tau_hat;                                                                 // N x T, undefined -> 0
  std::vector<std::string> patient_ids;
  std::size_t undefined_effects = 0;
};

class EstimatedDTR {
 public:
  EstimatedDTR(HistoryEncoder encoder, EstimatorKind kind) : encoder_(std::move(encoder)), kind_(kind) {}

  const HistoryEncoder& encoder() const noexcept { return encoder_; }
  EstimatorKind kind() const noexcept { return kind_; }
  int horizon() const noexcept { return static_cast<int>(policies_.size()); }
  /// Step t, 1-based.
  const StepPolicy& policy(int t) const { return policies_.at(static_cast<std::size_t>(t - 1)); }
  const std::vector<StepPolicy>& policies() const noexcept { return policies_; }
  const std::vector<StepDiagnostics>& diagnostics() const noexcept { return diagnostics_; }
  /// Decisions and effects computed on the fitting data during estimation.
  const DecisionMatrix& fit_decisions() const noexcept { return fit_; }
  /// pseudo_outcomes()[t] is Y'_t for t = 0..T (Y'_T = Y).
  const std::vector<std::vector<double>>& pseudo_outcomes() const noexcept { return pseudo_; }
  const nlohmann::json& params() const noexcept { return params_; }

 private:
  friend EstimatedDTR estimate_dtr(const LongitudinalDataset&, const DtrParams&);
  friend EstimatedDTR load_bundle(const std::filesystem::path&);
  HistoryEncoder encoder_;
  EstimatorKind kind_;
  std::vector<StepPolicy> policies_;
  std::vector<StepDiagnostics> diagnostics_;
  DecisionMatrix fit_;
  std::vector<std::vector<double>> pseudo_;
  nlohmann::json params_;
};

/// Backward recursion over t = T..1: propensity fit, IPW weights, HTE fit on the pseudo-outcome,
/// decision 1{tau > 0}, and Y'_{t-1} = Y'_t + (decision - a_t) tau. Errors name the failing step.
EstimatedDTR estimate_dtr(const LongitudinalDataset& dataset, const DtrParams& params);

/// y_prev + (decision - a) * tau_hat. Throws ContractError unless decision == 1{tau_hat > 0}.
double update_pseudo_outcome(double y_prev, int a, int decision, double tau_hat);

/// Decisions on `dataset` built from its observed histories. Throws SchemaError when the
/// dataset's schema does not match the one the regime was fit on.
DecisionMatrix apply_policy(const EstimatedDTR& dtr, const LongitudinalDataset& dataset);

/// Bundle directory: manifest.json, step_<t>.json per step, explain_step_<t>.json.
/// `provenance` is stored verbatim in the manifest.
void save_bundle(const EstimatedDTR& dtr, const std::filesystem::path& dir,
                 const nlohmann::json& provenance = nlohmann::json::object());
EstimatedDTR load_bundle(const std::filesystem::path& dir);

}  // namespace dtr
