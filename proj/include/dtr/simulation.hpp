#pragma once

#include "dtr/core.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace dtr {

/// Blip skeleton shared by both scenarios:
///   tau_t = intercept + x6 * X_t6 + x7 * X_t7 + interaction * g(X_t) * 1{X_t6 >= threshold},
/// with g(X) = X_t1 in scenario 1 and g(X) = sin(X_t1) + X_t2^2 in scenario 2.
struct BlipCoefficients {
  double intercept = 1.0;
  double x6 = 0.5;
  double x7 = -0.8;
  double interaction = 0.4;
  double threshold = 2.0;
};

struct DgpConfig {
  int scenario = 1;
  std::size_t n_patients = 5000;
  int horizon = 3;
  std::uint64_t seed = 0;

  std::array<double, 2> baseline_means{0.0, 0.0};
  std::array<double, 5> covariate_means{0.0, 0.0, 0.0, 0.0, 0.0};
  /// Shift of each continuous covariate per unit of treatment.
  std::array<double, 5> drift{0.5, 0.5, 0.5, 0.5, 0.5};
  /// Binomial(3, p) success probabilities of the two categorical covariates.
  std::array<double, 2> success_prob{0.4, 0.4};
  /// Variance of the AR(1) innovation of the continuous covariates.
  double noise_variance = 2.0;
  double outcome_noise_sd = 1.0;

  /// Behaviour policy: logit P(A_t = 1) = intercept + sum_j coef_j X_tj over the 7 covariates.
  double behavior_intercept = 0.0;
  std::array<double, 7> behavior_coef{0.3, -0.3, 0.0, 0.0, 0.0, 0.0, 0.0};

  BlipCoefficients blip;

  void validate() const;
  nlohmann::json to_json() const;
  static DgpConfig from_json(const nlohmann::json& j);
};

/// Analytic quantities of a simulated cohort. Matrices are N x T, rows in dataset order.
struct OracleBundle {
  Matrix true_tau;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> optimal_decisions;
  Vector optimal_outcome;
  Vector treatment_free;
  Vector noise;
  Matrix propensity;  // behaviour-policy probabilities
  std::vector<std::string> patient_ids;

  std::size_t size() const noexcept { return static_cast<std::size_t>(true_tau.rows()); }
  int horizon() const noexcept { return static_cast<int>(true_tau.cols()); }
  OracleBundle subset(std::span<const std::size_t> rows) const;
};

struct SimulatedData {
  LongitudinalDataset dataset;
  OracleBundle oracle;
};

/// Covariates are C1, C2 (baseline), X1..X5 continuous and X6, X7 categorical with levels
/// "0".."3T" so that a level's index equals its count.
SimulatedData generate_scenario(const DgpConfig& config);

/// Treatment-free term phi_t from baseline C and the raw covariates of steps 1..t
/// (`x` is T x 7, `phi_prev` the previous step's value, used by scenario 2).
double treatment_free_term(const DgpConfig& config, std::span<const double> c, const Matrix& x, int t,
                           double phi_prev);

/// Analytic blip at step t from the raw step-t covariates (7 values).
double true_blip(const DgpConfig& config, std::span<const double> x_t);
/// The same, read from a dataset trajectory (categorical codes map to their counts).
double true_blip(const DgpConfig& config, const Trajectory& trajectory, int t);

/// Long format: id, t, tau, opt_decision, y_opt.
void write_oracle_csv(const std::filesystem::path& path, const OracleBundle& oracle);
void write_oracle_csv(std::ostream& out, const OracleBundle& oracle);
OracleBundle read_oracle_csv(const std::filesystem::path& path);

}  // namespace dtr
