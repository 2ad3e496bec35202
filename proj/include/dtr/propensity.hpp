#pragma once

#include "dtr/core.hpp"

#include <span>
#include <vector>

namespace dtr {

/// Which inverse-probability weight a patient receives.
enum class WeightConvention {
  /// 1/pi for treated, 1/(1 - pi) for controls (probability of the received arm).
  arm_appropriate,
  /// 1/pi for every patient, the literal form used for ablation.
  inverse_propensity_all,
};

struct PropensityOptions {
  double clip_lo = 0.01;
  double clip_hi = 0.99;
  /// Ridge added to the IRLS normal equations.
  double ridge = 1e-6;
  /// Penalty used for the refit when the first fit diverges or does not converge.
  double fallback_ridge = 1.0;
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
  /// Any |coefficient| above this after the fallback refit is treated as separation.
  double separation_threshold = 30.0;
  WeightConvention convention = WeightConvention::arm_appropriate;

  void validate() const;
};

struct ConvergenceInfo {
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
  bool used_fallback_ridge = false;
  /// Penalised log-likelihood at the start and after every accepted iterate.
  std::vector<double> objective_trace;
};

/// Logistic propensity pi(h) = 1 / (1 + exp(-[1, h]^T gamma)) for one step.
struct PropensityModel {
  int step = 0;
  Vector coefficients;  // intercept first
  ConvergenceInfo convergence;
  double clip_lo = 0.01;
  double clip_hi = 0.99;

  std::size_t width() const noexcept { return static_cast<std::size_t>(coefficients.size()) - 1; }
  double clip(double p) const noexcept { return std::min(std::max(p, clip_lo), clip_hi); }

  nlohmann::json to_json() const;
  static PropensityModel from_json(const nlohmann::json& j);
};

/// Maximum-likelihood fit by IRLS with step halving. Throws DomainError when only one arm
/// is present and DegenerateFitError on (quasi-)complete separation.
PropensityModel fit_propensity(const Matrix& history, std::span<const int> treatments,
                               const PropensityOptions& options = {}, int step = 0);
PropensityModel fit_propensity(const HistoryMatrix& history, std::span<const int> treatments,
                               const PropensityOptions& options = {});

/// Raw (unclipped) logistic value.
double predict_propensity(const PropensityModel& model, std::span<const double> h);
std::vector<double> predict_propensity(const PropensityModel& model, const Matrix& history);

struct IpwWeights {
  std::vector<double> weights;
  std::size_t clipped = 0;
  double clipped_fraction = 0.0;
};

/// Inverse-probability weights using the model's clip bounds. Every clipped observation
/// increments `clipped`; the fraction is the positivity diagnostic.
IpwWeights ipw_weights(const PropensityModel& model, const Matrix& history,
                       std::span<const int> treatments,
                       WeightConvention convention = WeightConvention::arm_appropriate);
IpwWeights ipw_weights(const PropensityModel& model, const HistoryMatrix& history,
                       std::span<const int> treatments,
                       WeightConvention convention = WeightConvention::arm_appropriate);

/// Bernoulli log-likelihood of `treatments` under coefficients `gamma` (intercept first).
double log_likelihood(const Matrix& history, std::span<const int> treatments, const Vector& gamma);
/// Analytic gradient of log_likelihood with respect to gamma.
Vector log_likelihood_gradient(const Matrix& history, std::span<const int> treatments,
                               const Vector& gamma);

}  // namespace dtr
