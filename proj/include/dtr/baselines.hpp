#pragma once

#include "dtr/core.hpp"
#include "dtr/regression_tree.hpp"

#include <span>
#include <string>
#include <vector>

namespace dtr {

struct WlsResult {
  Vector coefficients;
  Eigen::Index rank = 0;
  bool rank_deficient = false;
};

/// Minimises sum_i w_i (y_i - x_i^T b)^2 through a complete orthogonal decomposition of
/// the row-scaled design; rank-deficient designs get the minimum-norm solution and a warning.
WlsResult wls(const Matrix& design, std::span<const double> response, std::span<const double> weights);
Vector wls_solve(const Matrix& design, std::span<const double> response, std::span<const double> weights);

enum class BlipMethod { qlearning, dwols, gestimation };
std::string to_string(BlipMethod m);
BlipMethod blip_method_from_string(const std::string& s);

/// Linear blip tau(h) = psi^T [1, h]; `beta` holds the treatment-free block when it was
/// estimated jointly (empty for G-estimation).
struct BlipModel {
  int step = 0;
  Vector psi;
  Vector beta;
  BlipMethod method = BlipMethod::qlearning;
  bool rank_deficient = false;

  std::size_t width() const noexcept { return static_cast<std::size_t>(psi.size()) - 1; }
  double predict(std::span<const double> h) const;
  nlohmann::json to_json(const std::vector<std::string>* column_names = nullptr) const;
  static BlipModel from_json(const nlohmann::json& j);
};

/// OLS of Y' on (1, h, a, a*h).
BlipModel qlearning_blip(const Matrix& history, std::span<const int> treatments, std::span<const double> pseudo_outcomes,
                         int step = 0);
/// The same design solved by WLS with inverse-propensity weights.
BlipModel dwols_blip(const Matrix& history, std::span<const int> treatments, std::span<const double> pseudo_outcomes,
                     std::span<const double> ipw, int step = 0);
/// psi solving sum_i (a_i - pi_i) h~_i (Y'_i - a_i h~_i^T psi) = 0 with h~ = (1, h).
BlipModel gestimation_blip(const Matrix& history, std::span<const int> treatments,
                           std::span<const double> pseudo_outcomes, std::span<const double> propensities, int step = 0);

/// Two regression trees, one per arm; tau(h) = CART1(h) - CART0(h).
struct CartModel {
  RegressionTree treated;
  RegressionTree control;

  double predict(std::span<const double> h) const { return treated.predict(h) - control.predict(h); }
  nlohmann::json to_json(const std::vector<std::string>* column_names = nullptr) const;
  static CartModel from_json(const nlohmann::json& j);
};

struct CartParams {
  int min_leaf = 10;
  int max_split_buckets = 20;
  double complexity = 0.01;
};

CartModel fit_cart(const Matrix& history, std::span<const int> treatments, std::span<const double> pseudo_outcomes,
                   const CartParams& params = {});
/// In-sample tau estimates of fit_cart.
std::vector<double> cart_hte(const Matrix& history, std::span<const int> treatments,
                             std::span<const double> pseudo_outcomes, int min_leaf = 10);

/// k nearest treated minus k nearest controls, Euclidean distance on z-scored columns
/// (training moments; constant columns are ignored). Distance ties go to the lower row
/// index. A training row queried in-sample is its own neighbour.
class KnnModel {
 public:
  KnnModel() = default;
  KnnModel(const Matrix& history, std::span<const int> treatments, std::span<const double> pseudo_outcomes, int k);

  double predict(std::span<const double> h) const;
  std::vector<double> predict(const Matrix& x, Execution exec = Execution::parallel) const;
  /// Row indices (into the fitted data) of the k nearest neighbours in arm `a`, nearest first.
  std::vector<std::size_t> neighbours(std::span<const double> h, int a) const;

  int k() const noexcept { return k_; }
  std::size_t width() const noexcept { return static_cast<std::size_t>(mean_.size()); }
  nlohmann::json to_json() const;
  static KnnModel from_json(const nlohmann::json& j);

 private:
  void standardise();
  Matrix x_;  // raw training rows
  Matrix z_;  // standardised training rows
  std::vector<int> a_;
  std::vector<double> y_;
  Vector mean_;
  Vector inv_sd_;
  std::vector<std::size_t> treated_;
  std::vector<std::size_t> control_;
  int k_ = 10;
};

std::vector<double> knn_hte(const Matrix& history, std::span<const int> treatments,
                            std::span<const double> pseudo_outcomes, int k = 10);

}  // namespace dtr
