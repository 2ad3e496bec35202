#pragma once

#include "dtr/causal_tree.hpp"
#include "dtr/propensity.hpp"
#include "dtr/regression_tree.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dtr {

struct ForestParams {
  int n_trees = 500;
  TreeParams tree = unpruned();
  double subsample_fraction = 0.5;
  /// Features tried per split: -1 means ceil(sqrt(d)), 0 means all.
  int features_per_split = -1;
  int crossfit_folds = 5;
  /// Trees in each cross-fitted outcome forest.
  int nuisance_trees = 100;
  int nuisance_min_leaf = 5;
  /// Grow trees on Y - Yhat(-j) (the centered outcome) rather than on Y.
  bool center_outcomes = true;
  PropensityOptions propensity;
  std::uint64_t seed = 0;

  void validate() const;
  int mtry(int d) const;
  nlohmann::json to_json() const;
  static ForestParams from_json(const nlohmann::json& j);

  static TreeParams unpruned() {
    TreeParams p;
    p.prune = false;
    return p;
  }
};

class CausalForest {
 public:
  /// alpha_j(h) over the fitted rows: each tree adds 1/B spread evenly over the estimation
  /// members of the leaf h falls into. Throws UndefinedEffectError if every leaf is empty.
  std::vector<double> kernel_weights(std::span<const double> h) const;
  /// Centered ratio estimator sum a_j r_j e_j / sum a_j e_j^2, with r = Y - Yhat(-j) and
  /// e = A - pihat(-j). Throws UndefinedEffectError when the weighted neighbourhood holds
  /// only one arm or the denominator is below 1e-10.
  double hte(std::span<const double> h) const;
  /// hte for every row; rows whose effect is undefined get NaN.
  std::vector<double> predict(const Matrix& x, Execution exec = Execution::parallel) const;

  const std::vector<CausalTree>& trees() const noexcept { return trees_; }
  const std::vector<std::vector<std::size_t>>& subsamples() const noexcept { return subsamples_; }
  const std::vector<double>& outcomes() const noexcept { return y_; }
  const std::vector<int>& treatments() const noexcept { return a_; }
  const std::vector<double>& outcome_oob() const noexcept { return y_hat_; }
  const std::vector<double>& propensity_oob() const noexcept { return pi_hat_; }
  /// Cross-fitting fold of every fitted row.
  const std::vector<int>& folds() const noexcept { return fold_; }
  const ForestParams& params() const noexcept { return params_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t skipped_trees() const noexcept { return skipped_; }

  /// Depth-weighted split frequency per feature (depths 1..max_depth, weight depth^-decay),
  /// normalised to sum to one when any split exists.
  std::vector<double> variable_importance(int max_depth = 4, double decay = 2.0) const;

  bool structurally_equal(const CausalForest& other) const;

  /// Full model including per-row nuisance values, so a reloaded forest predicts identically.
  nlohmann::json to_json() const;
  static CausalForest from_json(const nlohmann::json& j);
  nlohmann::json summary_json(const std::vector<std::string>& column_names) const;

  /// Replaces the stored nuisance vectors; used to check equivariance properties.
  void set_nuisance(std::vector<double> outcomes, std::vector<double> outcome_oob, std::vector<double> propensity_oob);

 private:
  friend CausalForest grow_forest(const CausalData&, const ForestParams&, Execution);
  void index_leaves();

  struct LeafSums {
    double inv_size = 0;  // 1 / |leaf|, 0 for an empty leaf
    double re = 0;        // sum of r_j e_j over members
    double ee = 0;        // sum of e_j^2 over members
    bool treated = false;
    bool control = false;
  };

  std::vector<CausalTree> trees_;
  std::vector<std::vector<std::size_t>> subsamples_;
  std::vector<std::vector<LeafSums>> sums_;
  std::vector<double> y_, y_hat_, pi_hat_;
  std::vector<int> a_;
  std::vector<int> fold_;
  ForestParams params_;
  std::size_t width_ = 0;
  std::size_t skipped_ = 0;
};

/// Cross-fitting fold assignment: a seeded permutation dealt round-robin into k folds.
std::vector<int> crossfit_folds(std::size_t n, int k, std::uint64_t seed);

/// Settings of the outcome forests behind Yhat(-j) for a d-column design.
RegressionForestParams nuisance_params(const ForestParams& params, int d);

/// Out-of-fold outcome predictions from honest regression forests, one per fold.
std::vector<double> crossfit_outcomes(const Matrix& x, std::span<const double> y, const std::vector<int>& folds,
                                      int n_folds, const RegressionForestParams& params, Execution exec);
/// Out-of-fold logistic propensities, clipped to the option bounds.
std::vector<double> crossfit_propensities(const Matrix& x, std::span<const int> a, const std::vector<int>& folds,
                                          int n_folds, const PropensityOptions& options);

/// `data.w` weights the split statistics of every tree; the ratio estimator itself is unweighted.
CausalForest grow_forest(const CausalData& data, const ForestParams& params, Execution exec = Execution::parallel);
CausalForest grow_forest(const HistoryMatrix& history, std::span<const double> outcomes,
                         std::span<const int> treatments, std::span<const double> weights,
                         const ForestParams& params, Execution exec = Execution::parallel);

std::vector<double> kernel_weights(const CausalForest& forest, std::span<const double> h);
double forest_hte(const CausalForest& forest, std::span<const double> h);

/// The ratio estimator on explicit inputs, for fixtures and audits.
double forest_hte_from(std::span<const double> alpha, std::span<const double> y, std::span<const double> y_hat,
                       std::span<const int> a, std::span<const double> pi_hat);

}  // namespace dtr
