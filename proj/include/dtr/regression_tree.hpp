#pragma once

#include "dtr/tree_common.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dtr {

/// Squared-error regression tree (CART style).
struct RegressionTreeParams {
  int min_leaf = 10;
  int max_split_buckets = 20;
  /// A split must cut the node SSE by at least complexity * (root SSE).
  double complexity = 0.01;
  int features_per_split = 0;
  int max_depth = 0;
  /// Honest trees choose splits on one part of the sample and fill leaf means from the other.
  bool honest = false;
  double honest_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RegressionTreeParams from_json(const nlohmann::json& j);
};

class RegressionTree {
 public:
  /// Leaf mean; NaN for an honest leaf that received no estimation rows.
  double predict(std::span<const double> h) const;

  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const std::vector<double>& leaf_values() const noexcept { return values_; }
  const std::vector<std::size_t>& leaf_counts() const noexcept { return counts_; }
  std::size_t width() const noexcept { return width_; }

  nlohmann::json to_json(const std::vector<std::string>* column_names = nullptr) const;
  static RegressionTree from_json(const nlohmann::json& j);
  bool operator==(const RegressionTree&) const = default;

 private:
  friend RegressionTree grow_regression_tree(const Matrix&, std::span<const double>, std::span<const std::size_t>,
                                             const RegressionTreeParams&);
  std::vector<TreeNode> nodes_;
  std::vector<double> values_;
  std::vector<std::size_t> counts_;
  std::size_t width_ = 0;
};

/// Fits on the rows listed in `rows` (all rows when empty) with unit weights.
RegressionTree grow_regression_tree(const Matrix& x, std::span<const double> y, std::span<const std::size_t> rows,
                                    const RegressionTreeParams& params);

struct RegressionForestParams {
  int n_trees = 100;
  double subsample_fraction = 0.5;
  RegressionTreeParams tree{5, 20, 0.0, 0, 0, true, 0.5, 0};
  std::uint64_t seed = 0;
};

/// Average of subsampled honest regression trees. Trees whose leaf is empty for a query
/// are skipped; when every tree is empty the training mean is returned.
class RegressionForest {
 public:
  double predict(std::span<const double> h) const;
  const std::vector<RegressionTree>& trees() const noexcept { return trees_; }
  double fallback() const noexcept { return fallback_; }

 private:
  friend RegressionForest grow_regression_forest(const Matrix&, std::span<const double>,
                                                 std::span<const std::size_t>, const RegressionForestParams&,
                                                 Execution);
  std::vector<RegressionTree> trees_;
  double fallback_ = 0.0;
};

RegressionForest grow_regression_forest(const Matrix& x, std::span<const double> y,
                                        std::span<const std::size_t> rows, const RegressionForestParams& params,
                                        Execution exec = Execution::parallel);

}  // namespace dtr
