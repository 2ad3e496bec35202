#pragma once

#include "dtr/core.hpp"
#include "dtr/tree_common.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dtr {

struct TreeParams {
  int min_treated_per_leaf = 10;
  int min_control_per_leaf = 10;
  int max_split_buckets = 20;
  int cv_folds = 5;
  double honest_fraction = 0.5;
  std::uint64_t seed = 0;
  /// Cross-validated pruning after growth. Forest trees are grown without it.
  bool prune = true;
  /// 0 means unlimited.
  int max_depth = 0;
  /// Features drawn per split; 0 means all of them.
  int features_per_split = 0;
  /// Pick the simplest subtree whose CV score is within one standard error of the best.
  bool one_se_rule = true;

  void validate() const;
  nlohmann::json to_json() const;
  /// Keys missing from `j` keep the value in `base`.
  static TreeParams from_json(const nlohmann::json& j, const TreeParams& base);
  static TreeParams from_json(const nlohmann::json& j);
};

/// Weighted sufficient statistics of one treatment arm.
struct ArmStats {
  double count = 0;
  double sum_w = 0;
  double sum_wy = 0;
  double sum_wy2 = 0;
  double sum_w2 = 0;

  void add(double y, double w) noexcept {
    count += 1;
    sum_w += w;
    sum_wy += w * y;
    sum_wy2 += w * y * y;
    sum_w2 += w * w;
  }
  ArmStats& operator+=(const ArmStats& o) noexcept;
  ArmStats operator-(const ArmStats& o) const noexcept;

  double mean() const noexcept { return sum_w > 0 ? sum_wy / sum_w : 0.0; }
  /// Weighted variance with Bessel correction on the effective sample size (sum w)^2 / sum w^2.
  /// Zero when the effective size is at most one.
  double variance() const noexcept;
};

struct NodeStats {
  ArmStats treated;
  ArmStats control;

  void add(double y, int a, double w) noexcept { (a == 1 ? treated : control).add(y, w); }
  NodeStats& operator+=(const NodeStats& o) noexcept;
  NodeStats operator-(const NodeStats& o) const noexcept;

  double n() const noexcept { return treated.count + control.count; }
  bool has_both_arms() const noexcept { return treated.count > 0 && control.count > 0; }
  /// Weighted mean difference, treated minus control.
  double tau() const noexcept { return treated.mean() - control.mean(); }
};

/// -EMSE contribution of one leaf: (n_leaf / n_tr) tau^2 - (1/n_tr + 1/n_est) (S2_t / p + S2_c / (1 - p)),
/// p the leaf's treated fraction by count.
double emse_leaf_value(const NodeStats& leaf, double n_tr, double n_est);
/// Change in -EMSE when `parent` is replaced by `left` and `right`. A split is accepted
/// only when this is strictly positive.
double emse_split_gain(const NodeStats& parent, const NodeStats& left, const NodeStats& right, double n_tr,
                       double n_est);

/// Leaf estimate: weighted mean of treated outcomes minus weighted mean of control outcomes.
/// Throws DomainError unless both arms are represented among `members`.
double leaf_hte(std::span<const double> outcomes, std::span<const int> treatments,
                std::span<const double> weights, std::span<const std::size_t> members);

/// Random partition of 0..n-1. |train| = round(fraction * n), halves rounded away from
/// zero, so n = 5001 at 0.5 gives 2501 training indices. Both index lists are sorted.
struct HonestSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> est;
};
HonestSplit honest_split(std::size_t n, double fraction, std::uint64_t seed);

/// Read-only view of the data a tree is fit to. Rows of `x` are aligned with y, a and w.
struct CausalData {
  const Matrix& x;
  std::span<const double> y;
  std::span<const int> a;
  std::span<const double> w;

  std::size_t size() const noexcept { return y.size(); }
  std::span<const double> row(std::size_t i) const {
    return {x.data() + i * static_cast<std::size_t>(x.cols()), static_cast<std::size_t>(x.cols())};
  }
  void validate() const;
};

struct LeafRecord {
  double tau_hat = 0;
  int n_treated = 0;
  int n_control = 0;
  double var_treated = 0;
  double var_control = 0;
  double sum_weights_treated = 0;
  double sum_weights_control = 0;
  /// Estimation-half rows in this leaf (indices into the fitted data).
  std::vector<std::size_t> members;

  bool operator==(const LeafRecord&) const = default;
};

/// Records every row index read while choosing splits, for honesty audits.
struct GrowthAudit {
  std::vector<std::size_t> touched;
};

class CausalTree {
 public:
  CausalTree() = default;

  double predict(std::span<const double> h) const;
  std::size_t leaf_of(std::span<const double> h) const;

  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const std::vector<LeafRecord>& leaves() const noexcept { return leaves_; }
  /// Training-half statistics of every node, aligned with nodes().
  const std::vector<NodeStats>& train_stats() const noexcept { return train_stats_; }
  const std::vector<std::size_t>& train_indices() const noexcept { return train_; }
  const std::vector<std::size_t>& est_indices() const noexcept { return est_; }
  const TreeParams& params() const noexcept { return params_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t leaf_count() const noexcept { return leaves_.size(); }
  int depth() const noexcept;
  /// Complexity parameter chosen by cross-validation (0 when unpruned).
  double pruning_alpha() const noexcept { return alpha_; }

  /// Same structure and leaf estimates; index sets and params are ignored.
  bool structurally_equal(const CausalTree& other) const;

  /// `with_training` adds per-node training statistics and both index sets.
  nlohmann::json to_json(const std::vector<std::string>* column_names = nullptr, bool with_training = true) const;
  static CausalTree from_json(const nlohmann::json& j);

 private:
  friend class TreeBuilder;
  std::vector<TreeNode> nodes_;
  std::vector<NodeStats> train_stats_;
  std::vector<LeafRecord> leaves_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> est_;
  TreeParams params_;
  std::size_t width_ = 0;
  double alpha_ = 0;
};

/// Honest causal tree on all rows of `data`: split into training/estimation halves, grow on
/// the training half, optionally CV-prune, then estimate leaves on the estimation half.
/// Throws DegenerateFitError when even the root violates the leaf minima on either half.
CausalTree grow_tree(const CausalData& data, const TreeParams& params, GrowthAudit* audit = nullptr);
CausalTree grow_tree(const HistoryMatrix& history, std::span<const double> outcomes,
                     std::span<const int> treatments, std::span<const double> weights,
                     const TreeParams& params);
/// Same, restricted to the rows in `sample` (used by forests for subsampling).
CausalTree grow_tree_on(const CausalData& data, std::span<const std::size_t> sample, const TreeParams& params,
                        GrowthAudit* audit = nullptr);

/// Cost-complexity pruning of a grown tree. The pruning sequence comes from training-half
/// node values; each complexity level is scored by a held-out EMSE over `folds` folds of the
/// training half. Leaves of the result are re-estimated on the estimation half.
/// Throws DomainError when folds exceed the training size.
CausalTree cv_prune(const CausalTree& tree, const CausalData& data, int folds);

/// Collapses `tree` at complexity `alpha` (weakest link), re-estimating leaves on the
/// estimation half of `data`.
CausalTree prune_at(const CausalTree& tree, const CausalData& data, double alpha);

/// Weakest-link thresholds: alpha at which each internal node collapses. Leaves get +inf.
/// Values are non-decreasing from any node towards the root.
std::vector<double> collapse_alphas(const CausalTree& tree);

double predict_tree(const CausalTree& tree, std::span<const double> h);

}  // namespace dtr
