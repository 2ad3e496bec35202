#pragma once

#include "dtr/common.hpp"

#include "json.hpp"

#include <span>
#include <vector>

namespace dtr {

/// Axis-aligned split: a row goes left iff h[feature] <= threshold. One-hot encoded
/// categorical columns are split the same way at threshold 0.
struct SplitRule {
  int feature = -1;
  double threshold = 0.0;

  bool goes_left(std::span<const double> h) const noexcept {
    return h[static_cast<std::size_t>(feature)] <= threshold;
  }
  bool operator==(const SplitRule&) const = default;
};

/// Node of a binary tree stored in preorder. Leaves carry `leaf >= 0`, an index into the
/// owning tree's leaf table; internal nodes carry a rule and two children.
struct TreeNode {
  SplitRule rule;
  int left = -1;
  int right = -1;
  int leaf = -1;
  int depth = 0;

  bool is_leaf() const noexcept { return leaf >= 0; }
  bool operator==(const TreeNode&) const = default;
};

/// Index of the leaf node reached by `h`. Routing is total: every finite row reaches a leaf.
inline std::size_t route_to_node(const std::vector<TreeNode>& nodes, std::span<const double> h) {
  std::size_t n = 0;
  while (!nodes[n].is_leaf())
    n = static_cast<std::size_t>(nodes[n].rule.goes_left(h) ? nodes[n].left : nodes[n].right);
  return n;
}

nlohmann::json nodes_to_json(const std::vector<TreeNode>& nodes,
                             const std::vector<std::string>* column_names = nullptr);
std::vector<TreeNode> nodes_from_json(const nlohmann::json& j);

/// Weighted quantile split candidates for one feature of a node.
/// `sorted_values` / `sorted_weights` are the node's values in ascending order. Returns at
/// most `buckets - 1` distinct thresholds strictly below the maximum value; when the node
/// holds no more than `buckets` distinct values every distinct value but the largest is used.
std::vector<double> bucket_thresholds(std::span<const double> sorted_values,
                                      std::span<const double> sorted_weights, int buckets);

/// Draws `k` distinct feature indices out of `d` (all of them when k <= 0 or k >= d),
/// returned in ascending order.
std::vector<int> sample_features(int d, int k, Rng& rng);

}  // namespace dtr
