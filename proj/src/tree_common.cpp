#include "dtr/tree_common.hpp"

#include <algorithm>
#include <numeric>

namespace dtr {

nlohmann::json nodes_to_json(const std::vector<TreeNode>& nodes, const std::vector<std::string>* names) {
  auto out = nlohmann::json::array();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    nlohmann::json j{{"id", i}, {"depth", n.depth}};
    if (n.is_leaf()) {
      j["leaf"] = n.leaf;
    } else {
      j["feature"] = n.rule.feature;
      if (names && static_cast<std::size_t>(n.rule.feature) < names->size())
        j["feature_name"] = (*names)[static_cast<std::size_t>(n.rule.feature)];
      j["threshold"] = n.rule.threshold;
      j["left"] = n.left;
      j["right"] = n.right;
    }
    out.push_back(std::move(j));
  }
  return out;
}

std::vector<TreeNode> nodes_from_json(const nlohmann::json& j) {
  std::vector<TreeNode> nodes;
  nodes.reserve(j.size());
  for (const auto& e : j) {
    TreeNode n;
    n.depth = e.value("depth", 0);
    if (e.contains("leaf")) {
      n.leaf = e.at("leaf").get<int>();
    } else {
      n.rule.feature = e.at("feature").get<int>();
      n.rule.threshold = e.at("threshold").get<double>();
      n.left = e.at("left").get<int>();
      n.right = e.at("right").get<int>();
    }
    nodes.push_back(n);
  }
  return nodes;
}

std::vector<double> bucket_thresholds(std::span<const double> values, std::span<const double> weights,
                                      int buckets) {
  std::vector<double> out;
  if (values.size() < 2 || values.front() == values.back()) return out;
  const double vmax = values.back();

  std::size_t distinct = 1;
  for (std::size_t i = 1; i < values.size() && distinct <= static_cast<std::size_t>(buckets); ++i)
    if (values[i] != values[i - 1]) ++distinct;
  if (distinct <= static_cast<std::size_t>(buckets)) {
    for (std::size_t i = 0; i + 1 < values.size(); ++i)
      if (values[i] != values[i + 1]) out.push_back(values[i]);
    return out;
  }

  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double cum = 0.0;
  std::size_t pos = 0;
  for (int q = 1; q < buckets; ++q) {
    const double target = total * static_cast<double>(q) / static_cast<double>(buckets);
    while (pos < values.size() && cum + weights[pos] < target) cum += weights[pos++];
    if (pos >= values.size()) break;
    const double v = values[pos];
    if (v < vmax && (out.empty() || v > out.back())) out.push_back(v);
  }
  return out;
}

std::vector<int> sample_features(int d, int k, Rng& rng) {
  std::vector<int> all(static_cast<std::size_t>(d));
  std::iota(all.begin(), all.end(), 0);
  if (k <= 0 || k >= d) return all;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, d - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  all.resize(static_cast<std::size_t>(k));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace dtr
