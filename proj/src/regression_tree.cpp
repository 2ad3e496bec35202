#include "dtr/regression_tree.hpp"

#include "dtr/causal_tree.hpp"
#include "dtr/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>

namespace dtr {

void RegressionTreeParams::validate() const {
  if (min_leaf < 1) throw DomainError("regression tree min_leaf must be at least 1");
  if (max_split_buckets < 2) throw DomainError("max_split_buckets must be at least 2");
  if (complexity < 0) throw DomainError("complexity must be non-negative");
  if (honest && !(honest_fraction > 0 && honest_fraction < 1)) throw DomainError("honest_fraction must lie in (0, 1)");
}

nlohmann::json RegressionTreeParams::to_json() const {
  return {{"min_leaf", min_leaf},     {"max_split_buckets", max_split_buckets},
          {"complexity", complexity}, {"features_per_split", features_per_split},
          {"max_depth", max_depth},   {"honest", honest},
          {"honest_fraction", honest_fraction}, {"seed", seed}};
}

RegressionTreeParams RegressionTreeParams::from_json(const nlohmann::json& j) {
  RegressionTreeParams p;
  p.min_leaf = j.value("min_leaf", p.min_leaf);
  p.max_split_buckets = j.value("max_split_buckets", p.max_split_buckets);
  p.complexity = j.value("complexity", p.complexity);
  p.features_per_split = j.value("features_per_split", p.features_per_split);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.honest = j.value("honest", p.honest);
  p.honest_fraction = j.value("honest_fraction", p.honest_fraction);
  p.seed = j.value("seed", p.seed);
  return p;
}

namespace {

struct Moments {
  double n = 0, s = 0, s2 = 0;
  void add(double y) {
    n += 1;
    s += y;
    s2 += y * y;
  }
  double sse() const { return n > 0 ? std::max(s2 - s * s / n, 0.0) : 0.0; }
};

struct Grower {
  const Matrix& x;
  std::span<const double> y;
  const RegressionTreeParams& p;
  Rng rng;
  double shift;
  double min_gain;
  std::vector<TreeNode>& nodes;

  int grow(std::vector<std::size_t>& idx, int depth) {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(TreeNode{{}, -1, -1, -1, depth});
    Moments total;
    for (std::size_t r : idx) total.add(y[r] - shift);

    SplitRule best;
    double best_gain = 0.0;
    if ((p.max_depth == 0 || depth < p.max_depth) && total.n >= 2.0 * p.min_leaf) {
      const auto features = sample_features(static_cast<int>(x.cols()), p.features_per_split, rng);
      std::vector<std::pair<double, std::size_t>> items(idx.size());
      std::vector<double> values(idx.size()), ones(idx.size(), 1.0);
      for (int f : features) {
        for (std::size_t i = 0; i < idx.size(); ++i) items[i] = {x(static_cast<Eigen::Index>(idx[i]), f), idx[i]};
        std::sort(items.begin(), items.end());
        if (items.front().first == items.back().first) continue;
        for (std::size_t i = 0; i < items.size(); ++i) values[i] = items[i].first;
        const auto thresholds = bucket_thresholds(values, ones, p.max_split_buckets);
        Moments left;
        std::size_t pos = 0;
        for (double t : thresholds) {
          while (pos < items.size() && items[pos].first <= t) left.add(y[items[pos++].second] - shift);
          const Moments right{total.n - left.n, total.s - left.s, total.s2 - left.s2};
          if (left.n < p.min_leaf || right.n < p.min_leaf) continue;
          const double gain = total.sse() - left.sse() - right.sse();
          if (gain > best_gain && gain >= min_gain) {
            best_gain = gain;
            best = {f, t};
          }
        }
      }
    }
    if (best.feature < 0) {
      nodes[static_cast<std::size_t>(id)].leaf = 0;  // renumbered by the caller
      return id;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t r : idx) (x(static_cast<Eigen::Index>(r), best.feature) <= best.threshold ? left : right).push_back(r);
    idx.clear();
    idx.shrink_to_fit();
    nodes[static_cast<std::size_t>(id)].rule = best;
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    nodes[static_cast<std::size_t>(id)].left = l;
    nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }
};

}  // namespace

RegressionTree grow_regression_tree(const Matrix& x, std::span<const double> y, std::span<const std::size_t> rows,
                                    const RegressionTreeParams& params) {
  params.validate();
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw DomainError("regression tree inputs are misaligned");
  std::vector<std::size_t> sample(rows.begin(), rows.end());
  if (sample.empty()) {
    sample.resize(y.size());
    std::iota(sample.begin(), sample.end(), std::size_t{0});
  }
  if (sample.empty()) throw DomainError("regression tree needs at least one row");

  std::vector<std::size_t> structure = sample, fill = sample;
  if (params.honest && sample.size() >= 2) {
    const auto split = honest_split(sample.size(), params.honest_fraction, derive_seed(params.seed, 1));
    structure.clear();
    fill.clear();
    for (std::size_t i : split.train) structure.push_back(sample[i]);
    for (std::size_t i : split.est) fill.push_back(sample[i]);
  }

  RegressionTree t;
  t.width_ = static_cast<std::size_t>(x.cols());
  Moments root;
  const double shift = y[structure.front()];
  for (std::size_t r : structure) root.add(y[r] - shift);
  Grower g{x, y, params, Rng(derive_seed(params.seed, 3)), shift, params.complexity * root.sse(), t.nodes_};
  g.grow(structure, 0);

  int leaves = 0;
  for (auto& n : t.nodes_)
    if (n.leaf >= 0) n.leaf = leaves++;
  std::vector<double> sums(static_cast<std::size_t>(leaves), 0.0);
  t.counts_.assign(static_cast<std::size_t>(leaves), 0);
  for (std::size_t r : fill) {
    const std::span<const double> h(x.data() + r * t.width_, t.width_);
    const auto leaf = static_cast<std::size_t>(t.nodes_[route_to_node(t.nodes_, h)].leaf);
    sums[leaf] += y[r];
    ++t.counts_[leaf];
  }
  t.values_.resize(static_cast<std::size_t>(leaves));
  for (std::size_t l = 0; l < t.values_.size(); ++l)
    t.values_[l] = t.counts_[l] ? sums[l] / static_cast<double>(t.counts_[l]) : std::numeric_limits<double>::quiet_NaN();
  return t;
}

double RegressionTree::predict(std::span<const double> h) const {
  if (h.size() != width_)
    throw DomainError(fmt::format("history width {} does not match regression tree width {}", h.size(), width_));
  return values_[static_cast<std::size_t>(nodes_[route_to_node(nodes_, h)].leaf)];
}

nlohmann::json RegressionTree::to_json(const std::vector<std::string>* names) const {
  nlohmann::json values = nlohmann::json::array();
  for (double v : values_) values.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
  return {{"type", "regression_tree"},
          {"width", width_},
          {"nodes", nodes_to_json(nodes_, names)},
          {"leaf_values", std::move(values)},
          {"leaf_counts", counts_}};
}

RegressionTree RegressionTree::from_json(const nlohmann::json& j) {
  RegressionTree t;
  t.width_ = j.at("width").get<std::size_t>();
  t.nodes_ = nodes_from_json(j.at("nodes"));
  for (const auto& v : j.at("leaf_values"))
    t.values_.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  t.counts_ = j.at("leaf_counts").get<std::vector<std::size_t>>();
  for (const auto& n : t.nodes_)
    if (n.is_leaf() && static_cast<std::size_t>(n.leaf) >= t.values_.size())
      throw SchemaError("leaf_values", "regression tree JSON references a missing leaf");
  return t;
}

double RegressionForest::predict(std::span<const double> h) const {
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& t : trees_) {
    const double v = t.predict(h);
    if (std::isfinite(v)) {
      sum += v;
      ++used;
    }
  }
  return used ? sum / static_cast<double>(used) : fallback_;
}

RegressionForest grow_regression_forest(const Matrix& x, std::span<const double> y, std::span<const std::size_t> rows,
                                        const RegressionForestParams& params, Execution exec) {
  if (params.n_trees < 1) throw DomainError("regression forest needs at least one tree");
  if (!(params.subsample_fraction > 0 && params.subsample_fraction <= 1))
    throw DomainError("subsample_fraction must lie in (0, 1]");
  std::vector<std::size_t> pool(rows.begin(), rows.end());
  if (pool.empty()) {
    pool.resize(y.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
  }
  RegressionForest f;
  double s = 0;
  for (std::size_t r : pool) s += y[r];
  f.fallback_ = s / static_cast<double>(pool.size());
  const auto m = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::lround(params.subsample_fraction * static_cast<double>(pool.size()))));
  const auto take = std::min(m, pool.size());

  f.trees_.resize(static_cast<std::size_t>(params.n_trees));
  std::exception_ptr failure;
  const int B = params.n_trees;
  auto one = [&](int b) {
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(b)));
    std::vector<std::size_t> sub = pool;
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, sub.size() - 1);
      std::swap(sub[i], sub[pick(rng)]);
    }
    sub.resize(take);
    std::sort(sub.begin(), sub.end());
    auto tp = params.tree;
    tp.seed = derive_seed(params.seed ^ 0x5eedULL, static_cast<std::uint64_t>(b));
    f.trees_[static_cast<std::size_t>(b)] = grow_regression_tree(x, y, sub, tp);
  };
  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap())
    for (int b = 0; b < B; ++b) {
      try {
        one(b);
      } catch (...) {
#pragma omp critical(dtr_regforest_error)
        if (!failure) failure = std::current_exception();
      }
    }
  } else {
    for (int b = 0; b < B; ++b) one(b);
  }
  if (failure) std::rethrow_exception(failure);
  return f;
}

}  // namespace dtr
