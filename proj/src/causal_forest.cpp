#include "dtr/causal_forest.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>

namespace dtr {

namespace {
// Stream indices for seeds that are not per-tree.
constexpr std::uint64_t kFoldStream = 1ULL << 40;
constexpr std::uint64_t kNuisanceStream = 1ULL << 41;
constexpr double kMinDenominator = 1e-10;
}  // namespace

void ForestParams::validate() const {
  if (n_trees < 1) throw DomainError("forest needs at least one tree");
  if (!(subsample_fraction > 0 && subsample_fraction <= 1)) throw DomainError("subsample_fraction must lie in (0, 1]");
  if (crossfit_folds < 2) throw DomainError("crossfit_folds must be at least 2");
  if (nuisance_trees < 1 || nuisance_min_leaf < 1) throw DomainError("nuisance forest settings must be positive");
  if (features_per_split < -1) throw DomainError("features_per_split must be -1 (sqrt), 0 (all) or positive");
  tree.validate();
  propensity.validate();
}

int ForestParams::mtry(int d) const {
  if (features_per_split == -1) return std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d)))));
  return features_per_split;
}

nlohmann::json ForestParams::to_json() const {
  return {{"n_trees", n_trees},
          {"tree", tree.to_json()},
          {"subsample_fraction", subsample_fraction},
          {"features_per_split", features_per_split},
          {"crossfit_folds", crossfit_folds},
          {"nuisance_trees", nuisance_trees},
          {"nuisance_min_leaf", nuisance_min_leaf},
          {"center_outcomes", center_outcomes},
          {"clip_lo", propensity.clip_lo},
          {"clip_hi", propensity.clip_hi},
          {"seed", seed}};
}

ForestParams ForestParams::from_json(const nlohmann::json& j) {
  ForestParams p;
  p.n_trees = j.value("n_trees", p.n_trees);
  if (j.contains("tree")) p.tree = TreeParams::from_json(j.at("tree"), p.tree);
  p.subsample_fraction = j.value("subsample_fraction", p.subsample_fraction);
  p.features_per_split = j.value("features_per_split", p.features_per_split);
  p.crossfit_folds = j.value("crossfit_folds", p.crossfit_folds);
  p.nuisance_trees = j.value("nuisance_trees", p.nuisance_trees);
  p.nuisance_min_leaf = j.value("nuisance_min_leaf", p.nuisance_min_leaf);
  p.center_outcomes = j.value("center_outcomes", p.center_outcomes);
  p.propensity.clip_lo = j.value("clip_lo", p.propensity.clip_lo);
  p.propensity.clip_hi = j.value("clip_hi", p.propensity.clip_hi);
  p.seed = j.value("seed", p.seed);
  return p;
}

std::vector<int> crossfit_folds(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2 || static_cast<std::size_t>(k) > n)
    throw DomainError(fmt::format("cannot cross-fit {} rows over {} folds", n, k));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return fold;
}

namespace {

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::span<const double> row_of(const Matrix& x, std::size_t i) {
  return {x.data() + i * static_cast<std::size_t>(x.cols()), static_cast<std::size_t>(x.cols())};
}

}  // namespace

std::vector<double> crossfit_outcomes(const Matrix& x, std::span<const double> y, const std::vector<int>& folds,
                                      int n_folds, const RegressionForestParams& params, Execution exec) {
  std::vector<double> out(y.size(), 0.0);
  for (int k = 0; k < n_folds; ++k) {
    std::vector<std::size_t> fit;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (folds[i] != k) fit.push_back(i);
    auto p = params;
    p.seed = derive_seed(params.seed, static_cast<std::uint64_t>(k));
    const auto rf = grow_regression_forest(x, y, fit, p, exec);
    for (std::size_t i = 0; i < y.size(); ++i)
      if (folds[i] == k) out[i] = rf.predict(row_of(x, i));
  }
  return out;
}

std::vector<double> crossfit_propensities(const Matrix& x, std::span<const int> a, const std::vector<int>& folds,
                                          int n_folds, const PropensityOptions& options) {
  std::vector<double> out(a.size(), 0.0);
  for (int k = 0; k < n_folds; ++k) {
    std::vector<std::size_t> fit;
    std::vector<int> a_fit;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (folds[i] != k) {
        fit.push_back(i);
        a_fit.push_back(a[i]);
      }
    const auto model = fit_propensity(take_rows(x, fit), a_fit, options);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (folds[i] == k) out[i] = model.clip(predict_propensity(model, row_of(x, i)));
  }
  return out;
}

RegressionForestParams nuisance_params(const ForestParams& params, int d) {
  RegressionForestParams rp;
  rp.n_trees = params.nuisance_trees;
  rp.subsample_fraction = params.subsample_fraction;
  rp.tree.min_leaf = params.nuisance_min_leaf;
  rp.tree.max_split_buckets = params.tree.max_split_buckets;
  rp.tree.complexity = 0.0;
  rp.tree.features_per_split = params.mtry(d);
  rp.tree.honest = true;
  rp.seed = derive_seed(params.seed, kNuisanceStream);
  return rp;
}

CausalForest grow_forest(const CausalData& data, const ForestParams& params, Execution exec) {
  params.validate();
  data.validate();
  const std::size_t n = data.size();
  const int d = static_cast<int>(data.x.cols());
  std::size_t treated = 0;
  for (int a : data.a) treated += static_cast<std::size_t>(a);
  if (treated == 0 || treated == n) throw DomainError("causal forest needs both treatment arms");
  const auto min_total = 4u * static_cast<std::size_t>(params.tree.min_treated_per_leaf + params.tree.min_control_per_leaf);
  if (n < min_total)
    throw DegenerateFitError(fmt::format("causal forest needs at least {} rows for the leaf minima, got {}", min_total, n));

  CausalForest f;
  f.params_ = params;
  f.width_ = static_cast<std::size_t>(d);
  f.y_.assign(data.y.begin(), data.y.end());
  f.a_.assign(data.a.begin(), data.a.end());
  f.fold_ = crossfit_folds(n, params.crossfit_folds, derive_seed(params.seed, kFoldStream));

  f.y_hat_ = crossfit_outcomes(data.x, data.y, f.fold_, params.crossfit_folds, nuisance_params(params, d), exec);
  f.pi_hat_ = crossfit_propensities(data.x, data.a, f.fold_, params.crossfit_folds, params.propensity);

  std::vector<double> grow_y(n);
  for (std::size_t i = 0; i < n; ++i) grow_y[i] = params.center_outcomes ? data.y[i] - f.y_hat_[i] : data.y[i];
  const CausalData grow_data{data.x, grow_y, data.a, data.w};

  const int B = params.n_trees;
  const auto take = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(params.subsample_fraction * static_cast<double>(n))), 2, n);
  std::vector<CausalTree> trees(static_cast<std::size_t>(B));
  std::vector<std::vector<std::size_t>> subs(static_cast<std::size_t>(B));
  std::vector<char> ok(static_cast<std::size_t>(B), 0);
  std::exception_ptr failure;

  auto one = [&](int b) {
    TreeParams tp = params.tree;
    tp.seed = derive_seed(params.seed, static_cast<std::uint64_t>(b));
    tp.features_per_split = params.mtry(d);
    Rng rng(derive_seed(tp.seed, 0));
    std::vector<std::size_t> sub(n);
    std::iota(sub.begin(), sub.end(), std::size_t{0});
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(sub[i], sub[pick(rng)]);
    }
    sub.resize(take);
    std::sort(sub.begin(), sub.end());
    try {
      trees[static_cast<std::size_t>(b)] = grow_tree_on(grow_data, sub, tp);
      ok[static_cast<std::size_t>(b)] = 1;
    } catch (const DegenerateFitError& e) {
      logger().debug("forest tree {} skipped: {}", b, e.what());
    }
    subs[static_cast<std::size_t>(b)] = std::move(sub);
  };

  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap())
    for (int b = 0; b < B; ++b) {
      try {
        one(b);
      } catch (...) {
#pragma omp critical(dtr_forest_error)
        if (!failure) failure = std::current_exception();
      }
    }
  } else {
    for (int b = 0; b < B; ++b) one(b);
  }
  if (failure) std::rethrow_exception(failure);

  for (int b = 0; b < B; ++b) {
    if (!ok[static_cast<std::size_t>(b)]) {
      ++f.skipped_;
      continue;
    }
    f.trees_.push_back(std::move(trees[static_cast<std::size_t>(b)]));
    f.subsamples_.push_back(std::move(subs[static_cast<std::size_t>(b)]));
  }
  if (f.skipped_ > 0)
    logger().warn("causal forest: {} of {} trees skipped (degenerate subsample)", f.skipped_, B);
  if (static_cast<double>(f.skipped_) > 0.2 * B)
    throw DegenerateFitError(fmt::format("causal forest: {} of {} trees skipped, more than 20%", f.skipped_, B));
  f.index_leaves();
  return f;
}

CausalForest grow_forest(const HistoryMatrix& history, std::span<const double> outcomes,
                         std::span<const int> treatments, std::span<const double> weights,
                         const ForestParams& params, Execution exec) {
  return grow_forest(CausalData{history.rows, outcomes, treatments, weights}, params, exec);
}

void CausalForest::index_leaves() {
  sums_.assign(trees_.size(), {});
  for (std::size_t b = 0; b < trees_.size(); ++b) {
    const auto& leaves = trees_[b].leaves();
    auto& s = sums_[b];
    s.resize(leaves.size());
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      const auto& m = leaves[l].members;
      if (m.empty()) continue;
      s[l].inv_size = 1.0 / static_cast<double>(m.size());
      for (std::size_t j : m) {
        const double e = a_[j] - pi_hat_[j];
        s[l].re += (y_[j] - y_hat_[j]) * e;
        s[l].ee += e * e;
        (a_[j] == 1 ? s[l].treated : s[l].control) = true;
      }
    }
  }
}

void CausalForest::set_nuisance(std::vector<double> y, std::vector<double> y_hat, std::vector<double> pi_hat) {
  if (y.size() != y_.size() || y_hat.size() != y_.size() || pi_hat.size() != y_.size())
    throw DomainError("nuisance vectors must match the fitted size");
  y_ = std::move(y);
  y_hat_ = std::move(y_hat);
  pi_hat_ = std::move(pi_hat);
  index_leaves();
}

std::vector<double> CausalForest::kernel_weights(std::span<const double> h) const {
  if (h.size() != width_) throw DomainError(fmt::format("history width {} does not match forest width {}", h.size(), width_));
  std::vector<double> alpha(y_.size(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(trees_.size());
  bool any = false;
  for (const auto& t : trees_) {
    const auto& m = t.leaves()[t.leaf_of(h)].members;
    if (m.empty()) continue;
    any = true;
    const double share = inv_b / static_cast<double>(m.size());
    for (std::size_t j : m) alpha[j] += share;
  }
  if (!any) throw UndefinedEffectError("every tree routes the query to an empty leaf");
  return alpha;
}

double CausalForest::hte(std::span<const double> h) const {
  if (h.size() != width_) throw DomainError(fmt::format("history width {} does not match forest width {}", h.size(), width_));
  const double inv_b = 1.0 / static_cast<double>(trees_.size());
  double num = 0.0, den = 0.0;
  bool any = false, treated = false, control = false;
  for (std::size_t b = 0; b < trees_.size(); ++b) {
    const auto& s = sums_[b][trees_[b].leaf_of(h)];
    if (s.inv_size == 0.0) continue;
    any = true;
    treated |= s.treated;
    control |= s.control;
    num += s.inv_size * s.re;
    den += s.inv_size * s.ee;
  }
  if (!any) throw UndefinedEffectError("every tree routes the query to an empty leaf");
  if (!treated || !control) throw UndefinedEffectError("forest neighbourhood holds a single treatment arm");
  num *= inv_b;
  den *= inv_b;
  if (den < kMinDenominator)
    throw UndefinedEffectError(fmt::format("forest neighbourhood has no treatment variation (denominator {:.3g})", den));
  return num / den;
}

std::vector<double> CausalForest::predict(const Matrix& x, Execution exec) const {
  const auto n = static_cast<std::ptrdiff_t>(x.rows());
  std::vector<double> out(static_cast<std::size_t>(n));
  auto one = [&](std::ptrdiff_t i) {
    try {
      out[static_cast<std::size_t>(i)] = hte(row_of(x, static_cast<std::size_t>(i)));
    } catch (const UndefinedEffectError&) {
      out[static_cast<std::size_t>(i)] = std::numeric_limits<double>::quiet_NaN();
    }
  };
  if (static_cast<std::size_t>(x.cols()) != width_)
    throw DomainError(fmt::format("history width {} does not match forest width {}", x.cols(), width_));
  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::ptrdiff_t i = 0; i < n; ++i) one(i);
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) one(i);
  }
  return out;
}

std::vector<double> kernel_weights(const CausalForest& forest, std::span<const double> h) {
  return forest.kernel_weights(h);
}

double forest_hte(const CausalForest& forest, std::span<const double> h) { return forest.hte(h); }

double forest_hte_from(std::span<const double> alpha, std::span<const double> y, std::span<const double> y_hat,
                       std::span<const int> a, std::span<const double> pi_hat) {
  const std::size_t n = alpha.size();
  if (y.size() != n || y_hat.size() != n || a.size() != n || pi_hat.size() != n)
    throw DomainError("forest_hte_from inputs are misaligned");
  double num = 0.0, den = 0.0;
  bool treated = false, control = false;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = a[j] - pi_hat[j];
    num += alpha[j] * (y[j] - y_hat[j]) * e;
    den += alpha[j] * e * e;
    if (alpha[j] > 0) (a[j] == 1 ? treated : control) = true;
  }
  if (!treated || !control) throw UndefinedEffectError("neighbourhood holds a single treatment arm");
  if (den < kMinDenominator)
    throw UndefinedEffectError(fmt::format("neighbourhood has no treatment variation (denominator {:.3g})", den));
  return num / den;
}

std::vector<double> CausalForest::variable_importance(int max_depth, double decay) const {
  std::vector<std::vector<double>> counts(static_cast<std::size_t>(max_depth), std::vector<double>(width_, 0.0));
  for (const auto& t : trees_)
    for (const auto& n : t.nodes())
      if (!n.is_leaf() && n.depth < max_depth)
        counts[static_cast<std::size_t>(n.depth)][static_cast<std::size_t>(n.rule.feature)] += 1.0;
  std::vector<double> imp(width_, 0.0);
  for (int k = 0; k < max_depth; ++k) {
    const auto& c = counts[static_cast<std::size_t>(k)];
    const double total = std::accumulate(c.begin(), c.end(), 0.0);
    if (total == 0) continue;
    const double w = std::pow(static_cast<double>(k + 1), -decay);
    for (std::size_t f = 0; f < width_; ++f) imp[f] += w * c[f] / total;
  }
  const double s = std::accumulate(imp.begin(), imp.end(), 0.0);
  if (s > 0)
    for (double& v : imp) v /= s;
  return imp;
}

bool CausalForest::structurally_equal(const CausalForest& o) const {
  if (trees_.size() != o.trees_.size() || y_hat_ != o.y_hat_ || pi_hat_ != o.pi_hat_ || subsamples_ != o.subsamples_)
    return false;
  for (std::size_t b = 0; b < trees_.size(); ++b)
    if (!trees_[b].structurally_equal(o.trees_[b]) || trees_[b].leaves() != o.trees_[b].leaves()) return false;
  return true;
}

nlohmann::json CausalForest::to_json() const {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : trees_) trees.push_back(t.to_json(nullptr, false));
  return {{"type", "causal_forest"},
          {"width", width_},
          {"params", params_.to_json()},
          {"skipped_trees", skipped_},
          {"outcomes", y_},
          {"treatments", a_},
          {"outcome_oob", y_hat_},
          {"propensity_oob", pi_hat_},
          {"folds", fold_},
          {"trees", std::move(trees)}};
}

CausalForest CausalForest::from_json(const nlohmann::json& j) {
  CausalForest f;
  f.width_ = j.at("width").get<std::size_t>();
  f.params_ = ForestParams::from_json(j.at("params"));
  f.skipped_ = j.value("skipped_trees", std::size_t{0});
  f.y_ = j.at("outcomes").get<std::vector<double>>();
  f.a_ = j.at("treatments").get<std::vector<int>>();
  f.y_hat_ = j.at("outcome_oob").get<std::vector<double>>();
  f.pi_hat_ = j.at("propensity_oob").get<std::vector<double>>();
  f.fold_ = j.value("folds", std::vector<int>{});
  const std::size_t n = f.y_.size();
  if (f.a_.size() != n || f.y_hat_.size() != n || f.pi_hat_.size() != n)
    throw SchemaError("outcomes", "forest JSON per-row vectors differ in length");
  for (const auto& t : j.at("trees")) {
    f.trees_.push_back(CausalTree::from_json(t));
    for (const auto& leaf : f.trees_.back().leaves())
      for (std::size_t m : leaf.members)
        if (m >= n) throw SchemaError("trees", "forest JSON leaf member out of range");
  }
  if (f.trees_.empty()) throw SchemaError("trees", "forest JSON holds no trees");
  f.index_leaves();
  return f;
}

nlohmann::json CausalForest::summary_json(const std::vector<std::string>& names) const {
  const auto imp = variable_importance();
  nlohmann::json vi = nlohmann::json::array();
  std::vector<std::size_t> order(imp.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t u, std::size_t v) { return imp[u] > imp[v]; });
  for (std::size_t f : order)
    vi.push_back({{"feature", f}, {"name", f < names.size() ? names[f] : fmt::format("h{}", f)}, {"importance", imp[f]}});
  double leaves = 0, depth = 0;
  for (const auto& t : trees_) {
    leaves += static_cast<double>(t.leaf_count());
    depth += t.depth();
  }
  const double b = static_cast<double>(std::max<std::size_t>(trees_.size(), 1));
  return {{"type", "causal_forest_summary"},
          {"n_trees", trees_.size()},
          {"skipped_trees", skipped_},
          {"mean_leaves", leaves / b},
          {"mean_depth", depth / b},
          {"variable_importance", std::move(vi)}};
}

}  // namespace dtr
