#include "dtr/causal_tree.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dtr {

void TreeParams::validate() const {
  if (min_treated_per_leaf < 1 || min_control_per_leaf < 1) throw DomainError("leaf minima must be at least 1");
  if (!(honest_fraction > 0.0 && honest_fraction < 1.0))
    throw DomainError(fmt::format("honest_fraction must lie in (0, 1), got {}", honest_fraction));
  if (max_split_buckets < 2) throw DomainError("max_split_buckets must be at least 2");
  if (cv_folds < 2) throw DomainError("cv_folds must be at least 2");
  if (max_depth < 0 || features_per_split < 0) throw DomainError("max_depth and features_per_split must be >= 0");
}

nlohmann::json TreeParams::to_json() const {
  return {{"min_treated_per_leaf", min_treated_per_leaf},
          {"min_control_per_leaf", min_control_per_leaf},
          {"max_split_buckets", max_split_buckets},
          {"cv_folds", cv_folds},
          {"honest_fraction", honest_fraction},
          {"seed", seed},
          {"prune", prune},
          {"max_depth", max_depth},
          {"features_per_split", features_per_split},
          {"one_se_rule", one_se_rule}};
}

TreeParams TreeParams::from_json(const nlohmann::json& j) { return from_json(j, TreeParams{}); }

TreeParams TreeParams::from_json(const nlohmann::json& j, const TreeParams& base) {
  TreeParams p = base;
  p.min_treated_per_leaf = j.value("min_treated_per_leaf", p.min_treated_per_leaf);
  p.min_control_per_leaf = j.value("min_control_per_leaf", p.min_control_per_leaf);
  p.max_split_buckets = j.value("max_split_buckets", p.max_split_buckets);
  p.cv_folds = j.value("cv_folds", p.cv_folds);
  p.honest_fraction = j.value("honest_fraction", p.honest_fraction);
  p.seed = j.value("seed", p.seed);
  p.prune = j.value("prune", p.prune);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.features_per_split = j.value("features_per_split", p.features_per_split);
  p.one_se_rule = j.value("one_se_rule", p.one_se_rule);
  return p;
}

ArmStats& ArmStats::operator+=(const ArmStats& o) noexcept {
  count += o.count;
  sum_w += o.sum_w;
  sum_wy += o.sum_wy;
  sum_wy2 += o.sum_wy2;
  sum_w2 += o.sum_w2;
  return *this;
}

ArmStats ArmStats::operator-(const ArmStats& o) const noexcept {
  return {count - o.count, sum_w - o.sum_w, sum_wy - o.sum_wy, sum_wy2 - o.sum_wy2, sum_w2 - o.sum_w2};
}

double ArmStats::variance() const noexcept {
  if (sum_w <= 0 || sum_w2 <= 0) return 0.0;
  const double n_eff = sum_w * sum_w / sum_w2;
  if (n_eff <= 1.0 + 1e-12) return 0.0;
  const double m = sum_wy / sum_w;
  const double raw = std::max(sum_wy2 / sum_w - m * m, 0.0);
  return raw * n_eff / (n_eff - 1.0);
}

NodeStats& NodeStats::operator+=(const NodeStats& o) noexcept {
  treated += o.treated;
  control += o.control;
  return *this;
}

NodeStats NodeStats::operator-(const NodeStats& o) const noexcept { return {treated - o.treated, control - o.control}; }

double emse_leaf_value(const NodeStats& s, double n_tr, double n_est) {
  const double n = s.n();
  if (!s.has_both_arms()) return -std::numeric_limits<double>::infinity();
  const double p = s.treated.count / n;
  const double tau = s.tau();
  const double penalty = s.treated.variance() / p + s.control.variance() / (1.0 - p);
  return (n / n_tr) * tau * tau - (1.0 / n_tr + 1.0 / n_est) * penalty;
}

double emse_split_gain(const NodeStats& parent, const NodeStats& left, const NodeStats& right, double n_tr,
                       double n_est) {
  return emse_leaf_value(left, n_tr, n_est) + emse_leaf_value(right, n_tr, n_est) -
         emse_leaf_value(parent, n_tr, n_est);
}

double leaf_hte(std::span<const double> y, std::span<const int> a, std::span<const double> w,
                std::span<const std::size_t> members) {
  double wt = 0, wyt = 0, wc = 0, wyc = 0;
  for (std::size_t i : members) {
    if (i >= y.size() || i >= a.size() || i >= w.size()) throw DomainError("leaf member index out of range");
    if (a[i] == 1) {
      wt += w[i];
      wyt += w[i] * y[i];
    } else {
      wc += w[i];
      wyc += w[i] * y[i];
    }
  }
  if (wt <= 0 || wc <= 0) throw DomainError("leaf_hte needs at least one treated and one control member");
  return wyt / wt - wyc / wc;
}

HonestSplit honest_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (n < 2) throw DomainError(fmt::format("honest_split needs n >= 2, got {}", n));
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("honest fraction must lie in (0, 1)");
  auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  HonestSplit s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.est.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.est.begin(), s.est.end());
  return s;
}

void CausalData::validate() const {
  const auto n = static_cast<std::size_t>(x.rows());
  if (y.size() != n || a.size() != n || w.size() != n)
    throw DomainError(fmt::format("tree inputs are misaligned: {} rows, {} outcomes, {} treatments, {} weights",
                                  n, y.size(), a.size(), w.size()));
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] != 0 && a[i] != 1) throw DomainError("treatments must be binary");
    if (!std::isfinite(y[i])) throw DomainError(fmt::format("non-finite outcome at row {}", i));
    if (!(w[i] > 0) || !std::isfinite(w[i])) throw DomainError(fmt::format("weights must be positive (row {})", i));
  }
}

namespace {

struct Item {
  double value;
  std::size_t row;
};

bool satisfies_minima(const NodeStats& s, const TreeParams& p) {
  return s.treated.count >= p.min_treated_per_leaf && s.control.count >= p.min_control_per_leaf;
}

}  // namespace

class TreeBuilder {
 public:
  // Grows the split structure on `train`. `n_est` is the size of the estimation half the
  // criterion anticipates.
  static CausalTree grow_structure(const CausalData& d, std::vector<std::size_t> train, std::vector<std::size_t> est,
                                   double n_est, const TreeParams& p, std::uint64_t feature_seed,
                                   GrowthAudit* audit) {
    CausalTree t;
    t.params_ = p;
    t.width_ = static_cast<std::size_t>(d.x.cols());
    t.train_ = std::move(train);
    t.est_ = std::move(est);
    TreeBuilder b(d, p, static_cast<double>(t.train_.size()), n_est, feature_seed, audit, t);
    std::vector<std::size_t> idx = t.train_;
    NodeStats root = b.accumulate(idx);
    if (!satisfies_minima(root, p))
      throw DegenerateFitError(fmt::format("training half cannot satisfy leaf minima at the root "
                                           "({} treated, {} control; need {} and {})",
                                           root.treated.count, root.control.count, p.min_treated_per_leaf,
                                           p.min_control_per_leaf));
    b.grow(idx, root, 0);
    return t;
  }

  // Keeps nodes with keep[node] (others collapse into the nearest kept-leaf ancestor),
  // re-estimates leaves on the estimation half and collapses parents of leaves that miss
  // the minima there.
  static CausalTree finalize(const CausalTree& src, const CausalData& d, std::vector<bool> is_leaf) {
    const auto& nodes = src.nodes_;
    std::vector<int> parent(nodes.size(), -1);
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (!nodes[i].is_leaf()) {
        parent[static_cast<std::size_t>(nodes[i].left)] = static_cast<int>(i);
        parent[static_cast<std::size_t>(nodes[i].right)] = static_cast<int>(i);
      }

    // Estimation-half counts for every node, accumulated along each row's path.
    std::vector<NodeStats> est(nodes.size());
    for (std::size_t r : src.est_) {
      std::size_t n = 0;
      for (;;) {
        est[n].add(0.0, d.a[r], 1.0);
        if (nodes[n].is_leaf()) break;
        n = static_cast<std::size_t>(nodes[n].rule.goes_left(d.row(r)) ? nodes[n].left : nodes[n].right);
      }
    }
    const TreeParams& p = src.params_;
    if (!src.est_.empty() && !satisfies_minima(est[0], p))
      throw DegenerateFitError(fmt::format("estimation half cannot satisfy leaf minima at the root "
                                           "({} treated, {} control)",
                                           est[0].treated.count, est[0].control.count));

    // Repair: a reachable leaf failing the minima collapses its parent.
    for (bool changed = true; changed && !src.est_.empty();) {
      changed = false;
      std::vector<std::size_t> stack{0};
      while (!stack.empty()) {
        const std::size_t n = stack.back();
        stack.pop_back();
        if (is_leaf[n]) {
          if (n != 0 && !satisfies_minima(est[n], p)) {
            is_leaf[static_cast<std::size_t>(parent[n])] = true;
            changed = true;
          }
          continue;
        }
        stack.push_back(static_cast<std::size_t>(nodes[n].right));
        stack.push_back(static_cast<std::size_t>(nodes[n].left));
      }
    }

    CausalTree out;
    out.params_ = src.params_;
    out.width_ = src.width_;
    out.train_ = src.train_;
    out.est_ = src.est_;
    out.alpha_ = src.alpha_;
    copy_subtree(src, is_leaf, 0, 0, out);

    // Leaf estimates from the estimation half.
    std::vector<std::vector<std::size_t>> members(out.leaves_.size());
    for (std::size_t r : out.est_) members[static_cast<std::size_t>(out.nodes_[route_to_node(out.nodes_, d.row(r))].leaf)].push_back(r);
    const double shift = d.size() ? d.y[out.train_.empty() ? 0 : out.train_.front()] : 0.0;
    for (std::size_t l = 0; l < out.leaves_.size(); ++l) {
      auto& rec = out.leaves_[l];
      NodeStats s;
      for (std::size_t r : members[l]) s.add(d.y[r] - shift, d.a[r], d.w[r]);
      rec.members = std::move(members[l]);
      rec.n_treated = static_cast<int>(s.treated.count);
      rec.n_control = static_cast<int>(s.control.count);
      rec.var_treated = s.treated.variance();
      rec.var_control = s.control.variance();
      rec.sum_weights_treated = s.treated.sum_w;
      rec.sum_weights_control = s.control.sum_w;
      if (s.has_both_arms()) {
        rec.tau_hat = leaf_hte(d.y, d.a, d.w, rec.members);
      } else {
        // Only reachable without an estimation half; fall back to the training estimate.
        rec.tau_hat = out.train_stats_[leaf_node(out, l)].tau();
      }
    }
    return out;
  }

 private:
  TreeBuilder(const CausalData& d, const TreeParams& p, double n_tr, double n_est, std::uint64_t feature_seed,
              GrowthAudit* audit, CausalTree& out)
      : d_(d), p_(p), n_tr_(n_tr), n_est_(n_est), rng_(feature_seed), audit_(audit), out_(out) {
    shift_ = out.train_.empty() ? 0.0 : d.y[out.train_.front()];
  }

  NodeStats accumulate(std::span<const std::size_t> idx) {
    NodeStats s;
    for (std::size_t r : idx) {
      if (audit_) audit_->touched.push_back(r);
      s.add(d_.y[r] - shift_, d_.a[r], d_.w[r]);
    }
    return s;
  }

  int grow(std::vector<std::size_t>& idx, const NodeStats& stats, int depth) {
    const int id = static_cast<int>(out_.nodes_.size());
    out_.nodes_.push_back(TreeNode{{}, -1, -1, -1, depth});
    out_.train_stats_.push_back(stats);

    SplitRule best;
    double best_gain = 0.0;
    NodeStats best_left;
    if (p_.max_depth == 0 || depth < p_.max_depth) find_split(idx, stats, best, best_gain, best_left);

    if (best.feature < 0) {
      out_.nodes_[static_cast<std::size_t>(id)].leaf = static_cast<int>(out_.leaves_.size());
      out_.leaves_.emplace_back();
      return id;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t r : idx) (best.goes_left(d_.row(r)) ? left : right).push_back(r);
    idx.clear();
    idx.shrink_to_fit();
    const NodeStats right_stats = stats - best_left;
    out_.nodes_[static_cast<std::size_t>(id)].rule = best;
    const int l = grow(left, best_left, depth + 1);
    const int r = grow(right, right_stats, depth + 1);
    out_.nodes_[static_cast<std::size_t>(id)].left = l;
    out_.nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void find_split(const std::vector<std::size_t>& idx, const NodeStats& total, SplitRule& best, double& best_gain,
                  NodeStats& best_left) {
    const int d = static_cast<int>(d_.x.cols());
    if (total.treated.count < 2.0 * p_.min_treated_per_leaf || total.control.count < 2.0 * p_.min_control_per_leaf)
      return;
    const auto features = sample_features(d, p_.features_per_split, rng_);
    std::vector<Item> items(idx.size());
    std::vector<double> values(idx.size()), weights(idx.size());
    for (int f : features) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        items[i] = {d_.x(static_cast<Eigen::Index>(idx[i]), f), idx[i]};
      std::sort(items.begin(), items.end(),
                [](const Item& u, const Item& v) { return u.value < v.value || (u.value == v.value && u.row < v.row); });
      if (items.front().value == items.back().value) continue;
      for (std::size_t i = 0; i < items.size(); ++i) {
        values[i] = items[i].value;
        weights[i] = d_.w[items[i].row];
      }
      const auto thresholds = bucket_thresholds(values, weights, p_.max_split_buckets);
      NodeStats left;
      std::size_t pos = 0;
      for (double t : thresholds) {
        while (pos < items.size() && items[pos].value <= t) {
          const std::size_t r = items[pos].row;
          left.add(d_.y[r] - shift_, d_.a[r], d_.w[r]);
          ++pos;
        }
        const NodeStats right = total - left;
        if (!satisfies_minima(left, p_) || !satisfies_minima(right, p_)) continue;
        const double gain = emse_split_gain(total, left, right, n_tr_, n_est_);
        if (gain > best_gain) {
          best_gain = gain;
          best = {f, t};
          best_left = left;
        }
      }
    }
  }

  static std::size_t leaf_node(const CausalTree& t, std::size_t leaf) {
    for (std::size_t i = 0; i < t.nodes_.size(); ++i)
      if (t.nodes_[i].leaf == static_cast<int>(leaf)) return i;
    return 0;
  }

  static int copy_subtree(const CausalTree& src, const std::vector<bool>& is_leaf, std::size_t n, int depth,
                          CausalTree& out) {
    const int id = static_cast<int>(out.nodes_.size());
    TreeNode node = src.nodes_[n];
    node.depth = depth;
    out.nodes_.push_back(node);
    out.train_stats_.push_back(src.train_stats_[n]);
    if (is_leaf[n] || src.nodes_[n].is_leaf()) {
      auto& me = out.nodes_[static_cast<std::size_t>(id)];
      me.rule = {};
      me.left = me.right = -1;
      me.leaf = static_cast<int>(out.leaves_.size());
      out.leaves_.emplace_back();
      return id;
    }
    const int l = copy_subtree(src, is_leaf, static_cast<std::size_t>(src.nodes_[n].left), depth + 1, out);
    const int r = copy_subtree(src, is_leaf, static_cast<std::size_t>(src.nodes_[n].right), depth + 1, out);
    out.nodes_[static_cast<std::size_t>(id)].left = l;
    out.nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  const CausalData& d_;
  const TreeParams& p_;
  double n_tr_;
  double n_est_;
  Rng rng_;
  GrowthAudit* audit_;
  CausalTree& out_;
  double shift_ = 0.0;

 public:
  static std::vector<bool> leaf_mask(const CausalTree& t) {
    std::vector<bool> m(t.nodes_.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = t.nodes_[i].is_leaf();
    return m;
  }
  static void set_alpha(CausalTree& t, double a) { t.alpha_ = a; }
};

namespace {

// Weakest-link collapse thresholds for a node table with training statistics.
std::vector<double> weakest_link(const std::vector<TreeNode>& nodes, const std::vector<NodeStats>& stats, double n_tr,
                                 double n_est) {
  const std::size_t m = nodes.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> alpha(m, inf);
  std::vector<bool> collapsed(m, false);
  std::vector<double> own(m);
  for (std::size_t i = 0; i < m; ++i) own[i] = emse_leaf_value(stats[i], n_tr, n_est);

  std::vector<double> q(m), leaves(m);
  double level = 0.0;
  for (;;) {
    // Post-order pass; children have larger indices in preorder storage.
    double g_min = inf;
    for (std::size_t k = m; k-- > 0;) {
      if (nodes[k].is_leaf() || collapsed[k]) {
        q[k] = own[k];
        leaves[k] = 1;
        continue;
      }
      const auto l = static_cast<std::size_t>(nodes[k].left), r = static_cast<std::size_t>(nodes[k].right);
      q[k] = q[l] + q[r];
      leaves[k] = leaves[l] + leaves[r];
    }
    std::vector<double> g(m, inf);
    for (std::size_t k = 0; k < m; ++k) {
      if (nodes[k].is_leaf() || collapsed[k]) continue;
      g[k] = (q[k] - own[k]) / (leaves[k] - 1);
      g_min = std::min(g_min, g[k]);
    }
    if (g_min == inf) break;
    level = std::max(level, g_min);
    const double tol = 1e-12 * std::max(1.0, std::abs(g_min));
    for (std::size_t k = 0; k < m; ++k)
      if (g[k] <= g_min + tol && !collapsed[k]) {
        // Collapse k and everything below it that is still open.
        std::vector<std::size_t> stack{k};
        while (!stack.empty()) {
          const std::size_t n = stack.back();
          stack.pop_back();
          if (nodes[n].is_leaf() || collapsed[n]) continue;
          collapsed[n] = true;
          alpha[n] = level;
          stack.push_back(static_cast<std::size_t>(nodes[n].left));
          stack.push_back(static_cast<std::size_t>(nodes[n].right));
        }
      }
  }
  return alpha;
}

std::vector<bool> mask_at(const std::vector<TreeNode>& nodes, const std::vector<double>& alphas, double alpha) {
  std::vector<bool> m(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) m[i] = nodes[i].is_leaf() || alphas[i] <= alpha;
  return m;
}

}  // namespace

std::vector<double> collapse_alphas(const CausalTree& tree) {
  return weakest_link(tree.nodes(), tree.train_stats(), static_cast<double>(tree.train_indices().size()),
                      static_cast<double>(std::max<std::size_t>(tree.est_indices().size(), 1)));
}

CausalTree prune_at(const CausalTree& tree, const CausalData& data, double alpha) {
  auto out = TreeBuilder::finalize(tree, data, mask_at(tree.nodes(), collapse_alphas(tree), alpha));
  TreeBuilder::set_alpha(out, alpha);
  return out;
}

CausalTree cv_prune(const CausalTree& tree, const CausalData& data, int folds) {
  const auto& train = tree.train_indices();
  if (folds < 2) throw DomainError("cv_prune needs at least 2 folds");
  if (static_cast<std::size_t>(folds) > train.size())
    throw DomainError(fmt::format("{} folds exceed the training half of {} rows", folds, train.size()));
  if (tree.leaf_count() <= 1) return TreeBuilder::finalize(tree, data, TreeBuilder::leaf_mask(tree));

  const TreeParams& p = tree.params();
  const double n_est = static_cast<double>(std::max<std::size_t>(tree.est_indices().size(), 1));
  const auto main_alpha = collapse_alphas(tree);

  // Candidate complexity levels: geometric midpoints of the main tree's sequence.
  std::vector<double> seq{0.0};
  for (std::size_t i = 0; i < main_alpha.size(); ++i)
    if (std::isfinite(main_alpha[i])) seq.push_back(main_alpha[i]);
  std::sort(seq.begin(), seq.end());
  seq.erase(std::unique(seq.begin(), seq.end()), seq.end());
  std::vector<double> candidates;
  for (std::size_t m = 0; m + 1 < seq.size(); ++m) candidates.push_back(std::sqrt(seq[m] * seq[m + 1]));
  candidates.push_back(seq.back());

  std::vector<std::size_t> perm = train;
  Rng rng(derive_seed(p.seed, 2));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<double>> fold_scores;
  int used = 0;
  for (int k = 0; k < folds; ++k) {
    std::vector<std::size_t> fit, val;
    for (std::size_t i = 0; i < perm.size(); ++i)
      (static_cast<int>(i % static_cast<std::size_t>(folds)) == k ? val : fit).push_back(perm[i]);
    std::sort(fit.begin(), fit.end());
    std::sort(val.begin(), val.end());
    CausalTree ft;
    try {
      ft = TreeBuilder::grow_structure(data, fit, {}, n_est, p, derive_seed(p.seed, 100 + static_cast<std::uint64_t>(k)),
                                       nullptr);
    } catch (const DegenerateFitError&) {
      continue;
    }
    const auto& nodes = ft.nodes();
    std::vector<NodeStats> vs(nodes.size());
    for (std::size_t r : val) {
      std::size_t n = 0;
      for (;;) {
        vs[n].add(data.y[r], data.a[r], data.w[r]);
        if (nodes[n].is_leaf()) break;
        n = static_cast<std::size_t>(nodes[n].rule.goes_left(data.row(r)) ? nodes[n].left : nodes[n].right);
      }
    }
    if (!vs[0].has_both_arms()) continue;
    ++used;
    const double n_val = vs[0].n();
    const auto fa = weakest_link(nodes, ft.train_stats(), static_cast<double>(fit.size()), n_est);
    auto& score = fold_scores.emplace_back(candidates.size(), 0.0);

    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const auto mask = mask_at(nodes, fa, candidates[c]);
      // Walk the pruned tree; each leaf contributes a held-out (cross-product) effect term.
      double s = 0.0;
      struct Frame {
        std::size_t node;
        double tau_val;
      };
      std::vector<Frame> stack{{0, vs[0].tau()}};
      while (!stack.empty()) {
        const auto [n, inherited] = stack.back();
        stack.pop_back();
        const double tau_v = vs[n].has_both_arms() ? vs[n].tau() : inherited;
        if (mask[n]) {
          const auto& st = ft.train_stats()[n];
          const double tau_t = st.tau();
          const double pt = st.treated.count / st.n();
          s += (vs[n].n() / n_val) * (2.0 * tau_t * tau_v - tau_t * tau_t) -
               (st.treated.variance() / pt + st.control.variance() / (1.0 - pt)) / n_est;
          continue;
        }
        stack.push_back({static_cast<std::size_t>(nodes[n].right), tau_v});
        stack.push_back({static_cast<std::size_t>(nodes[n].left), tau_v});
      }
      score[c] += s;
    }
  }
  if (used == 0) {
    logger().warn("cv_prune: no usable fold, keeping the grown tree");
    return TreeBuilder::finalize(tree, data, TreeBuilder::leaf_mask(tree));
  }
  // Mean held-out score per level; the simplest level within one standard error of the
  // best mean wins.
  const double k = static_cast<double>(fold_scores.size());
  std::vector<double> mean(candidates.size(), 0.0), se(candidates.size(), 0.0);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    for (const auto& f : fold_scores) mean[c] += f[c] / k;
    if (fold_scores.size() > 1) {
      double ss = 0;
      for (const auto& f : fold_scores) ss += (f[c] - mean[c]) * (f[c] - mean[c]);
      se[c] = std::sqrt(ss / (k - 1) / k);
    }
  }
  std::size_t top = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c)
    if (mean[c] > mean[top]) top = c;
  std::size_t best = top;
  const double bar = mean[top] - (p.one_se_rule ? se[top] : 0.0);
  for (std::size_t c = top + 1; c < candidates.size(); ++c)
    if (mean[c] >= bar) best = c;
  auto out = TreeBuilder::finalize(tree, data, mask_at(tree.nodes(), main_alpha, candidates[best]));
  TreeBuilder::set_alpha(out, candidates[best]);
  return out;
}

CausalTree grow_tree_on(const CausalData& data, std::span<const std::size_t> sample, const TreeParams& params,
                        GrowthAudit* audit) {
  params.validate();
  if (sample.size() < 2) throw DegenerateFitError("tree sample has fewer than 2 rows");
  const auto split = honest_split(sample.size(), params.honest_fraction, derive_seed(params.seed, 1));
  std::vector<std::size_t> train, est;
  train.reserve(split.train.size());
  est.reserve(split.est.size());
  for (std::size_t i : split.train) train.push_back(sample[i]);
  for (std::size_t i : split.est) est.push_back(sample[i]);
  std::sort(train.begin(), train.end());
  std::sort(est.begin(), est.end());

  NodeStats est_root;
  for (std::size_t r : est) est_root.add(0.0, data.a[r], 1.0);
  if (est_root.treated.count < params.min_treated_per_leaf || est_root.control.count < params.min_control_per_leaf)
    throw DegenerateFitError(fmt::format("estimation half cannot satisfy leaf minima at the root "
                                         "({} treated, {} control)",
                                         est_root.treated.count, est_root.control.count));

  const double n_est = static_cast<double>(est.size());
  auto grown = TreeBuilder::grow_structure(data, std::move(train), std::move(est), n_est, params,
                                           derive_seed(params.seed, 3), audit);
  if (params.prune) return cv_prune(grown, data, params.cv_folds);
  return TreeBuilder::finalize(grown, data, TreeBuilder::leaf_mask(grown));
}

CausalTree grow_tree(const CausalData& data, const TreeParams& params, GrowthAudit* audit) {
  data.validate();
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return grow_tree_on(data, all, params, audit);
}

CausalTree grow_tree(const HistoryMatrix& history, std::span<const double> outcomes, std::span<const int> treatments,
                     std::span<const double> weights, const TreeParams& params) {
  return grow_tree(CausalData{history.rows, outcomes, treatments, weights}, params);
}

std::size_t CausalTree::leaf_of(std::span<const double> h) const {
  if (h.size() != width_)
    throw DomainError(fmt::format("history width {} does not match tree width {}", h.size(), width_));
  return static_cast<std::size_t>(nodes_[route_to_node(nodes_, h)].leaf);
}

double CausalTree::predict(std::span<const double> h) const { return leaves_[leaf_of(h)].tau_hat; }

double predict_tree(const CausalTree& tree, std::span<const double> h) { return tree.predict(h); }

int CausalTree::depth() const noexcept {
  int d = 0;
  for (const auto& n : nodes_) d = std::max(d, n.depth);
  return d;
}

bool CausalTree::structurally_equal(const CausalTree& o) const {
  if (nodes_ != o.nodes_ || leaves_.size() != o.leaves_.size()) return false;
  for (std::size_t i = 0; i < leaves_.size(); ++i)
    if (leaves_[i].tau_hat != o.leaves_[i].tau_hat || leaves_[i].n_treated != o.leaves_[i].n_treated ||
        leaves_[i].n_control != o.leaves_[i].n_control)
      return false;
  return true;
}

namespace {

nlohmann::json arm_json(const ArmStats& s) { return {s.count, s.sum_w, s.sum_wy, s.sum_wy2, s.sum_w2}; }
ArmStats arm_from(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>(),
          j.at(4).get<double>()};
}

}  // namespace

nlohmann::json CausalTree::to_json(const std::vector<std::string>* names, bool with_training) const {
  nlohmann::json leaves = nlohmann::json::array();
  for (const auto& l : leaves_)
    leaves.push_back({{"tau_hat", l.tau_hat},
                      {"n_treated", l.n_treated},
                      {"n_control", l.n_control},
                      {"var_treated", l.var_treated},
                      {"var_control", l.var_control},
                      {"sum_weights_treated", l.sum_weights_treated},
                      {"sum_weights_control", l.sum_weights_control},
                      {"members", l.members}});
  nlohmann::json out{{"type", "causal_tree"},
                     {"width", width_},
                     {"params", params_.to_json()},
                     {"pruning_alpha", alpha_},
                     {"nodes", nodes_to_json(nodes_, names)},
                     {"leaves", std::move(leaves)}};
  if (with_training) {
    nlohmann::json stats = nlohmann::json::array();
    for (const auto& s : train_stats_) stats.push_back({{"treated", arm_json(s.treated)}, {"control", arm_json(s.control)}});
    out["train_stats"] = std::move(stats);
    out["train_indices"] = train_;
    out["est_indices"] = est_;
  }
  return out;
}

CausalTree CausalTree::from_json(const nlohmann::json& j) {
  CausalTree t;
  t.width_ = j.at("width").get<std::size_t>();
  t.params_ = TreeParams::from_json(j.at("params"));
  t.alpha_ = j.value("pruning_alpha", 0.0);
  t.nodes_ = nodes_from_json(j.at("nodes"));
  for (const auto& l : j.at("leaves")) {
    LeafRecord r;
    r.tau_hat = l.at("tau_hat").get<double>();
    r.n_treated = l.at("n_treated").get<int>();
    r.n_control = l.at("n_control").get<int>();
    r.var_treated = l.value("var_treated", 0.0);
    r.var_control = l.value("var_control", 0.0);
    r.sum_weights_treated = l.value("sum_weights_treated", 0.0);
    r.sum_weights_control = l.value("sum_weights_control", 0.0);
    r.members = l.value("members", std::vector<std::size_t>{});
    t.leaves_.push_back(std::move(r));
  }
  if (j.contains("train_stats"))
    for (const auto& s : j.at("train_stats")) t.train_stats_.push_back({arm_from(s.at("treated")), arm_from(s.at("control"))});
  t.train_stats_.resize(t.nodes_.size());
  t.train_ = j.value("train_indices", std::vector<std::size_t>{});
  t.est_ = j.value("est_indices", std::vector<std::size_t>{});
  for (const auto& n : t.nodes_) {
    if (n.is_leaf() && static_cast<std::size_t>(n.leaf) >= t.leaves_.size())
      throw SchemaError("leaves", "tree JSON references a missing leaf");
    if (!n.is_leaf() && (n.left < 0 || n.right < 0 || static_cast<std::size_t>(std::max(n.left, n.right)) >= t.nodes_.size()))
      throw SchemaError("nodes", "tree JSON has a dangling child index");
  }
  return t;
}

}  // namespace dtr
