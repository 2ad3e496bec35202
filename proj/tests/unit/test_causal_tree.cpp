#include "doctest.h"
#include "fixtures.hpp"

#include "dtr/causal_tree.hpp"
#include "dtr/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

using namespace dtr;

namespace {

struct Data {
  Matrix x;
  std::vector<double> y;
  std::vector<int> a;
  std::vector<double> w;
  CausalData view() const { return {x, y, a, w}; }
};

// tau = +2 for x0 > 0 and -2 otherwise, extra columns are noise.
Data two_region(std::size_t n, int noise_cols, double noise_sd, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> nd;
  Data d;
  d.x.resize(static_cast<Eigen::Index>(n), 1 + noise_cols);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int c = 0; c <= noise_cols; ++c) d.x(r, c) = u(rng);
    const int a = static_cast<int>(i % 2);
    const double tau = d.x(r, 0) > 0 ? 2.0 : -2.0;
    d.a.push_back(a);
    d.y.push_back(a * tau + noise_sd * nd(rng));
    d.w.push_back(1.0);
  }
  return d;
}

Data constant_effect(std::size_t n, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);
  Data d;
  d.x.resize(static_cast<Eigen::Index>(n), cols);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < cols; ++c) d.x(static_cast<Eigen::Index>(i), c) = nd(rng);
    const int a = coin(rng) ? 1 : 0;
    d.a.push_back(a);
    d.y.push_back(1.0 * a + nd(rng));
    d.w.push_back(1.0);
  }
  return d;
}

NodeStats stats_of(const Data& d, const std::vector<std::size_t>& rows, double shift = 0.0) {
  NodeStats s;
  for (auto i : rows) s.add(d.y[i] + shift, d.a[i], d.w[i]);
  return s;
}

CausalTree hand_tree() {
  const nlohmann::json j = {
      {"width", 1},
      {"params", nlohmann::json::object()},
      {"nodes",
       {{{"id", 0}, {"depth", 0}, {"feature", 0}, {"threshold", 0.0}, {"left", 1}, {"right", 2}},
        {{"id", 1}, {"depth", 1}, {"leaf", 0}},
        {{"id", 2}, {"depth", 1}, {"leaf", 1}}}},
      {"leaves", {{{"tau_hat", -2.0}, {"n_treated", 10}, {"n_control", 10}}, {{"tau_hat", 2.0}, {"n_treated", 10}, {"n_control", 10}}}}};
  return CausalTree::from_json(j);
}

}  // namespace

TEST_CASE("honest_split sizes and determinism") {
  const auto s = honest_split(10, 0.5, 1);
  CHECK(s.train.size() == 5);
  CHECK(s.est.size() == 5);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.est.begin(), s.est.end());
  CHECK(all.size() == 10);
  CHECK(*all.rbegin() == 9);
  const auto again = honest_split(10, 0.5, 1);
  CHECK(again.train == s.train);
  CHECK(again.est == s.est);
  const auto odd = honest_split(5001, 0.5, 3);
  CHECK(odd.train.size() == 2501);
  CHECK(odd.est.size() == 2500);
  CHECK_THROWS_AS(honest_split(1, 0.5, 1), DomainError);
}

TEST_CASE("homogeneous split has non-positive gain") {
  auto d = two_region(200, 0, 1.0, 4);
  std::vector<std::size_t> first, second, all;
  for (std::size_t i = 0; i < 200; ++i) {
    all.push_back(i);
    (i < 100 ? first : second).push_back(i);
  }
  // second half is a copy of the first, so the children share tau and variances
  for (std::size_t i = 100; i < 200; ++i) {
    d.y[i] = d.y[i - 100];
    d.a[i] = d.a[i - 100];
  }
  CHECK(emse_split_gain(stats_of(d, all), stats_of(d, first), stats_of(d, second), 200, 200) <= 0.0);
}

TEST_CASE("40-point two-region sample: the boundary split wins an exhaustive scan") {
  Data d;
  d.x.resize(40, 1);
  for (int i = 0; i < 40; ++i) {
    const double x = -9.75 + 0.5 * i;
    d.x(i, 0) = x;
    const int a = (i / 1) % 2;
    d.a.push_back(a);
    d.y.push_back(a * (x > 0 ? 2.0 : -2.0));
    d.w.push_back(1.0);
  }
  std::vector<std::size_t> all(40);
  for (std::size_t i = 0; i < 40; ++i) all[i] = i;
  for (double shift : {0.0, 100.0}) {
    double best = -1e300, best_thr = 0;
    std::vector<double> gains;
    for (int c = 1; c < 40; ++c) {
      std::vector<std::size_t> l(all.begin(), all.begin() + c), r(all.begin() + c, all.end());
      const auto L = stats_of(d, l, shift), R = stats_of(d, r, shift);
      if (!L.has_both_arms() || !R.has_both_arms()) continue;
      const double g = emse_split_gain(stats_of(d, all, shift), L, R, 40, 40);
      gains.push_back(g);
      if (g > best) {
        best = g;
        best_thr = d.x(c - 1, 0);
      }
    }
    CHECK(best > 0);
    CHECK(best_thr < 0);
    CHECK(best_thr > -0.5);
    if (shift == 0.0) {
      // unchanged by translating the outcomes
      std::size_t k = 0;
      for (int c = 1; c < 40; ++c) {
        std::vector<std::size_t> l(all.begin(), all.begin() + c), r(all.begin() + c, all.end());
        const auto L = stats_of(d, l, 7.5), R = stats_of(d, r, 7.5);
        if (!L.has_both_arms() || !R.has_both_arms()) continue;
        CHECK(emse_split_gain(stats_of(d, all, 7.5), L, R, 40, 40) == doctest::Approx(gains[k++]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("grow_tree finds the two-region boundary") {
  int depth_one = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto d = two_region(800, 2, 0.0, seed);
    TreeParams p;
    p.seed = seed;
    const auto t = grow_tree(d.view(), p);
    REQUIRE(t.nodes().size() >= 3);
    const auto& root = t.nodes()[0];
    const double bucket_width = 2.0 / p.max_split_buckets;
    CHECK(root.rule.feature == 0);
    CHECK(std::abs(root.rule.threshold) <= bucket_width);
    if (t.depth() == 1) ++depth_one;
    // honest leaves may hold a few rows between 0 and the threshold
    const std::vector<double> lo{-0.5, 0, 0}, hi{0.5, 0, 0};
    CHECK(t.predict(lo) < -1.5);
    CHECK(t.predict(hi) > 1.5);
  }
  CHECK(depth_one >= 4);
}

TEST_CASE("constant effect with noise covariates collapses to the root") {
  int collapsed = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto d = constant_effect(600, 3, seed);
    TreeParams p;
    p.seed = seed;
    if (grow_tree(d.view(), p).leaf_count() == 1) ++collapsed;
  }
  MESSAGE("collapsed " << collapsed << "/20");
  CHECK(collapsed >= 18);
}

TEST_CASE("cv_prune on overgrown noise trees") {
  int root = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto d = constant_effect(600, 3, 100 + seed);
    TreeParams p;
    p.seed = seed;
    p.prune = false;
    const auto grown = grow_tree(d.view(), p);
    const auto pruned = cv_prune(grown, d.view(), 5);
    if (pruned.leaf_count() == 1) ++root;
    // every pruned leaf is a union of grown leaves
    std::map<std::size_t, std::size_t> image;
    Rng rng(seed);
    std::normal_distribution<double> nd(0, 2);
    for (int q = 0; q < 2000; ++q) {
      const std::vector<double> h{nd(rng), nd(rng), nd(rng)};
      const auto [it, fresh] = image.emplace(grown.leaf_of(h), pruned.leaf_of(h));
      if (!fresh) CHECK(it->second == pruned.leaf_of(h));
    }
  }
  MESSAGE("pruned to root " << root << "/20");
  CHECK(root >= 18);
}

TEST_CASE("cv_prune leaves a single-leaf tree unchanged and validates folds") {
  const auto d = constant_effect(100, 1, 2);
  TreeParams p;
  p.prune = false;
  p.max_depth = 0;
  p.min_treated_per_leaf = p.min_control_per_leaf = 20;
  const auto t = grow_tree(d.view(), p);
  REQUIRE(t.leaf_count() == 1);
  CHECK(cv_prune(t, d.view(), 5).structurally_equal(t));
  CHECK_THROWS_AS(cv_prune(t, d.view(), 1000), DomainError);
}

TEST_CASE("leaf minima hold on both halves and honesty audit is clean") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto d = two_region(1000, 3, 1.0, seed);
    TreeParams p;
    p.seed = seed;
    p.prune = seed % 2 == 0;
    GrowthAudit audit;
    const auto t = grow_tree(d.view(), p, &audit);
    for (const auto& l : t.leaves()) {
      CHECK(l.n_treated >= 10);
      CHECK(l.n_control >= 10);
    }
    for (std::size_t n = 0; n < t.nodes().size(); ++n) {
      if (!t.nodes()[n].is_leaf()) continue;
      CHECK(t.train_stats()[n].treated.count >= 10);
      CHECK(t.train_stats()[n].control.count >= 10);
    }
    std::set<std::size_t> est(t.est_indices().begin(), t.est_indices().end());
    for (auto i : t.train_indices()) CHECK(est.count(i) == 0);
    CHECK(t.train_indices().size() + est.size() == 1000);
    CHECK(!audit.touched.empty());
    for (auto i : audit.touched) CHECK(est.count(i) == 0);
  }
}

TEST_CASE("default minima honoured with a smaller custom minimum") {
  const auto d = two_region(400, 1, 0.5, 9);
  TreeParams p;
  p.min_treated_per_leaf = 3;
  p.min_control_per_leaf = 5;
  p.prune = false;
  const auto t = grow_tree(d.view(), p);
  for (const auto& l : t.leaves()) {
    CHECK(l.n_treated >= 3);
    CHECK(l.n_control >= 5);
  }
}

TEST_CASE("degenerate data is reported") {
  auto d = constant_effect(30, 1, 3);
  std::fill(d.a.begin(), d.a.end(), 1);
  d.a[0] = 0;
  CHECK_THROWS_AS(grow_tree(d.view(), TreeParams{}), DegenerateFitError);
}

TEST_CASE("leaf_hte examples") {
  const std::vector<double> y{3, 5, 1, 1};
  const std::vector<int> a{1, 1, 0, 0};
  std::vector<double> w(4, 1.0);
  const std::vector<std::size_t> m{0, 1, 2, 3};
  CHECK(leaf_hte(y, a, w, m) == 3.0);
  for (auto& v : w) v *= 2;
  CHECK(leaf_hte(y, a, w, m) == 3.0);
  const std::vector<std::size_t> treated_only{0, 1};
  CHECK_THROWS_AS(leaf_hte(y, a, w, treated_only), DomainError);
}

TEST_CASE("leaf_hte matches direct summation on random IPW leaves") {
  Rng rng(12);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> pi(0.05, 0.95);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> y, w;
    std::vector<int> a;
    for (int i = 0; i < 120; ++i) {
      const double p = pi(rng);
      const int t = i % 3 == 0 ? 1 : 0;
      a.push_back(t);
      y.push_back(nd(rng) * 5);
      w.push_back(t ? 1 / p : 1 / (1 - p));
    }
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < 120 && m.size() < 50; i += 2) m.push_back(i);
    CHECK(std::abs(leaf_hte(y, a, w, m) - fixtures::direct_leaf_effect(y, a, w, m)) < 1e-12);
    const std::vector<double> ones(120, 1.0);
    long double st = 0, sc = 0;
    int nt = 0, nc = 0;
    for (auto i : m) (a[i] ? (st += y[i], ++nt) : (sc += y[i], ++nc));
    CHECK(leaf_hte(y, a, ones, m) == doctest::Approx(static_cast<double>(st / nt - sc / nc)).epsilon(1e-12));
  }
}

TEST_CASE("predict_tree routing examples") {
  const auto t = hand_tree();
  const std::vector<double> neg{-5}, pos{3}, edge{0};
  CHECK(predict_tree(t, neg) == -2.0);
  CHECK(predict_tree(t, pos) == 2.0);
  CHECK(predict_tree(t, edge) == -2.0);
  const std::vector<double> wide{1, 2};
  CHECK_THROWS_AS(predict_tree(t, wide), DomainError);

  auto j = t.to_json();
  j["nodes"] = {{{"id", 0}, {"depth", 0}, {"leaf", 0}}};
  j["leaves"] = {{{"tau_hat", 1.7}, {"n_treated", 1}, {"n_control", 1}}};
  const auto single = CausalTree::from_json(j);
  Rng rng(1);
  std::normal_distribution<double> nd(0, 100);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> h{nd(rng)};
    CHECK(single.predict(h) == 1.7);
  }
}

TEST_CASE("routing is total on 10000 random inputs") {
  const auto d = two_region(2000, 4, 2.0, 21);
  TreeParams p;
  p.prune = false;
  p.min_treated_per_leaf = p.min_control_per_leaf = 5;
  const auto t = grow_tree(d.view(), p);
  REQUIRE(t.leaf_count() > 1);
  Rng rng(5);
  std::normal_distribution<double> nd(0, 3);
  std::size_t reached = 0;
  for (int q = 0; q < 10000; ++q) {
    std::vector<double> h(5);
    for (auto& v : h) v = nd(rng);
    const auto leaf = t.leaf_of(h);
    if (leaf < t.leaf_count() && std::isfinite(t.predict(h))) ++reached;
  }
  CHECK(reached == 10000);
}

TEST_CASE("decisions invariant to positive outcome scaling") {
  for (double c : {0.25, 3.0, 1000.0}) {
    const auto d = two_region(1000, 2, 1.0, 31);
    auto scaled = d;
    for (auto& v : scaled.y) v *= c;
    TreeParams p;
    p.seed = 8;
    const auto t = grow_tree(d.view(), p);
    const auto s = grow_tree(scaled.view(), p);
    CHECK(t.nodes() == s.nodes());
    for (std::size_t i = 0; i < 1000; ++i) {
      const auto h = d.view().row(i);
      CHECK((t.predict(h) > 0) == (s.predict(h) > 0));
      CHECK(s.predict(h) == doctest::Approx(c * t.predict(h)).epsilon(1e-9));
    }
  }
}

TEST_CASE("same data, params and seed give the same tree; JSON round trip") {
  const auto d = two_region(600, 3, 1.0, 41);
  TreeParams p;
  p.seed = 99;
  const auto a = grow_tree(d.view(), p);
  const auto b = grow_tree(d.view(), p);
  CHECK(a.structurally_equal(b));
  CHECK(a.train_indices() == b.train_indices());
  const auto back = CausalTree::from_json(a.to_json());
  CHECK(back.structurally_equal(a));
  CHECK(back.leaves() == a.leaves());
  CHECK(back.to_json() == a.to_json());
}

TEST_CASE("collapse alphas are monotone towards the root") {
  const auto d = two_region(1500, 3, 2.0, 51);
  TreeParams p;
  p.prune = false;
  p.min_treated_per_leaf = p.min_control_per_leaf = 5;
  const auto t = grow_tree(d.view(), p);
  const auto alpha = collapse_alphas(t);
  for (std::size_t n = 0; n < t.nodes().size(); ++n) {
    const auto& node = t.nodes()[n];
    if (node.is_leaf()) {
      CHECK(std::isinf(alpha[n]));
      continue;
    }
    for (int child : {node.left, node.right})
      if (!t.nodes()[static_cast<std::size_t>(child)].is_leaf()) CHECK(alpha[n] >= alpha[static_cast<std::size_t>(child)]);
  }
}

TEST_CASE("tree params validation and JSON") {
  TreeParams p;
  p.min_treated_per_leaf = 0;
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = TreeParams{};
  p.honest_fraction = 1.0;
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = TreeParams{};
  p.max_split_buckets = 1;
  CHECK_THROWS_AS(p.validate(), DomainError);
  p = TreeParams{};
  p.seed = 17;
  p.prune = false;
  const auto back = TreeParams::from_json(p.to_json());
  CHECK(back.to_json() == p.to_json());
}
