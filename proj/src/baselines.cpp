#include "dtr/baselines.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dtr {

WlsResult wls(const Matrix& design, std::span<const double> y, std::span<const double> w) {
  const auto n = static_cast<std::size_t>(design.rows());
  if (y.size() != n || w.size() != n) throw DomainError("wls: design, response and weights differ in length");
  double total = 0;
  for (double v : w) {
    if (!(v >= 0) || !std::isfinite(v)) throw DomainError("wls: weights must be finite and non-negative");
    total += v;
  }
  if (total == 0) throw DomainError("wls: all weights are zero");

  Matrix xs(design.rows(), design.cols());
  Vector ys(design.rows());
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::sqrt(w[i]);
    xs.row(static_cast<Eigen::Index>(i)) = r * design.row(static_cast<Eigen::Index>(i));
    ys[static_cast<Eigen::Index>(i)] = r * y[i];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(xs);
  WlsResult out;
  out.coefficients = cod.solve(ys);
  out.rank = cod.rank();
  out.rank_deficient = out.rank < design.cols();
  if (out.rank_deficient)
    logger().warn("wls: design has rank {} < {} columns; using the minimum-norm solution", out.rank, design.cols());
  return out;
}

Vector wls_solve(const Matrix& design, std::span<const double> y, std::span<const double> w) {
  return wls(design, y, w).coefficients;
}

std::string to_string(BlipMethod m) {
  switch (m) {
    case BlipMethod::qlearning: return "qlearning";
    case BlipMethod::dwols: return "dwols";
    case BlipMethod::gestimation: return "gestimation";
  }
  return "qlearning";
}

BlipMethod blip_method_from_string(const std::string& s) {
  if (s == "qlearning") return BlipMethod::qlearning;
  if (s == "dwols") return BlipMethod::dwols;
  if (s == "gestimation") return BlipMethod::gestimation;
  throw SchemaError("method", fmt::format("unknown blip method '{}'", s));
}

double BlipModel::predict(std::span<const double> h) const {
  if (h.size() != width()) throw DomainError(fmt::format("history width {} does not match blip width {}", h.size(), width()));
  double v = psi[0];
  for (std::size_t k = 0; k < h.size(); ++k) v += psi[static_cast<Eigen::Index>(k + 1)] * h[k];
  return v;
}

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }
Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void check_inputs(const Matrix& x, std::span<const int> a, std::span<const double> y, const char* who) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (a.size() != n || y.size() != n) throw DomainError(fmt::format("{}: inputs are misaligned", who));
  std::size_t treated = 0;
  for (int v : a) {
    if (v != 0 && v != 1) throw DomainError(fmt::format("{}: treatments must be binary", who));
    treated += static_cast<std::size_t>(v);
  }
  if (treated == 0 || treated == n) throw DomainError(fmt::format("{}: both treatment arms are required", who));
}

// (1, h, a, a*h)
Matrix blip_design(const Matrix& x, std::span<const int> a) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix z(n, 2 * (d + 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ai = a[static_cast<std::size_t>(i)];
    z(i, 0) = 1.0;
    z.row(i).segment(1, d) = x.row(i);
    z(i, d + 1) = ai;
    z.row(i).segment(d + 2, d) = ai * x.row(i);
  }
  return z;
}

BlipModel split_blip(const WlsResult& r, Eigen::Index d, BlipMethod m, int step) {
  BlipModel b;
  b.step = step;
  b.method = m;
  b.beta = r.coefficients.head(d + 1);
  b.psi = r.coefficients.tail(d + 1);
  b.rank_deficient = r.rank_deficient;
  return b;
}

}  // namespace

BlipModel qlearning_blip(const Matrix& x, std::span<const int> a, std::span<const double> y, int step) {
  check_inputs(x, a, y, "qlearning");
  const std::vector<double> ones(y.size(), 1.0);
  return split_blip(wls(blip_design(x, a), y, ones), x.cols(), BlipMethod::qlearning, step);
}

BlipModel dwols_blip(const Matrix& x, std::span<const int> a, std::span<const double> y, std::span<const double> ipw,
                     int step) {
  check_inputs(x, a, y, "dwols");
  if (ipw.size() != y.size()) throw DomainError("dwols: weight vector is misaligned");
  return split_blip(wls(blip_design(x, a), y, ipw), x.cols(), BlipMethod::dwols, step);
}

BlipModel gestimation_blip(const Matrix& x, std::span<const int> a, std::span<const double> y,
                           std::span<const double> pi, int step) {
  check_inputs(x, a, y, "gestimation");
  if (pi.size() != y.size()) throw DomainError("gestimation: propensity vector is misaligned");
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix ht(n, d + 1);
  ht.col(0).setOnes();
  ht.rightCols(d) = x;
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(d + 1, d + 1);
  Vector rhs = Vector::Zero(d + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    if (!(pi[s] > 0 && pi[s] < 1)) throw DomainError("gestimation: propensities must lie in (0, 1)");
    const double r = a[s] - pi[s];
    if (r == 0.0) continue;
    const Eigen::RowVectorXd hi = ht.row(i);
    rhs += (r * y[s]) * hi.transpose();
    if (a[s] == 1) lhs.noalias() += r * hi.transpose() * hi;
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(lhs);
  BlipModel b;
  b.step = step;
  b.method = BlipMethod::gestimation;
  b.psi = cod.solve(rhs);
  b.rank_deficient = cod.rank() < d + 1;
  if (b.rank_deficient)
    logger().warn("step {}: G-estimation system is singular (rank {} < {}); using the minimum-norm solution", step,
                  cod.rank(), d + 1);
  return b;
}

nlohmann::json BlipModel::to_json(const std::vector<std::string>* names) const {
  nlohmann::json j{{"type", "blip"},
                   {"method", to_string(method)},
                   {"step", step},
                   {"psi", to_std(psi)},
                   {"beta", to_std(beta)},
                   {"rank_deficient", rank_deficient}};
  if (names) {
    std::vector<std::string> terms{"(intercept)"};
    terms.insert(terms.end(), names->begin(), names->end());
    j["terms"] = terms;
  }
  return j;
}

BlipModel BlipModel::from_json(const nlohmann::json& j) {
  BlipModel b;
  b.method = blip_method_from_string(j.at("method").get<std::string>());
  b.step = j.value("step", 0);
  b.psi = from_std(j.at("psi").get<std::vector<double>>());
  b.beta = from_std(j.value("beta", std::vector<double>{}));
  b.rank_deficient = j.value("rank_deficient", false);
  if (b.psi.size() < 1) throw SchemaError("psi", "blip JSON has no coefficients");
  return b;
}

CartModel fit_cart(const Matrix& x, std::span<const int> a, std::span<const double> y, const CartParams& params) {
  check_inputs(x, a, y, "cart");
  std::vector<std::size_t> t, c;
  for (std::size_t i = 0; i < a.size(); ++i) (a[i] == 1 ? t : c).push_back(i);
  RegressionTreeParams p;
  p.min_leaf = params.min_leaf;
  p.max_split_buckets = params.max_split_buckets;
  p.complexity = params.complexity;
  return {grow_regression_tree(x, y, t, p), grow_regression_tree(x, y, c, p)};
}

std::vector<double> cart_hte(const Matrix& x, std::span<const int> a, std::span<const double> y, int min_leaf) {
  CartParams p;
  p.min_leaf = min_leaf;
  const auto m = fit_cart(x, a, y, p);
  std::vector<double> out(y.size());
  const auto d = static_cast<std::size_t>(x.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.predict({x.data() + i * d, d});
  return out;
}

nlohmann::json CartModel::to_json(const std::vector<std::string>* names) const {
  return {{"type", "cart"}, {"treated", treated.to_json(names)}, {"control", control.to_json(names)}};
}

CartModel CartModel::from_json(const nlohmann::json& j) {
  return {RegressionTree::from_json(j.at("treated")), RegressionTree::from_json(j.at("control"))};
}

KnnModel::KnnModel(const Matrix& x, std::span<const int> a, std::span<const double> y, int k)
    : x_(x), a_(a.begin(), a.end()), y_(y.begin(), y.end()), k_(k) {
  check_inputs(x, a, y, "knn");
  if (k < 1) throw DomainError("knn: k must be positive");
  standardise();
  if (treated_.size() < static_cast<std::size_t>(k) || control_.size() < static_cast<std::size_t>(k))
    throw DomainError(fmt::format("knn: k = {} exceeds an arm size ({} treated, {} control)", k, treated_.size(),
                                  control_.size()));
}

void KnnModel::standardise() {
  const Eigen::Index n = x_.rows(), d = x_.cols();
  mean_ = x_.colwise().mean().transpose();
  inv_sd_ = Vector::Zero(d);
  if (n > 1)
    for (Eigen::Index j = 0; j < d; ++j) {
      const double var = (x_.col(j).array() - mean_[j]).square().sum() / static_cast<double>(n - 1);
      if (var > 1e-24) inv_sd_[j] = 1.0 / std::sqrt(var);
    }
  z_ = (x_.rowwise() - mean_.transpose()).array().rowwise() * inv_sd_.transpose().array();
  treated_.clear();
  control_.clear();
  for (std::size_t i = 0; i < a_.size(); ++i) (a_[i] == 1 ? treated_ : control_).push_back(i);
}

std::vector<std::size_t> KnnModel::neighbours(std::span<const double> h, int a) const {
  if (h.size() != width()) throw DomainError(fmt::format("history width {} does not match knn width {}", h.size(), width()));
  Vector q(static_cast<Eigen::Index>(h.size()));
  for (std::size_t j = 0; j < h.size(); ++j) {
    const auto e = static_cast<Eigen::Index>(j);
    q[e] = (h[j] - mean_[e]) * inv_sd_[e];
  }
  const auto& pool = a == 1 ? treated_ : control_;
  std::vector<std::pair<double, std::size_t>> dist(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    dist[i] = {(z_.row(static_cast<Eigen::Index>(pool[i])) - q.transpose()).squaredNorm(), pool[i]};
  const auto k = static_cast<std::size_t>(k_);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

double KnnModel::predict(std::span<const double> h) const {
  double t = 0, c = 0;
  for (std::size_t i : neighbours(h, 1)) t += y_[i];
  for (std::size_t i : neighbours(h, 0)) c += y_[i];
  return (t - c) / static_cast<double>(k_);
}

std::vector<double> KnnModel::predict(const Matrix& x, Execution exec) const {
  const auto n = static_cast<std::ptrdiff_t>(x.rows());
  const auto d = static_cast<std::size_t>(x.cols());
  std::vector<double> out(static_cast<std::size_t>(n));
  if (d != width()) throw DomainError(fmt::format("history width {} does not match knn width {}", d, width()));
  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(static) num_threads(thread_cap())
    for (std::ptrdiff_t i = 0; i < n; ++i)
      out[static_cast<std::size_t>(i)] = predict(std::span<const double>(x.data() + static_cast<std::size_t>(i) * d, d));
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i)
      out[static_cast<std::size_t>(i)] = predict(std::span<const double>(x.data() + static_cast<std::size_t>(i) * d, d));
  }
  return out;
}

nlohmann::json KnnModel::to_json() const {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(x_.rows()));
  for (Eigen::Index i = 0; i < x_.rows(); ++i)
    rows[static_cast<std::size_t>(i)].assign(x_.row(i).data(), x_.row(i).data() + x_.cols());
  return {{"type", "knn"}, {"k", k_}, {"width", x_.cols()}, {"rows", rows}, {"treatments", a_}, {"outcomes", y_}};
}

KnnModel KnnModel::from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<std::vector<std::vector<double>>>();
  const auto width = j.at("width").get<Eigen::Index>();
  Matrix x(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != width) throw SchemaError("rows", "knn JSON row width mismatch");
    for (Eigen::Index c = 0; c < width; ++c) x(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  }
  return KnnModel(x, j.at("treatments").get<std::vector<int>>(), j.at("outcomes").get<std::vector<double>>(),
                  j.at("k").get<int>());
}

std::vector<double> knn_hte(const Matrix& x, std::span<const int> a, std::span<const double> y, int k) {
  return KnnModel(x, a, y, k).predict(x);
}

}  // namespace dtr
