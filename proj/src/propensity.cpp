#include "dtr/propensity.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>

namespace dtr {

void PropensityOptions::validate() const {
  if (!(clip_lo > 0.0 && clip_lo < clip_hi && clip_hi < 1.0))
    throw DomainError(fmt::format("clip bounds must satisfy 0 < lo < hi < 1 (got {}, {})", clip_lo, clip_hi));
  if (max_iterations < 1) throw DomainError("max_iterations must be positive");
  if (ridge < 0 || fallback_ridge < 0) throw DomainError("ridge penalties must be non-negative");
}

namespace {

double sigmoid(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

// log(1 + exp(eta)) without overflow.
double softplus(double eta) { return std::max(eta, 0.0) + std::log1p(std::exp(-std::abs(eta))); }

Vector linear_predictor(const Matrix& x, const Vector& gamma) {
  return (x * gamma.tail(gamma.size() - 1)).array() + gamma[0];
}

double penalised_objective(const Vector& eta, std::span<const int> a, const Vector& gamma, double ridge) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += a[static_cast<std::size_t>(i)] * eta[i] - softplus(eta[i]);
  return ll - 0.5 * ridge * gamma.tail(gamma.size() - 1).squaredNorm();
}

struct IrlsResult {
  Vector gamma;
  ConvergenceInfo info;
};

IrlsResult irls(const Matrix& x, std::span<const int> a, double ridge, const PropensityOptions& opt) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Matrix design(n, d + 1);
  design.col(0).setOnes();
  design.rightCols(d) = x;

  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = a[static_cast<std::size_t>(i)];
  Vector penalty = Vector::Constant(d + 1, ridge);
  penalty[0] = 0.0;

  Vector gamma = Vector::Zero(d + 1);
  // Start the intercept at the marginal log-odds.
  const double pbar = y.mean();
  gamma[0] = std::log(pbar / (1.0 - pbar));
  Vector eta = linear_predictor(x, gamma);
  double objective = penalised_objective(eta, a, gamma, ridge);

  IrlsResult out;
  out.info.objective_trace.push_back(objective);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    Vector p(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p[i] = sigmoid(eta[i]);
      w[i] = p[i] * (1.0 - p[i]);
    }
    Vector grad = design.transpose() * (y - p) - penalty.cwiseProduct(gamma);
    out.info.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    out.info.iterations = it - 1;
    if (out.info.gradient_norm < opt.gradient_tolerance) {
      out.info.converged = true;
      break;
    }
    Matrix hessian = design.transpose() * w.asDiagonal() * design;
    hessian.diagonal() += penalty;
    hessian.diagonal().array() += opt.ridge;  // numerical floor on the normal equations
    Vector step = hessian.ldlt().solve(grad);

    // Step halving keeps the penalised log-likelihood monotone.
    double scale = 1.0;
    Vector candidate;
    Vector cand_eta;
    double cand_obj = 0.0;
    for (int h = 0; h < 30; ++h) {
      candidate = gamma + scale * step;
      cand_eta = linear_predictor(x, candidate);
      cand_obj = penalised_objective(cand_eta, a, candidate, ridge);
      if (cand_obj >= objective - 1e-12) break;
      scale *= 0.5;
    }
    if (cand_obj < objective - 1e-12) break;  // no ascent direction left
    gamma = std::move(candidate);
    eta = std::move(cand_eta);
    objective = cand_obj;
    out.info.objective_trace.push_back(objective);
    out.info.iterations = it;
  }
  if (!out.info.converged) {
    Vector p = eta.unaryExpr([](double e) { return sigmoid(e); });
    Vector grad = design.transpose() * (y - p) - penalty.cwiseProduct(gamma);
    out.info.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    out.info.converged = out.info.gradient_norm < opt.gradient_tolerance;
  }
  out.gamma = std::move(gamma);
  return out;
}

// True when a threshold on the linear predictor splits the two arms perfectly.
bool separates(const Matrix& x, std::span<const int> a, const Vector& gamma) {
  const Vector eta = linear_predictor(x, gamma);
  constexpr double inf = std::numeric_limits<double>::infinity();
  double lo[2] = {inf, inf}, hi[2] = {-inf, -inf};
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const int arm = a[static_cast<std::size_t>(i)];
    lo[arm] = std::min(lo[arm], eta[i]);
    hi[arm] = std::max(hi[arm], eta[i]);
  }
  return lo[1] > hi[0] || lo[0] > hi[1];
}

}  // namespace

PropensityModel fit_propensity(const Matrix& history, std::span<const int> treatments,
                               const PropensityOptions& options, int step) {
  options.validate();
  if (static_cast<std::size_t>(history.rows()) != treatments.size())
    throw DomainError("history and treatment vector differ in length");
  std::size_t treated = 0;
  for (int a : treatments) {
    if (a != 0 && a != 1) throw DomainError("treatments must be binary");
    treated += static_cast<std::size_t>(a);
  }
  if (treated == 0 || treated == treatments.size())
    throw DomainError(fmt::format("step {}: propensity fit needs both treatment arms", step));
  if (history.rows() <= history.cols())
    logger().warn("step {}: propensity fit with N={} <= d={}", step, history.rows(), history.cols());

  auto result = irls(history, treatments, 0.0, options);
  auto too_large = [&](const Vector& g) { return g.lpNorm<Eigen::Infinity>() > options.separation_threshold; };
  if (!result.info.converged || too_large(result.gamma)) {
    logger().debug("step {}: propensity fit diverging (|gamma|max={:.3g}); refitting with ridge {}", step,
                   result.gamma.lpNorm<Eigen::Infinity>(), options.fallback_ridge);
    const bool diverged = too_large(result.gamma);
    result = irls(history, treatments, options.fallback_ridge, options);
    result.info.used_fallback_ridge = true;
    if (too_large(result.gamma) || (diverged && separates(history, treatments, result.gamma)))
      throw DegenerateFitError(fmt::format(
          "step {}: propensity coefficients exceed {} after ridge fallback; treatment is (nearly) "
          "deterministic given history, positivity is violated",
          step, options.separation_threshold));
  }

  PropensityModel model;
  model.step = step;
  model.coefficients = std::move(result.gamma);
  model.convergence = result.info;
  model.clip_lo = options.clip_lo;
  model.clip_hi = options.clip_hi;
  return model;
}

PropensityModel fit_propensity(const HistoryMatrix& history, std::span<const int> treatments,
                               const PropensityOptions& options) {
  return fit_propensity(history.rows, treatments, options, history.step);
}

double predict_propensity(const PropensityModel& model, std::span<const double> h) {
  if (h.size() != model.width())
    throw DomainError(fmt::format("history width {} does not match propensity model width {}", h.size(),
                                  model.width()));
  double eta = model.coefficients[0];
  for (std::size_t k = 0; k < h.size(); ++k) eta += model.coefficients[static_cast<Eigen::Index>(k + 1)] * h[k];
  return sigmoid(eta);
}

std::vector<double> predict_propensity(const PropensityModel& model, const Matrix& history) {
  if (static_cast<std::size_t>(history.cols()) != model.width())
    throw DomainError(fmt::format("history width {} does not match propensity model width {}",
                                  history.cols(), model.width()));
  Vector eta = linear_predictor(history, model.coefficients);
  std::vector<double> p(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index i = 0; i < eta.size(); ++i) p[static_cast<std::size_t>(i)] = sigmoid(eta[i]);
  return p;
}

IpwWeights ipw_weights(const PropensityModel& model, const Matrix& history, std::span<const int> treatments,
                       WeightConvention convention) {
  if (static_cast<std::size_t>(history.rows()) != treatments.size())
    throw DomainError("history and treatment vector differ in length");
  const auto p = predict_propensity(model, history);
  IpwWeights out;
  out.weights.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool treated = treatments[i] == 1;
    const double received =
        (treated || convention == WeightConvention::inverse_propensity_all) ? p[i] : 1.0 - p[i];
    const double clipped = model.clip(received);
    if (clipped != received) ++out.clipped;
    out.weights[i] = 1.0 / clipped;
  }
  out.clipped_fraction = p.empty() ? 0.0 : static_cast<double>(out.clipped) / static_cast<double>(p.size());
  if (out.clipped > 0)
    logger().debug("step {}: {} of {} propensities clipped to [{}, {}]", model.step, out.clipped, p.size(),
                   model.clip_lo, model.clip_hi);
  return out;
}

IpwWeights ipw_weights(const PropensityModel& model, const HistoryMatrix& history, std::span<const int> treatments,
                       WeightConvention convention) {
  return ipw_weights(model, history.rows, treatments, convention);
}

double log_likelihood(const Matrix& history, std::span<const int> treatments, const Vector& gamma) {
  return penalised_objective(linear_predictor(history, gamma), treatments, gamma, 0.0);
}

Vector log_likelihood_gradient(const Matrix& history, std::span<const int> treatments, const Vector& gamma) {
  const Vector eta = linear_predictor(history, gamma);
  Vector resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) resid[i] = treatments[static_cast<std::size_t>(i)] - sigmoid(eta[i]);
  Vector g(gamma.size());
  g[0] = resid.sum();
  g.tail(gamma.size() - 1) = history.transpose() * resid;
  return g;
}

nlohmann::json PropensityModel::to_json() const {
  return {{"step", step},
          {"coefficients", std::vector<double>(coefficients.data(), coefficients.data() + coefficients.size())},
          {"iterations", convergence.iterations},
          {"gradient_norm", convergence.gradient_norm},
          {"converged", convergence.converged},
          {"used_fallback_ridge", convergence.used_fallback_ridge},
          {"clip_lo", clip_lo},
          {"clip_hi", clip_hi}};
}

PropensityModel PropensityModel::from_json(const nlohmann::json& j) {
  PropensityModel m;
  m.step = j.at("step").get<int>();
  const auto c = j.at("coefficients").get<std::vector<double>>();
  m.coefficients = Eigen::Map<const Vector>(c.data(), static_cast<Eigen::Index>(c.size()));
  m.convergence.iterations = j.value("iterations", 0);
  m.convergence.gradient_norm = j.value("gradient_norm", 0.0);
  m.convergence.converged = j.value("converged", false);
  m.convergence.used_fallback_ridge = j.value("used_fallback_ridge", false);
  m.clip_lo = j.at("clip_lo").get<double>();
  m.clip_hi = j.at("clip_hi").get<double>();
  return m;
}

}  // namespace dtr
