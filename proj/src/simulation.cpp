#include "dtr/simulation.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dtr {

void DgpConfig::validate() const {
  if (scenario != 1 && scenario != 2) throw DomainError(fmt::format("scenario must be 1 or 2, got {}", scenario));
  if (n_patients < 1) throw DomainError("n_patients must be at least 1");
  if (horizon < 1) throw DomainError("horizon must be at least 1");
  for (double p : success_prob)
    if (!(p > 0 && p < 1)) throw DomainError("binomial success probabilities must lie in (0, 1)");
  if (!(noise_variance >= 0) || !(outcome_noise_sd >= 0)) throw DomainError("noise scales must be non-negative");
}

nlohmann::json DgpConfig::to_json() const {
  return {{"scenario", scenario},
          {"n_patients", n_patients},
          {"horizon", horizon},
          {"seed", seed},
          {"baseline_means", baseline_means},
          {"covariate_means", covariate_means},
          {"drift", drift},
          {"success_prob", success_prob},
          {"noise_variance", noise_variance},
          {"outcome_noise_sd", outcome_noise_sd},
          {"behavior_intercept", behavior_intercept},
          {"behavior_coef", behavior_coef},
          {"blip",
           {{"intercept", blip.intercept},
            {"x6", blip.x6},
            {"x7", blip.x7},
            {"interaction", blip.interaction},
            {"threshold", blip.threshold}}}};
}

DgpConfig DgpConfig::from_json(const nlohmann::json& j) {
  DgpConfig c;
  c.scenario = j.value("scenario", c.scenario);
  c.n_patients = j.value("n_patients", c.n_patients);
  c.horizon = j.value("horizon", c.horizon);
  c.seed = j.value("seed", c.seed);
  c.baseline_means = j.value("baseline_means", c.baseline_means);
  c.covariate_means = j.value("covariate_means", c.covariate_means);
  c.drift = j.value("drift", c.drift);
  c.success_prob = j.value("success_prob", c.success_prob);
  c.noise_variance = j.value("noise_variance", c.noise_variance);
  c.outcome_noise_sd = j.value("outcome_noise_sd", c.outcome_noise_sd);
  c.behavior_intercept = j.value("behavior_intercept", c.behavior_intercept);
  c.behavior_coef = j.value("behavior_coef", c.behavior_coef);
  if (j.contains("blip")) {
    const auto& b = j.at("blip");
    c.blip.intercept = b.value("intercept", c.blip.intercept);
    c.blip.x6 = b.value("x6", c.blip.x6);
    c.blip.x7 = b.value("x7", c.blip.x7);
    c.blip.interaction = b.value("interaction", c.blip.interaction);
    c.blip.threshold = b.value("threshold", c.blip.threshold);
  }
  c.validate();
  return c;
}

double true_blip(const DgpConfig& c, std::span<const double> x) {
  if (x.size() != 7) throw DomainError("true_blip expects the 7 raw step covariates");
  const auto& b = c.blip;
  const double g = c.scenario == 1 ? x[0] : std::sin(x[0]) + x[1] * x[1];
  return b.intercept + b.x6 * x[5] + b.x7 * x[6] + (x[5] >= b.threshold ? b.interaction * g : 0.0);
}

double true_blip(const DgpConfig& c, const Trajectory& tr, int t) {
  if (t < 1 || t > tr.covariates.rows()) throw DomainError(fmt::format("step {} outside the trajectory", t));
  std::array<double, 7> x{};
  for (int j = 0; j < 7; ++j) x[static_cast<std::size_t>(j)] = tr.covariates(t - 1, j);
  return true_blip(c, x);
}

double treatment_free_term(const DgpConfig& c, std::span<const double> base, const Matrix& x, int t, double phi_prev) {
  const Eigen::Index s = t - 1;
  if (c.scenario == 1) {
    if (t == 1) return x(s, 0) + x(s, 1) + x(s, 2) + x(s, 3);
    return x(s, 0) + x(s, 1) - x(s, 2) + x(s, 3);
  }
  const double x7 = x(s, 6);
  if (t == 1) return 5.0 + x7 * x7 - 3.0 * std::sin(base[1] * base[1] + x(s, 0) - x(s, 1) + x(s, 2));
  return phi_prev + x7 * x7 - 3.0 * std::sin(x(s, 0) - x(s, 1) + x(s, 2));
}

SimulatedData generate_scenario(const DgpConfig& c) {
  c.validate();
  const std::size_t n = c.n_patients;
  const int T = c.horizon;
  const double sd = std::sqrt(c.noise_variance);

  std::vector<Trajectory> trajs;
  trajs.reserve(n);
  OracleBundle o;
  o.true_tau.resize(static_cast<Eigen::Index>(n), T);
  o.optimal_decisions.resize(static_cast<Eigen::Index>(n), T);
  o.propensity.resize(static_cast<Eigen::Index>(n), T);
  o.optimal_outcome.resize(static_cast<Eigen::Index>(n));
  o.treatment_free.resize(static_cast<Eigen::Index>(n));
  o.noise.resize(static_cast<Eigen::Index>(n));

  const int width = static_cast<int>(std::to_string(n).size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    Rng rng(derive_seed(c.seed, i));
    std::normal_distribution<double> z(0.0, 1.0);
    Trajectory tr;
    tr.patient_id = fmt::format("p{:0{}}", i + 1, width);
    tr.baseline = {c.baseline_means[0] + z(rng), c.baseline_means[1] + z(rng)};
    tr.covariates = Matrix::Zero(T, 7);
    tr.treatments.assign(static_cast<std::size_t>(T), 0);

    double phi = 0.0, phi_sum = 0.0, effect = 0.0, opt_effect = 0.0;
    for (int t = 1; t <= T; ++t) {
      const Eigen::Index s = t - 1;
      std::binomial_distribution<int> b6(3, c.success_prob[0]), b7(3, c.success_prob[1]);
      if (t == 1) {
        for (int j = 0; j < 5; ++j) tr.covariates(s, j) = c.covariate_means[static_cast<std::size_t>(j)] + z(rng);
        tr.covariates(s, 5) = b6(rng);
        tr.covariates(s, 6) = b7(rng);
      } else {
        const double a = tr.treatments[static_cast<std::size_t>(t - 2)];
        for (int j = 0; j < 5; ++j)
          tr.covariates(s, j) = tr.covariates(s - 1, j) + c.drift[static_cast<std::size_t>(j)] * a + sd * z(rng);
        const int i6 = b6(rng), i7 = b7(rng);
        tr.covariates(s, 5) = tr.covariates(s - 1, 5) + a * i6;
        tr.covariates(s, 6) = tr.covariates(s - 1, 6) + a * i7;
      }
      double logit = c.behavior_intercept;
      for (int j = 0; j < 7; ++j) logit += c.behavior_coef[static_cast<std::size_t>(j)] * tr.covariates(s, j);
      const double p = 1.0 / (1.0 + std::exp(-logit));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const int a = u(rng) < p ? 1 : 0;
      tr.treatments[static_cast<std::size_t>(s)] = a;
      o.propensity(r, s) = p;

      phi = treatment_free_term(c, tr.baseline, tr.covariates, t, phi);
      phi_sum += phi;
      const double tau = true_blip(c, std::span<const double>(tr.covariates.row(s).data(), 7));
      o.true_tau(r, s) = tau;
      o.optimal_decisions(r, s) = tau > 0 ? 1 : 0;
      effect += a * tau;
      opt_effect += tau > 0 ? tau : 0.0;
    }
    const double eps = c.outcome_noise_sd * z(rng);
    tr.outcome = phi_sum + effect + eps;
    o.treatment_free[r] = phi_sum;
    o.noise[r] = eps;
    o.optimal_outcome[r] = phi_sum + opt_effect;
    o.patient_ids.push_back(tr.patient_id);
    trajs.push_back(std::move(tr));
  }

  std::vector<std::string> levels;
  for (int v = 0; v <= 3 * T; ++v) levels.push_back(std::to_string(v));
  std::vector<ColumnMeta> base{{"C1", ColumnKind::continuous, {}}, {"C2", ColumnKind::continuous, {}}};
  std::vector<ColumnMeta> cov;
  for (int j = 1; j <= 5; ++j) cov.push_back({fmt::format("X{}", j), ColumnKind::continuous, {}});
  cov.push_back({"X6", ColumnKind::categorical, levels});
  cov.push_back({"X7", ColumnKind::categorical, levels});
  return {LongitudinalDataset(std::move(trajs), std::move(base), std::move(cov), T), std::move(o)};
}

OracleBundle OracleBundle::subset(std::span<const std::size_t> rows) const {
  OracleBundle o;
  const auto n = static_cast<Eigen::Index>(rows.size());
  o.true_tau.resize(n, true_tau.cols());
  o.optimal_decisions.resize(n, optimal_decisions.cols());
  o.propensity.resize(n, propensity.cols());
  o.optimal_outcome.resize(n);
  o.treatment_free.resize(n);
  o.noise.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    if (r >= true_tau.rows()) throw DomainError("oracle subset index out of range");
    o.true_tau.row(i) = true_tau.row(r);
    o.optimal_decisions.row(i) = optimal_decisions.row(r);
    if (propensity.rows() == true_tau.rows()) o.propensity.row(i) = propensity.row(r);
    o.optimal_outcome[i] = optimal_outcome[r];
    o.treatment_free[i] = treatment_free.size() ? treatment_free[r] : 0.0;
    o.noise[i] = noise.size() ? noise[r] : 0.0;
    o.patient_ids.push_back(patient_ids[static_cast<std::size_t>(r)]);
  }
  return o;
}

void write_oracle_csv(std::ostream& out, const OracleBundle& o) {
  out << "id,t,tau,opt_decision,y_opt\n";
  for (Eigen::Index i = 0; i < o.true_tau.rows(); ++i)
    for (Eigen::Index t = 0; t < o.true_tau.cols(); ++t)
      out << o.patient_ids[static_cast<std::size_t>(i)] << ',' << t + 1 << ',' << format_real(o.true_tau(i, t)) << ','
          << o.optimal_decisions(i, t) << ',' << format_real(o.optimal_outcome[i]) << '\n';
}

void write_oracle_csv(const std::filesystem::path& path, const OracleBundle& o) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  write_oracle_csv(f, o);
  if (!f) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

OracleBundle read_oracle_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot read '{}'", path.string()));
  std::string line;
  if (!std::getline(f, line) || line.rfind("id,t,tau,opt_decision,y_opt", 0) != 0)
    throw SchemaError("id", "oracle CSV header must be id,t,tau,opt_decision,y_opt");
  struct Row {
    std::map<int, std::pair<double, int>> steps;
    double y_opt = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Row> rows;
  std::size_t lineno = 0;
  auto num = [&](const std::string& s) {
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ParseError(lineno, fmt::format("row {}: non-numeric oracle value '{}'", lineno, s));
    return v;
  };
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) fields.push_back(x);
    if (fields.size() != 5) throw ParseError(lineno, fmt::format("row {}: expected 5 oracle fields", lineno));
    if (!rows.count(fields[0])) order.push_back(fields[0]);
    auto& r = rows[fields[0]];
    r.steps[static_cast<int>(num(fields[1]))] = {num(fields[2]), static_cast<int>(num(fields[3]))};
    r.y_opt = num(fields[4]);
  }
  OracleBundle o;
  const int T = order.empty() ? 0 : static_cast<int>(rows[order.front()].steps.size());
  const auto n = static_cast<Eigen::Index>(order.size());
  o.true_tau.resize(n, T);
  o.optimal_decisions.resize(n, T);
  o.optimal_outcome.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[order[static_cast<std::size_t>(i)]];
    if (static_cast<int>(r.steps.size()) != T) throw ParseError(0, "oracle CSV has ragged steps");
    for (int t = 1; t <= T; ++t) {
      const auto it = r.steps.find(t);
      if (it == r.steps.end()) throw ParseError(0, fmt::format("oracle CSV lacks step {} for '{}'", t, order[static_cast<std::size_t>(i)]));
      o.true_tau(i, t - 1) = it->second.first;
      o.optimal_decisions(i, t - 1) = it->second.second;
    }
    o.optimal_outcome[i] = r.y_opt;
  }
  o.patient_ids = order;
  return o;
}

}  // namespace dtr
