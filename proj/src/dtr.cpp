#include "dtr/dtr.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dtr {

std::string method_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::causal_tree: return "dtr-ct";
    case EstimatorKind::causal_forest: return "dtr-cf";
    case EstimatorKind::qlearning: return "qlearn";
    case EstimatorKind::dwols: return "dwols";
    case EstimatorKind::gestimation: return "gest";
    case EstimatorKind::cart: return "cart";
    case EstimatorKind::knn: return "knn";
    case EstimatorKind::oracle: return "oracle";
  }
  return "oracle";
}

const std::vector<EstimatorKind>& all_estimator_kinds() {
  static const std::vector<EstimatorKind> kinds{EstimatorKind::causal_tree, EstimatorKind::causal_forest,
                                                EstimatorKind::qlearning,   EstimatorKind::dwols,
                                                EstimatorKind::gestimation, EstimatorKind::cart,
                                                EstimatorKind::knn,         EstimatorKind::oracle};
  return kinds;
}

EstimatorKind method_from_name(const std::string& name) {
  for (auto k : all_estimator_kinds())
    if (method_name(k) == name) return k;
  throw DomainError(fmt::format("unknown method '{}' (expected dtr-ct, dtr-cf, qlearn, dwols, gest, cart, knn, oracle)",
                                name));
}

std::vector<double> HteModel::predict(const HistoryMatrix& h) const {
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = predict(h.row(i));
  return out;
}

OracleModel::OracleModel(const OracleBundle& o, int step) : step_(step) {
  if (step < 1 || step > o.horizon()) throw DomainError(fmt::format("oracle has no step {}", step));
  for (std::size_t i = 0; i < o.size(); ++i) tau_[o.patient_ids[i]] = o.true_tau(static_cast<Eigen::Index>(i), step - 1);
}

double OracleModel::predict(std::span<const double>) const {
  throw ContractError("the oracle model is keyed by patient id; predict on a HistoryMatrix");
}

std::vector<double> OracleModel::predict(const HistoryMatrix& h) const {
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto it = tau_.find(h.row_ids.at(i));
    if (it == tau_.end()) throw DomainError(fmt::format("oracle has no patient '{}'", h.row_ids[i]));
    out[i] = it->second;
  }
  return out;
}

nlohmann::json OracleModel::to_json() const { return {{"type", "oracle"}, {"step", step_}, {"tau", tau_}}; }
nlohmann::json OracleModel::explain(const std::vector<std::string>&) const {
  return {{"type", "oracle"}, {"patients", tau_.size()}};
}

namespace {

class TreeModel final : public HteModel {
 public:
  explicit TreeModel(CausalTree t) : t_(std::move(t)) {}
  EstimatorKind kind() const override { return EstimatorKind::causal_tree; }
  double predict(std::span<const double> h) const override { return t_.predict(h); }
  nlohmann::json to_json() const override { return t_.to_json(nullptr, false); }
  nlohmann::json explain(const std::vector<std::string>& names) const override { return t_.to_json(&names, false); }
  const CausalTree& tree() const { return t_; }

 private:
  CausalTree t_;
};

class ForestModel final : public HteModel {
 public:
  ForestModel(CausalForest f, Execution exec) : f_(std::move(f)), exec_(exec) {}
  EstimatorKind kind() const override { return EstimatorKind::causal_forest; }
  double predict(std::span<const double> h) const override {
    try {
      return f_.hte(h);
    } catch (const UndefinedEffectError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  }
  std::vector<double> predict(const HistoryMatrix& h) const override { return f_.predict(h.rows, exec_); }
  nlohmann::json to_json() const override { return f_.to_json(); }
  nlohmann::json explain(const std::vector<std::string>& names) const override { return f_.summary_json(names); }

 private:
  CausalForest f_;
  Execution exec_;
};

class BlipHte final : public HteModel {
 public:
  explicit BlipHte(BlipModel b) : b_(std::move(b)) {}
  EstimatorKind kind() const override {
    switch (b_.method) {
      case BlipMethod::qlearning: return EstimatorKind::qlearning;
      case BlipMethod::dwols: return EstimatorKind::dwols;
      case BlipMethod::gestimation: return EstimatorKind::gestimation;
    }
    return EstimatorKind::qlearning;
  }
  double predict(std::span<const double> h) const override { return b_.predict(h); }
  nlohmann::json to_json() const override { return b_.to_json(); }
  nlohmann::json explain(const std::vector<std::string>& names) const override { return b_.to_json(&names); }

 private:
  BlipModel b_;
};

class CartHte final : public HteModel {
 public:
  explicit CartHte(CartModel m) : m_(std::move(m)) {}
  EstimatorKind kind() const override { return EstimatorKind::cart; }
  double predict(std::span<const double> h) const override { return m_.predict(h); }
  nlohmann::json to_json() const override { return m_.to_json(); }
  nlohmann::json explain(const std::vector<std::string>& names) const override { return m_.to_json(&names); }

 private:
  CartModel m_;
};

class KnnHte final : public HteModel {
 public:
  KnnHte(KnnModel m, Execution exec) : m_(std::move(m)), exec_(exec) {}
  EstimatorKind kind() const override { return EstimatorKind::knn; }
  double predict(std::span<const double> h) const override { return m_.predict(h); }
  std::vector<double> predict(const HistoryMatrix& h) const override { return m_.predict(h.rows, exec_); }
  nlohmann::json to_json() const override { return m_.to_json(); }
  nlohmann::json explain(const std::vector<std::string>&) const override {
    return {{"type", "knn"}, {"k", m_.k()}, {"width", m_.width()}};
  }

 private:
  KnnModel m_;
  Execution exec_;
};

template <class E>
[[noreturn]] void rethrow_with_step(const E& e, int step) {
  throw E(fmt::format("step {}: {}", step, e.what()));
}

std::unique_ptr<HteModel> fit_step(const DtrParams& p, const HistoryMatrix& h, std::span<const int> a,
                                   std::span<const double> y, const IpwWeights& ipw, const PropensityModel& prop,
                                   int t) {
  switch (p.kind) {
    case EstimatorKind::causal_tree: {
      auto tp = p.tree;
      tp.seed = derive_seed(p.seed, static_cast<std::uint64_t>(t));
      return std::make_unique<TreeModel>(grow_tree(CausalData{h.rows, y, a, ipw.weights}, tp));
    }
    case EstimatorKind::causal_forest: {
      auto fp = p.forest;
      fp.seed = derive_seed(p.seed, static_cast<std::uint64_t>(t));
      fp.propensity.clip_lo = p.propensity.clip_lo;
      fp.propensity.clip_hi = p.propensity.clip_hi;
      return std::make_unique<ForestModel>(grow_forest(CausalData{h.rows, y, a, ipw.weights}, fp, p.exec), p.exec);
    }
    case EstimatorKind::qlearning: return std::make_unique<BlipHte>(qlearning_blip(h.rows, a, y, t));
    case EstimatorKind::dwols: return std::make_unique<BlipHte>(dwols_blip(h.rows, a, y, ipw.weights, t));
    case EstimatorKind::gestimation: {
      auto pi = predict_propensity(prop, h.rows);
      for (double& v : pi) v = prop.clip(v);
      return std::make_unique<BlipHte>(gestimation_blip(h.rows, a, y, pi, t));
    }
    case EstimatorKind::cart: return std::make_unique<CartHte>(fit_cart(h.rows, a, y, p.cart));
    case EstimatorKind::knn: return std::make_unique<KnnHte>(KnnModel(h.rows, a, y, p.knn_k), p.exec);
    case EstimatorKind::oracle:
      if (!p.oracle) throw DomainError("the oracle estimator needs an OracleBundle");
      return std::make_unique<OracleModel>(*p.oracle, t);
  }
  throw DomainError("unknown estimator kind");
}

StepDiagnostics summarise(int t, const std::vector<double>& tau, const IpwWeights& ipw, const PropensityModel& prop,
                          std::size_t undefined) {
  StepDiagnostics d;
  d.step = t;
  d.n = tau.size();
  d.clipped = ipw.clipped;
  d.clipped_fraction = ipw.clipped_fraction;
  d.propensity_converged = prop.convergence.converged;
  d.propensity_fallback = prop.convergence.used_fallback_ridge;
  d.undefined_effects = undefined;
  if (tau.empty()) return d;
  double s = 0, s2 = 0, pos = 0;
  d.tau_min = tau.front();
  d.tau_max = tau.front();
  for (double v : tau) {
    s += v;
    s2 += v * v;
    pos += v > 0;
    d.tau_min = std::min(d.tau_min, v);
    d.tau_max = std::max(d.tau_max, v);
  }
  const double n = static_cast<double>(tau.size());
  d.tau_mean = s / n;
  d.tau_sd = tau.size() > 1 ? std::sqrt(std::max(s2 - s * s / n, 0.0) / (n - 1)) : 0.0;
  d.treat_fraction = pos / n;
  return d;
}

// NaN (undefined forest effect) becomes 0 and is counted.
std::size_t sanitise(std::vector<double>& tau) {
  std::size_t k = 0;
  for (double& v : tau)
    if (!std::isfinite(v)) {
      v = 0.0;
      ++k;
    }
  return k;
}

}  // namespace

nlohmann::json StepDiagnostics::to_json() const {
  return {{"step", step},
          {"n", n},
          {"clipped", clipped},
          {"clipped_fraction", clipped_fraction},
          {"propensity_converged", propensity_converged},
          {"propensity_fallback", propensity_fallback},
          {"tau_mean", tau_mean},
          {"tau_sd", tau_sd},
          {"tau_min", tau_min},
          {"tau_max", tau_max},
          {"treat_fraction", treat_fraction},
          {"undefined_effects", undefined_effects}};
}

nlohmann::json DtrParams::to_json() const {
  return {{"method", method_name(kind)},
          {"tree", tree.to_json()},
          {"forest", forest.to_json()},
          {"cart", {{"min_leaf", cart.min_leaf}, {"max_split_buckets", cart.max_split_buckets}, {"complexity", cart.complexity}}},
          {"knn_k", knn_k},
          {"clip_lo", propensity.clip_lo},
          {"clip_hi", propensity.clip_hi},
          {"weights", propensity.convention == WeightConvention::arm_appropriate ? "arm_appropriate" : "inverse_propensity_all"},
          {"fit_to_raw_outcome", fit_to_raw_outcome},
          {"seed", seed}};
}

double update_pseudo_outcome(double y_prev, int a, int decision, double tau_hat) {
  if (decision != (tau_hat > 0.0 ? 1 : 0))
    throw ContractError(fmt::format("decision {} is not 1{{tau > 0}} for tau = {}", decision, tau_hat));
  if (a != 0 && a != 1) throw ContractError("treatment must be 0 or 1");
  return y_prev + (decision - a) * tau_hat;
}

EstimatedDTR estimate_dtr(const LongitudinalDataset& ds, const DtrParams& p) {
  p.propensity.validate();
  const int T = ds.horizon();
  const std::size_t n = ds.size();
  EstimatedDTR out(HistoryEncoder(ds.schema()), p.kind);
  out.params_ = p.to_json();
  out.policies_.resize(static_cast<std::size_t>(T));
  out.diagnostics_.resize(static_cast<std::size_t>(T));
  out.fit_.decisions.resize(static_cast<Eigen::Index>(n), T);
  out.fit_.tau_hat.resize(static_cast<Eigen::Index>(n), T);
  out.fit_.patient_ids = ds.patient_ids();
  out.pseudo_.assign(static_cast<std::size_t>(T) + 1, {});

  const Vector yv = ds.outcomes();
  const std::vector<double> y(yv.data(), yv.data() + yv.size());
  std::vector<double> pseudo = y;
  out.pseudo_[static_cast<std::size_t>(T)] = pseudo;

  for (int t = T; t >= 1; --t) {
    try {
      const auto h = out.encoder_.encode(ds, t);
      const auto a = ds.treatments_at(t);
      const auto prop = fit_propensity(h, a, p.propensity);
      const auto ipw = ipw_weights(prop, h, a, p.propensity.convention);
      const auto& target = p.fit_to_raw_outcome ? y : pseudo;
      std::shared_ptr<const HteModel> model = fit_step(p, h, a, target, ipw, prop, t);

      auto tau = model->predict(h);
      const std::size_t undefined = sanitise(tau);
      if (undefined > 0)
        logger().warn("step {}: {} patients without treatment variation in their forest neighbourhood; "
                      "deciding no treatment",
                      t, undefined);
      out.fit_.undefined_effects += undefined;
      for (std::size_t i = 0; i < n; ++i) {
        const int dec = tau[i] > 0.0 ? 1 : 0;
        out.fit_.decisions(static_cast<Eigen::Index>(i), t - 1) = dec;
        out.fit_.tau_hat(static_cast<Eigen::Index>(i), t - 1) = tau[i];
        pseudo[i] = update_pseudo_outcome(pseudo[i], a[i], dec, tau[i]);
      }
      out.pseudo_[static_cast<std::size_t>(t - 1)] = pseudo;
      out.diagnostics_[static_cast<std::size_t>(t - 1)] = summarise(t, tau, ipw, prop, undefined);
      out.policies_[static_cast<std::size_t>(t - 1)] = StepPolicy{t, prop, std::move(model)};
    } catch (const DegenerateFitError& e) {
      rethrow_with_step(e, t);
    } catch (const UndefinedEffectError& e) {
      rethrow_with_step(e, t);
    } catch (const DomainError& e) {
      rethrow_with_step(e, t);
    } catch (const ContractError& e) {
      rethrow_with_step(e, t);
    }
  }
  return out;
}

DecisionMatrix apply_policy(const EstimatedDTR& dtr, const LongitudinalDataset& ds) {
  dtr.encoder().check_compatible(ds.schema());
  const int T = dtr.horizon();
  DecisionMatrix out;
  out.decisions.resize(static_cast<Eigen::Index>(ds.size()), T);
  out.tau_hat.resize(static_cast<Eigen::Index>(ds.size()), T);
  out.patient_ids = ds.patient_ids();
  for (int t = 1; t <= T; ++t) {
    const auto h = dtr.encoder().encode(ds, t);
    auto tau = dtr.policy(t).model->predict(h);
    out.undefined_effects += sanitise(tau);
    for (std::size_t i = 0; i < tau.size(); ++i) {
      out.tau_hat(static_cast<Eigen::Index>(i), t - 1) = tau[i];
      out.decisions(static_cast<Eigen::Index>(i), t - 1) = tau[i] > 0.0 ? 1 : 0;
    }
  }
  return out;
}

std::unique_ptr<HteModel> model_from_json(const nlohmann::json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "causal_tree") return std::make_unique<TreeModel>(CausalTree::from_json(j));
  if (type == "causal_forest") return std::make_unique<ForestModel>(CausalForest::from_json(j), Execution::parallel);
  if (type == "blip") return std::make_unique<BlipHte>(BlipModel::from_json(j));
  if (type == "cart") return std::make_unique<CartHte>(CartModel::from_json(j));
  if (type == "knn") return std::make_unique<KnnHte>(KnnModel::from_json(j), Execution::parallel);
  if (type == "oracle")
    return std::make_unique<OracleModel>(j.at("step").get<int>(), j.at("tau").get<std::map<std::string, double>>());
  throw SchemaError("type", fmt::format("unknown model type '{}'", type));
}

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  f << j.dump(1) << '\n';
  if (!f) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot read '{}'", path.string()));
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.filename().string(), fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

}  // namespace

void save_bundle(const EstimatedDTR& dtr, const std::filesystem::path& dir, const nlohmann::json& provenance) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
  nlohmann::json diag = nlohmann::json::array();
  for (const auto& d : dtr.diagnostics()) diag.push_back(d.to_json());
  write_json(dir / "manifest.json", {{"format", "dtr-bundle"},
                                     {"version", 1},
                                     {"library_version", kVersion},
                                     {"provenance", provenance},
                                     {"method", method_name(dtr.kind())},
                                     {"horizon", dtr.horizon()},
                                     {"schema", dtr.encoder().to_json()},
                                     {"params", dtr.params()},
                                     {"diagnostics", diag}});
  for (int t = 1; t <= dtr.horizon(); ++t) {
    const auto& pol = dtr.policy(t);
    write_json(dir / fmt::format("step_{}.json", t),
               {{"step", t}, {"propensity", pol.propensity.to_json()}, {"model", pol.model->to_json()}});
    write_json(dir / fmt::format("explain_step_{}.json", t), pol.model->explain(dtr.encoder().column_names(t)));
  }
}

EstimatedDTR load_bundle(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", std::string{}) != "dtr-bundle")
    throw SchemaError("format", fmt::format("'{}' is not a model bundle", (dir / "manifest.json").string()));
  EstimatedDTR out(HistoryEncoder(Schema::from_json(manifest.at("schema"))),
                   method_from_name(manifest.at("method").get<std::string>()));
  out.params_ = manifest.value("params", nlohmann::json::object());
  const int T = manifest.at("horizon").get<int>();
  for (int t = 1; t <= T; ++t) {
    const auto j = read_json(dir / fmt::format("step_{}.json", t));
    out.policies_.push_back(
        StepPolicy{t, PropensityModel::from_json(j.at("propensity")), model_from_json(j.at("model"))});
  }
  if (manifest.contains("diagnostics"))
    for (const auto& d : manifest.at("diagnostics")) {
      StepDiagnostics s;
      s.step = d.value("step", 0);
      s.n = d.value("n", std::size_t{0});
      s.clipped = d.value("clipped", std::size_t{0});
      s.clipped_fraction = d.value("clipped_fraction", 0.0);
      s.tau_mean = d.value("tau_mean", 0.0);
      s.tau_sd = d.value("tau_sd", 0.0);
      s.treat_fraction = d.value("treat_fraction", 0.0);
      out.diagnostics_.push_back(s);
    }
  return out;
}

}  // namespace dtr
