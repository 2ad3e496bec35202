#pragma once

#include "dtr/common.hpp"

#include "json.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dtr {

enum class ColumnKind { continuous, categorical, binary };

std::string to_string(ColumnKind kind);
ColumnKind column_kind_from_string(const std::string& s);

/// Column metadata. For categorical columns the stored cell value is the index of the
/// level in `levels`; `levels[0]` is the dropped reference level when one-hot encoding.
struct ColumnMeta {
  std::string name;
  ColumnKind kind = ColumnKind::continuous;
  std::vector<std::string> levels;

  void validate() const;
  bool operator==(const ColumnMeta&) const = default;
};

/// Dataset schema descriptor:
/// {"baseline": [{"name","kind","levels"?}], "covariates": [...], "horizon": T}.
/// Categorical columns without "levels" have them discovered at load time.
struct Schema {
  std::vector<ColumnMeta> baseline;
  std::vector<ColumnMeta> covariates;
  int horizon = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static Schema from_json(const nlohmann::json& j);
};

/// One patient: baseline C (m), time-varying X (T x p), treatments A (T), final outcome Y.
struct Trajectory {
  std::string patient_id;
  std::vector<double> baseline;
  Matrix covariates;
  std::vector<int> treatments;
  double outcome = 0.0;
};

/// Immutable collection of trajectories sharing m, p and T. Validated on construction.
class LongitudinalDataset {
 public:
  LongitudinalDataset(std::vector<Trajectory> trajectories, std::vector<ColumnMeta> baseline_meta,
                      std::vector<ColumnMeta> covariate_meta, int horizon);

  std::size_t size() const noexcept { return trajectories_.size(); }
  int horizon() const noexcept { return horizon_; }
  std::size_t baseline_width() const noexcept { return baseline_meta_.size(); }
  std::size_t covariate_width() const noexcept { return covariate_meta_.size(); }

  const Trajectory& operator[](std::size_t i) const { return trajectories_[i]; }
  const std::vector<Trajectory>& trajectories() const noexcept { return trajectories_; }
  const std::vector<ColumnMeta>& baseline_meta() const noexcept { return baseline_meta_; }
  const std::vector<ColumnMeta>& covariate_meta() const noexcept { return covariate_meta_; }
  Schema schema() const;

  /// Treatments at step t (1-based).
  std::vector<int> treatments_at(int t) const;
  Vector outcomes() const;
  std::vector<std::string> patient_ids() const;

  /// Trajectories at the given positions, same metadata.
  LongitudinalDataset subset(std::span<const std::size_t> rows) const;

  bool operator==(const LongitudinalDataset& other) const;

 private:
  std::vector<Trajectory> trajectories_;
  std::vector<ColumnMeta> baseline_meta_;
  std::vector<ColumnMeta> covariate_meta_;
  int horizon_;
};

/// Encoded design H_t = (C, A_{1:t-1}, X_{1:t}) for every patient.
struct HistoryMatrix {
  int step = 0;
  Matrix rows;
  std::vector<std::string> column_names;
  std::vector<std::string> row_ids;

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows.rows()); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(rows.cols()); }
  std::span<const double> row(std::size_t i) const {
    return {rows.data() + i * static_cast<std::size_t>(rows.cols()),
            static_cast<std::size_t>(rows.cols())};
  }
};

/// Fixed encoding of a schema: column order and categorical level lists. Built once from
/// the training data and reused for any dataset scored later, so that the encoded columns
/// of a new dataset line up with the fitted models.
class HistoryEncoder {
 public:
  explicit HistoryEncoder(Schema schema);

  const Schema& schema() const noexcept { return schema_; }
  std::size_t baseline_encoded_width() const noexcept { return baseline_width_; }
  std::size_t covariate_encoded_width() const noexcept { return covariate_width_; }

  /// d = m_enc + (t - 1) + t * p_enc.
  std::size_t width(int t) const;
  std::vector<std::string> column_names(int t) const;

  /// Encodes step t of `dataset`. Categorical levels of `dataset` are matched to the
  /// encoder's levels by string; unseen levels get the all-zero encoding (warned once per
  /// call with the number of affected cells).
  HistoryMatrix encode(const LongitudinalDataset& dataset, int t) const;

  /// Throws SchemaError naming the first column whose name or kind (or the horizon) differs.
  void check_compatible(const Schema& other) const;

  nlohmann::json to_json() const { return schema_.to_json(); }

 private:
  Schema schema_;
  std::size_t baseline_width_ = 0;
  std::size_t covariate_width_ = 0;
};

/// build_history(dataset, t) using the dataset's own encoding.
HistoryMatrix build_history(const LongitudinalDataset& dataset, int t);

/// Wide CSV ingestion: id, c_1..c_m, then per step x{t}_1..x{t}_p, a{t}, and y.
LongitudinalDataset load_csv(const std::filesystem::path& path, const Schema& schema);
LongitudinalDataset parse_csv(std::istream& in, const Schema& schema);

/// Writes the wide CSV. Reals use the shortest round-trip representation.
void write_csv(const std::filesystem::path& path, const LongitudinalDataset& dataset);
void write_csv(std::ostream& out, const LongitudinalDataset& dataset);

/// Shortest decimal string that parses back to exactly `v`.
std::string format_real(double v);

}  // namespace dtr
