#include "dtr/core.hpp"

#include "dtr/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace dtr {

std::string to_string(ColumnKind kind) {
  switch (kind) {
    case ColumnKind::continuous:
      return "continuous";
    case ColumnKind::categorical:
      return "categorical";
    case ColumnKind::binary:
      return "binary";
  }
  return "continuous";
}

ColumnKind column_kind_from_string(const std::string& s) {
  if (s == "continuous") return ColumnKind::continuous;
  if (s == "categorical") return ColumnKind::categorical;
  if (s == "binary") return ColumnKind::binary;
  throw ValidationError(fmt::format("unknown column kind '{}'", s));
}

void ColumnMeta::validate() const {
  if (name.empty()) throw ValidationError("column name must not be empty");
  if (kind != ColumnKind::categorical) return;
  if (levels.empty()) throw ValidationError(fmt::format("categorical column '{}' has no levels", name));
  std::set<std::string> seen;
  for (const auto& l : levels) {
    if (!seen.insert(l).second)
      throw ValidationError(fmt::format("categorical column '{}' repeats level '{}'", name, l));
  }
}

namespace {

void check_unique_names(const std::vector<ColumnMeta>& a, const std::vector<ColumnMeta>& b) {
  std::set<std::string> names;
  for (const auto* block : {&a, &b}) {
    for (const auto& c : *block) {
      if (!names.insert(c.name).second)
        throw ValidationError(fmt::format("duplicate column name '{}'", c.name));
    }
  }
}

nlohmann::json column_to_json(const ColumnMeta& c) {
  nlohmann::json j{{"name", c.name}, {"kind", to_string(c.kind)}};
  if (c.kind == ColumnKind::categorical && !c.levels.empty()) j["levels"] = c.levels;
  return j;
}

ColumnMeta column_from_json(const nlohmann::json& j) {
  ColumnMeta c;
  c.name = j.at("name").get<std::string>();
  c.kind = column_kind_from_string(j.value("kind", std::string("continuous")));
  if (j.contains("levels")) c.levels = j.at("levels").get<std::vector<std::string>>();
  return c;
}

}  // namespace

void Schema::validate() const {
  if (horizon < 1) throw ValidationError("schema horizon must be at least 1");
  for (const auto* block : {&baseline, &covariates}) {
    for (const auto& c : *block) {
      if (c.name.empty()) throw ValidationError("column name must not be empty");
      if (c.kind == ColumnKind::categorical && !c.levels.empty()) c.validate();
    }
  }
  check_unique_names(baseline, covariates);
}

nlohmann::json Schema::to_json() const {
  nlohmann::json j;
  j["baseline"] = nlohmann::json::array();
  for (const auto& c : baseline) j["baseline"].push_back(column_to_json(c));
  j["covariates"] = nlohmann::json::array();
  for (const auto& c : covariates) j["covariates"].push_back(column_to_json(c));
  j["horizon"] = horizon;
  return j;
}

Schema Schema::from_json(const nlohmann::json& j) {
  Schema s;
  try {
    for (const auto& c : j.at("baseline")) s.baseline.push_back(column_from_json(c));
    for (const auto& c : j.at("covariates")) s.covariates.push_back(column_from_json(c));
    s.horizon = j.at("horizon").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid schema document: {}", e.what()));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------------------

namespace {

void check_cell(const ColumnMeta& meta, double v, const std::string& id) {
  if (!std::isfinite(v))
    throw ValidationError(fmt::format("patient '{}': non-finite value in column '{}'", id, meta.name));
  if (meta.kind == ColumnKind::binary && v != 0.0 && v != 1.0)
    throw ValidationError(fmt::format("patient '{}': binary column '{}' holds {}", id, meta.name, v));
  if (meta.kind == ColumnKind::categorical) {
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(meta.levels.size()))
      throw ValidationError(
          fmt::format("patient '{}': categorical column '{}' holds invalid level code {}", id,
                      meta.name, v));
  }
}

}  // namespace

LongitudinalDataset::LongitudinalDataset(std::vector<Trajectory> trajectories,
                                         std::vector<ColumnMeta> baseline_meta,
                                         std::vector<ColumnMeta> covariate_meta, int horizon)
    : trajectories_(std::move(trajectories)),
      baseline_meta_(std::move(baseline_meta)),
      covariate_meta_(std::move(covariate_meta)),
      horizon_(horizon) {
  if (trajectories_.empty()) throw ValidationError("dataset must contain at least one trajectory");
  if (horizon_ < 1) throw ValidationError("horizon must be at least 1");
  for (const auto& c : baseline_meta_) c.validate();
  for (const auto& c : covariate_meta_) c.validate();
  check_unique_names(baseline_meta_, covariate_meta_);

  const auto m = baseline_meta_.size();
  const auto p = covariate_meta_.size();
  for (const auto& tr : trajectories_) {
    if (tr.baseline.size() != m)
      throw ValidationError(fmt::format("patient '{}': expected {} baseline values, got {}",
                                        tr.patient_id, m, tr.baseline.size()));
    if (static_cast<std::size_t>(tr.covariates.rows()) != static_cast<std::size_t>(horizon_) ||
        static_cast<std::size_t>(tr.covariates.cols()) != p)
      throw ValidationError(fmt::format("patient '{}': covariates must be {}x{}", tr.patient_id,
                                        horizon_, p));
    if (tr.treatments.size() != static_cast<std::size_t>(horizon_))
      throw ValidationError(fmt::format("patient '{}': expected {} treatments", tr.patient_id, horizon_));
    for (std::size_t k = 0; k < m; ++k) check_cell(baseline_meta_[k], tr.baseline[k], tr.patient_id);
    for (int t = 0; t < horizon_; ++t) {
      for (std::size_t j = 0; j < p; ++j)
        check_cell(covariate_meta_[j], tr.covariates(t, static_cast<Eigen::Index>(j)), tr.patient_id);
      const int a = tr.treatments[static_cast<std::size_t>(t)];
      if (a != 0 && a != 1)
        throw ValidationError(
            fmt::format("patient '{}': treatment a{} is {}; expected 0 or 1", tr.patient_id, t + 1, a));
    }
    if (!std::isfinite(tr.outcome))
      throw ValidationError(fmt::format("patient '{}': non-finite outcome", tr.patient_id));
  }
}

Schema LongitudinalDataset::schema() const { return Schema{baseline_meta_, covariate_meta_, horizon_}; }

std::vector<int> LongitudinalDataset::treatments_at(int t) const {
  if (t < 1 || t > horizon_) throw DomainError(fmt::format("step {} outside 1..{}", t, horizon_));
  std::vector<int> a(trajectories_.size());
  for (std::size_t i = 0; i < trajectories_.size(); ++i)
    a[i] = trajectories_[i].treatments[static_cast<std::size_t>(t - 1)];
  return a;
}

Vector LongitudinalDataset::outcomes() const {
  Vector y(static_cast<Eigen::Index>(trajectories_.size()));
  for (std::size_t i = 0; i < trajectories_.size(); ++i)
    y[static_cast<Eigen::Index>(i)] = trajectories_[i].outcome;
  return y;
}

std::vector<std::string> LongitudinalDataset::patient_ids() const {
  std::vector<std::string> ids;
  ids.reserve(trajectories_.size());
  for (const auto& tr : trajectories_) ids.push_back(tr.patient_id);
  return ids;
}

LongitudinalDataset LongitudinalDataset::subset(std::span<const std::size_t> rows) const {
  std::vector<Trajectory> out;
  out.reserve(rows.size());
  for (auto r : rows) {
    if (r >= trajectories_.size()) throw DomainError("subset row out of range");
    out.push_back(trajectories_[r]);
  }
  return LongitudinalDataset(std::move(out), baseline_meta_, covariate_meta_, horizon_);
}

bool LongitudinalDataset::operator==(const LongitudinalDataset& o) const {
  if (horizon_ != o.horizon_ || baseline_meta_ != o.baseline_meta_ ||
      covariate_meta_ != o.covariate_meta_ || trajectories_.size() != o.trajectories_.size())
    return false;
  for (std::size_t i = 0; i < trajectories_.size(); ++i) {
    const auto& a = trajectories_[i];
    const auto& b = o.trajectories_[i];
    if (a.patient_id != b.patient_id || a.baseline != b.baseline || a.treatments != b.treatments ||
        a.outcome != b.outcome || a.covariates != b.covariates)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------------------

namespace {

std::size_t encoded_width(const ColumnMeta& c) {
  return c.kind == ColumnKind::categorical ? c.levels.size() - 1 : 1;
}

std::size_t block_width(const std::vector<ColumnMeta>& cols) {
  std::size_t w = 0;
  for (const auto& c : cols) w += encoded_width(c);
  return w;
}

void append_names(std::vector<std::string>& out, const ColumnMeta& c, const std::string& stem) {
  if (c.kind != ColumnKind::categorical) {
    out.push_back(stem);
    return;
  }
  for (std::size_t l = 1; l < c.levels.size(); ++l) out.push_back(stem + "=" + c.levels[l]);
}

// Maps a dataset's level codes onto the encoder's level indices (-1 = unseen).
std::vector<std::vector<int>> level_maps(const std::vector<ColumnMeta>& enc,
                                         const std::vector<ColumnMeta>& data) {
  std::vector<std::vector<int>> maps(enc.size());
  for (std::size_t k = 0; k < enc.size(); ++k) {
    if (enc[k].kind != ColumnKind::categorical) continue;
    std::unordered_map<std::string, int> index;
    for (std::size_t l = 0; l < enc[k].levels.size(); ++l) index[enc[k].levels[l]] = static_cast<int>(l);
    for (const auto& level : data[k].levels) {
      auto it = index.find(level);
      maps[k].push_back(it == index.end() ? -1 : it->second);
    }
  }
  return maps;
}

// Writes one encoded cell; returns false when the categorical level is unseen.
bool encode_cell(const ColumnMeta& meta, const std::vector<int>& map, double value, double* out) {
  if (meta.kind != ColumnKind::categorical) {
    out[0] = value;
    return true;
  }
  const std::size_t w = meta.levels.size() - 1;
  std::fill(out, out + w, 0.0);
  const int level = map[static_cast<std::size_t>(value)];
  if (level < 0) return false;
  if (level > 0) out[level - 1] = 1.0;
  return true;
}

}  // namespace

HistoryEncoder::HistoryEncoder(Schema schema) : schema_(std::move(schema)) {
  for (const auto* block : {&schema_.baseline, &schema_.covariates})
    for (const auto& c : *block) c.validate();
  baseline_width_ = block_width(schema_.baseline);
  covariate_width_ = block_width(schema_.covariates);
}

std::size_t HistoryEncoder::width(int t) const {
  if (t < 1 || t > schema_.horizon)
    throw DomainError(fmt::format("step {} outside 1..{}", t, schema_.horizon));
  const auto st = static_cast<std::size_t>(t);
  return baseline_width_ + (st - 1) + st * covariate_width_;
}

std::vector<std::string> HistoryEncoder::column_names(int t) const {
  std::vector<std::string> names;
  names.reserve(width(t));
  for (const auto& c : schema_.baseline) append_names(names, c, c.name);
  for (int s = 1; s < t; ++s) names.push_back(fmt::format("a{}", s));
  for (int s = 1; s <= t; ++s)
    for (const auto& c : schema_.covariates) append_names(names, c, fmt::format("{}@{}", c.name, s));
  return names;
}

void HistoryEncoder::check_compatible(const Schema& other) const {
  auto compare = [](const std::vector<ColumnMeta>& mine, const std::vector<ColumnMeta>& theirs,
                    const char* block) {
    const auto n = std::max(mine.size(), theirs.size());
    for (std::size_t k = 0; k < n; ++k) {
      if (k >= theirs.size())
        throw SchemaError(mine[k].name, fmt::format("{} column '{}' is missing", block, mine[k].name));
      if (k >= mine.size())
        throw SchemaError(theirs[k].name,
                          fmt::format("unexpected {} column '{}'", block, theirs[k].name));
      if (mine[k].name != theirs[k].name)
        throw SchemaError(theirs[k].name, fmt::format("{} column {} is '{}', expected '{}'", block,
                                                      k + 1, theirs[k].name, mine[k].name));
      if (mine[k].kind != theirs[k].kind)
        throw SchemaError(theirs[k].name, fmt::format("column '{}' is {}, expected {}", theirs[k].name,
                                                      to_string(theirs[k].kind), to_string(mine[k].kind)));
    }
  };
  compare(schema_.baseline, other.baseline, "baseline");
  compare(schema_.covariates, other.covariates, "covariate");
  if (other.horizon != schema_.horizon)
    throw SchemaError("horizon", fmt::format("horizon is {}, expected {}", other.horizon, schema_.horizon));
}

HistoryMatrix HistoryEncoder::encode(const LongitudinalDataset& dataset, int t) const {
  const auto d = width(t);
  check_compatible(dataset.schema());
  const auto base_maps = level_maps(schema_.baseline, dataset.baseline_meta());
  const auto cov_maps = level_maps(schema_.covariates, dataset.covariate_meta());

  HistoryMatrix h;
  h.step = t;
  h.column_names = column_names(t);
  h.row_ids = dataset.patient_ids();
  h.rows.resize(static_cast<Eigen::Index>(dataset.size()), static_cast<Eigen::Index>(d));
  std::size_t unseen = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& tr = dataset[i];
    double* out = h.rows.data() + i * d;
    for (std::size_t k = 0; k < schema_.baseline.size(); ++k) {
      if (!encode_cell(schema_.baseline[k], base_maps[k], tr.baseline[k], out)) ++unseen;
      out += encoded_width(schema_.baseline[k]);
    }
    for (int s = 0; s < t - 1; ++s) *out++ = tr.treatments[static_cast<std::size_t>(s)];
    for (int s = 0; s < t; ++s) {
      for (std::size_t k = 0; k < schema_.covariates.size(); ++k) {
        if (!encode_cell(schema_.covariates[k], cov_maps[k],
                         tr.covariates(s, static_cast<Eigen::Index>(k)), out))
          ++unseen;
        out += encoded_width(schema_.covariates[k]);
      }
    }
  }
  if (unseen > 0)
    logger().warn("step {}: {} categorical cell(s) hold levels unseen at fit time; encoded as all-zero",
                  t, unseen);
  return h;
}

HistoryMatrix build_history(const LongitudinalDataset& dataset, int t) {
  return HistoryEncoder(dataset.schema()).encode(dataset, t);
}

// ---------------------------------------------------------------------------------------

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    fields.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

double parse_number(std::string_view field, std::size_t row, const std::string& column) {
  if (field.empty()) throw ParseError(row, fmt::format("row {}: missing value in column '{}'", row, column));
  std::string_view s = field;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ParseError(row, fmt::format("row {}: column '{}' holds non-numeric value '{}'", row, column,
                                      std::string(field)));
  return v;
}

// Column-level parsing state: a categorical column either has fixed levels (from the
// schema) or discovers them in first-observed order.
struct LevelBook {
  std::vector<std::string> levels;
  std::unordered_map<std::string, int> index;
  bool fixed = false;

  explicit LevelBook(const ColumnMeta& meta) : levels(meta.levels), fixed(!meta.levels.empty()) {
    for (std::size_t l = 0; l < levels.size(); ++l) index[levels[l]] = static_cast<int>(l);
  }

  int code(std::string_view raw, std::size_t row, const std::string& column) {
    if (raw.empty()) throw ParseError(row, fmt::format("row {}: missing value in column '{}'", row, column));
    std::string key(raw);
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    if (fixed)
      throw ValidationError(
          fmt::format("row {}: column '{}' holds level '{}' not declared in the schema", row, column, key));
    const int c = static_cast<int>(levels.size());
    levels.push_back(key);
    index.emplace(std::move(key), c);
    return c;
  }
};

double parse_cell(const ColumnMeta& meta, LevelBook& book, std::string_view field, std::size_t row,
                  const std::string& column) {
  switch (meta.kind) {
    case ColumnKind::categorical:
      return book.code(field, row, column);
    case ColumnKind::binary: {
      const double v = parse_number(field, row, column);
      if (v != 0.0 && v != 1.0)
        throw ValidationError(fmt::format("row {}: binary column '{}' holds {}", row, column, v));
      return v;
    }
    case ColumnKind::continuous:
      break;
  }
  return parse_number(field, row, column);
}

}  // namespace

LongitudinalDataset parse_csv(std::istream& in, const Schema& schema) {
  schema.validate();
  const auto m = schema.baseline.size();
  const auto p = schema.covariates.size();
  const int T = schema.horizon;

  std::string line;
  if (!std::getline(in, line)) throw ParseError(0, "empty CSV input");
  const auto header = split_fields(line);
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t c = 0; c < header.size(); ++c) position.emplace(std::string(header[c]), c);

  auto locate = [&](const std::string& name) {
    auto it = position.find(name);
    if (it == position.end()) throw SchemaError(name, fmt::format("missing column '{}'", name));
    return it->second;
  };
  const auto id_col = locate("id");
  std::vector<std::size_t> base_cols(m);
  for (std::size_t k = 0; k < m; ++k) base_cols[k] = locate(fmt::format("c_{}", k + 1));
  std::vector<std::vector<std::size_t>> cov_cols(static_cast<std::size_t>(T), std::vector<std::size_t>(p));
  std::vector<std::size_t> a_cols(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    for (std::size_t j = 0; j < p; ++j)
      cov_cols[static_cast<std::size_t>(t - 1)][j] = locate(fmt::format("x{}_{}", t, j + 1));
    a_cols[static_cast<std::size_t>(t - 1)] = locate(fmt::format("a{}", t));
  }
  const auto y_col = locate("y");

  std::vector<LevelBook> base_books;
  for (const auto& c : schema.baseline) base_books.emplace_back(c);
  std::vector<LevelBook> cov_books;
  for (const auto& c : schema.covariates) cov_books.emplace_back(c);

  std::vector<Trajectory> trajectories;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto f = split_fields(line);
    if (f.size() != header.size())
      throw ParseError(row, fmt::format("row {}: expected {} fields, found {}", row, header.size(), f.size()));
    Trajectory tr;
    tr.patient_id = std::string(f[id_col]);
    if (tr.patient_id.empty()) throw ParseError(row, fmt::format("row {}: missing patient id", row));
    tr.baseline.resize(m);
    for (std::size_t k = 0; k < m; ++k)
      tr.baseline[k] = parse_cell(schema.baseline[k], base_books[k], f[base_cols[k]], row,
                                  fmt::format("c_{}", k + 1));
    tr.covariates.resize(T, static_cast<Eigen::Index>(p));
    tr.treatments.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      const auto st = static_cast<std::size_t>(t);
      for (std::size_t j = 0; j < p; ++j)
        tr.covariates(t, static_cast<Eigen::Index>(j)) = parse_cell(
            schema.covariates[j], cov_books[j], f[cov_cols[st][j]], row, fmt::format("x{}_{}", t + 1, j + 1));
      const auto a_name = fmt::format("a{}", t + 1);
      const double a = parse_number(f[a_cols[st]], row, a_name);
      if (a != 0.0 && a != 1.0)
        throw ValidationError(fmt::format("row {}: treatment {} is {}; expected 0 or 1", row, a_name, a));
      tr.treatments[st] = static_cast<int>(a);
    }
    tr.outcome = parse_number(f[y_col], row, "y");
    trajectories.push_back(std::move(tr));
  }
  if (trajectories.empty()) throw ParseError(0, "CSV contains no data rows");

  std::vector<ColumnMeta> base_meta = schema.baseline;
  for (std::size_t k = 0; k < m; ++k)
    if (base_meta[k].kind == ColumnKind::categorical) base_meta[k].levels = base_books[k].levels;
  std::vector<ColumnMeta> cov_meta = schema.covariates;
  for (std::size_t j = 0; j < p; ++j)
    if (cov_meta[j].kind == ColumnKind::categorical) cov_meta[j].levels = cov_books[j].levels;
  return LongitudinalDataset(std::move(trajectories), std::move(base_meta), std::move(cov_meta), T);
}

LongitudinalDataset load_csv(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
  return parse_csv(in, schema);
}

namespace {

std::string cell_text(const ColumnMeta& meta, double v) {
  switch (meta.kind) {
    case ColumnKind::categorical:
      return meta.levels[static_cast<std::size_t>(v)];
    case ColumnKind::binary:
      return v != 0.0 ? "1" : "0";
    case ColumnKind::continuous:
      break;
  }
  return format_real(v);
}

}  // namespace

void write_csv(std::ostream& out, const LongitudinalDataset& ds) {
  const auto m = ds.baseline_width();
  const auto p = ds.covariate_width();
  const int T = ds.horizon();
  out << "id";
  for (std::size_t k = 0; k < m; ++k) out << ",c_" << k + 1;
  for (int t = 1; t <= T; ++t) {
    for (std::size_t j = 0; j < p; ++j) out << ",x" << t << '_' << j + 1;
    out << ",a" << t;
  }
  out << ",y\n";
  for (const auto& tr : ds.trajectories()) {
    out << tr.patient_id;
    for (std::size_t k = 0; k < m; ++k) out << ',' << cell_text(ds.baseline_meta()[k], tr.baseline[k]);
    for (int t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < p; ++j)
        out << ',' << cell_text(ds.covariate_meta()[j], tr.covariates(t, static_cast<Eigen::Index>(j)));
      out << ',' << tr.treatments[static_cast<std::size_t>(t)];
    }
    out << ',' << format_real(tr.outcome) << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const LongitudinalDataset& ds) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  write_csv(out, ds);
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

}  // namespace dtr
