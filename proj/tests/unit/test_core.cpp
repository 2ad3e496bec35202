#include "doctest.h"
#include "fixtures.hpp"

#include "dtr/baselines.hpp"
#include "dtr/core.hpp"
#include "dtr/error.hpp"

#include <algorithm>
#include <map>
#include <sstream>

using namespace dtr;

namespace {

Schema tiny_schema(int T) {
  Schema s;
  s.baseline = {{"age", ColumnKind::continuous, {}}};
  s.covariates = {{"bp", ColumnKind::continuous, {}}};
  s.horizon = T;
  return s;
}

}  // namespace

TEST_CASE("minimal CSV loads") {
  std::istringstream in("id,c_1,x1_1,a1,y\np1,0.5,1.0,0,3\np2,-1,2.5,1,4.25\n");
  const auto ds = parse_csv(in, tiny_schema(1));
  CHECK(ds.size() == 2);
  CHECK(ds.horizon() == 1);
  CHECK(ds[0].patient_id == "p1");
  CHECK(ds[1].treatments[0] == 1);
  CHECK(ds[1].outcome == 4.25);
}

TEST_CASE("missing treatment column is named") {
  std::istringstream in("id,c_1,x1_1,a1,x2_1,y\np1,0,1,0,1,3\n");
  try {
    parse_csv(in, tiny_schema(2));
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(e.column() == "a2");
  }
}

TEST_CASE("non-numeric continuous value reports the row") {
  std::istringstream in("id,c_1,x1_1,a1,y\np1,0,1,0,3\np2,0,abc,1,3\n");
  try {
    parse_csv(in, tiny_schema(1));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
  }
}

TEST_CASE("treatment outside {0,1} is rejected") {
  std::istringstream in("id,c_1,x1_1,a1,y\np1,0,1,2,3\n");
  CHECK_THROWS_AS(parse_csv(in, tiny_schema(1)), ValidationError);
}

TEST_CASE("missing values are rejected") {
  std::istringstream in("id,c_1,x1_1,a1,y\np1,,1,0,3\n");
  CHECK_THROWS_AS(parse_csv(in, tiny_schema(1)), ParseError);
}

TEST_CASE("CSV round trip is bit-identical") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto ds = fixtures::random_dataset(30, 2, 3, 3, seed);
    std::stringstream buf;
    write_csv(buf, ds);
    const auto back = parse_csv(buf, ds.schema());
    CHECK(back == ds);
  }
}

TEST_CASE("history widths follow the block arithmetic") {
  const auto a = fixtures::random_dataset(5, 2, 1, 1, 3, false);
  CHECK(build_history(a, 1).width() == 3);
  const auto b = fixtures::random_dataset(5, 2, 7, 3, 3, false);
  CHECK(build_history(b, 3).width() == 25);
  CHECK_THROWS_AS(build_history(b, 0), DomainError);
  CHECK_THROWS_AS(build_history(b, 4), DomainError);
}

TEST_CASE("history column order and nesting") {
  const auto ds = fixtures::random_dataset(12, 2, 3, 3, 11);
  const HistoryEncoder enc(ds.schema());
  const auto h1 = enc.encode(ds, 1);
  const auto h2 = enc.encode(ds, 2);
  const auto h3 = enc.encode(ds, 3);
  CHECK(h1.column_names == std::vector<std::string>{"c1", "c2", "x1@1", "x2@1", "x3@1=mid", "x3@1=hi"});
  CHECK(h2.column_names[2] == "a1");
  for (const auto* pair : {&h1, &h2}) {
    const auto& small = *pair;
    const auto& big = pair == &h1 ? h2 : h3;
    for (std::size_t c = 0; c < small.width(); ++c) {
      const auto it = std::find(big.column_names.begin(), big.column_names.end(), small.column_names[c]);
      REQUIRE(it != big.column_names.end());
      const auto bc = static_cast<Eigen::Index>(it - big.column_names.begin());
      CHECK(small.rows.col(static_cast<Eigen::Index>(c)) == big.rows.col(bc));
    }
    CHECK(big.width() > small.width());
  }
}

TEST_CASE("encoding is deterministic and keeps continuous values") {
  const auto ds = fixtures::random_dataset(15, 1, 2, 2, 5);
  const auto a = build_history(ds, 2);
  const auto b = build_history(ds, 2);
  CHECK(a.rows == b.rows);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(a.rows(static_cast<Eigen::Index>(i), 0) == ds[i].baseline[0]);
    CHECK(a.rows(static_cast<Eigen::Index>(i), 2) == ds[i].covariates(0, 0));
  }
}

TEST_CASE("four-level categorical encodes to three columns reproducing group means") {
  Rng rng(9);
  std::normal_distribution<double> nd;
  std::vector<Trajectory> trs;
  std::map<int, std::pair<double, int>> groups;
  for (int i = 0; i < 80; ++i) {
    Trajectory tr;
    tr.patient_id = std::to_string(i);
    tr.covariates.resize(1, 1);
    const int lvl = i % 4;
    tr.covariates(0, 0) = lvl;
    tr.treatments = {0};
    tr.outcome = 2.0 * lvl + nd(rng);
    groups[lvl].first += tr.outcome;
    groups[lvl].second += 1;
    trs.push_back(tr);
  }
  const LongitudinalDataset ds(trs, {}, {{"g", ColumnKind::categorical, {"a", "b", "c", "d"}}}, 1);
  const auto h = build_history(ds, 1);
  REQUIRE(h.width() == 3);
  Matrix design(h.rows.rows(), 4);
  design.col(0).setOnes();
  design.rightCols(3) = h.rows;
  const Vector y = ds.outcomes();
  const std::vector<double> yv(y.data(), y.data() + y.size()), w(yv.size(), 1.0);
  const auto beta = wls_solve(design, yv, w);
  const double ref = groups[0].first / groups[0].second;
  CHECK(beta[0] == doctest::Approx(ref).epsilon(1e-10));
  for (int k = 1; k < 4; ++k) CHECK(beta[k] == doctest::Approx(groups[k].first / groups[k].second - ref).epsilon(1e-10));
}

TEST_CASE("unseen level encodes as all zero") {
  const auto train = fixtures::random_dataset(6, 1, 2, 1, 2);
  const HistoryEncoder enc(train.schema());
  auto trs = train.trajectories();
  trs[0].covariates(0, 1) = 3;
  auto meta = train.covariate_meta();
  meta[1].levels.push_back("new");
  LongitudinalDataset other(trs, train.baseline_meta(), meta, 1);
  const auto h = enc.encode(other, 1);
  CHECK(h.rows(0, 2) == 0.0);
  CHECK(h.rows(0, 3) == 0.0);
}

TEST_CASE("schema mismatch names the column") {
  const auto ds = fixtures::random_dataset(4, 1, 2, 1, 2);
  const HistoryEncoder enc(ds.schema());
  auto s = ds.schema();
  s.covariates[1].name = "renamed";
  try {
    enc.check_compatible(s);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(e.column() == "renamed");
  }
}

TEST_CASE("schema JSON round trip and validation") {
  const auto ds = fixtures::random_dataset(4, 2, 2, 2, 2);
  const auto s = ds.schema();
  const auto back = Schema::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());
  auto j = s.to_json();
  j["covariates"][0]["name"] = "c1";
  CHECK_THROWS_AS(Schema::from_json(j), ValidationError);
}

TEST_CASE("categorical levels are discovered in first-observed order") {
  Schema s;
  s.covariates = {{"g", ColumnKind::categorical, {}}};
  s.horizon = 1;
  std::istringstream in("id,x1_1,a1,y\na,z,0,1\nb,y,1,2\nc,z,0,3\n");
  const auto ds = parse_csv(in, s);
  CHECK(ds.covariate_meta()[0].levels == std::vector<std::string>{"z", "y"});
  CHECK(ds[2].covariates(0, 0) == 0.0);
}

TEST_CASE("format_real round-trips") {
  Rng rng(4);
  std::normal_distribution<double> nd(0, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = nd(rng);
    CHECK(std::stod(format_real(v)) == v);
  }
}
