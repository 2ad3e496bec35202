#pragma once

#include "dtr/core.hpp"

#include <cstdlib>
#include <unistd.h>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace fixtures {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dtr_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Random dataset: m continuous baselines, p covariates (the last one categorical with 3
/// levels when `categorical`), horizon T.
inline dtr::LongitudinalDataset random_dataset(std::size_t n, std::size_t m, std::size_t p, int T, std::uint64_t seed,
                                               bool categorical = true) {
  dtr::Rng rng(seed);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> level(0, 2);
  std::vector<dtr::ColumnMeta> base, cov;
  for (std::size_t k = 0; k < m; ++k) base.push_back({"c" + std::to_string(k + 1), dtr::ColumnKind::continuous, {}});
  for (std::size_t j = 0; j < p; ++j) {
    if (categorical && j + 1 == p)
      cov.push_back({"x" + std::to_string(j + 1), dtr::ColumnKind::categorical, {"lo", "mid", "hi"}});
    else
      cov.push_back({"x" + std::to_string(j + 1), dtr::ColumnKind::continuous, {}});
  }
  std::vector<dtr::Trajectory> trs;
  for (std::size_t i = 0; i < n; ++i) {
    dtr::Trajectory tr;
    tr.patient_id = "id" + std::to_string(i);
    for (std::size_t k = 0; k < m; ++k) tr.baseline.push_back(nd(rng));
    tr.covariates.resize(T, static_cast<Eigen::Index>(p));
    for (int t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < p; ++j)
        tr.covariates(t, static_cast<Eigen::Index>(j)) = cov[j].kind == dtr::ColumnKind::categorical ? level(rng) : nd(rng);
      tr.treatments.push_back(coin(rng) ? 1 : 0);
    }
    tr.outcome = nd(rng);
    trs.push_back(std::move(tr));
  }
  return dtr::LongitudinalDataset(std::move(trs), base, cov, T);
}

/// Brute-force weighted mean difference, written independently of the library.
inline double direct_leaf_effect(const std::vector<double>& y, const std::vector<int>& a, const std::vector<double>& w,
                                 const std::vector<std::size_t>& members) {
  long double st = 0, wt = 0, sc = 0, wc = 0;
  for (std::size_t i : members) {
    if (a[i] == 1) {
      st += static_cast<long double>(w[i]) * y[i];
      wt += w[i];
    } else {
      sc += static_cast<long double>(w[i]) * y[i];
      wc += w[i];
    }
  }
  return static_cast<double>(st / wt - sc / wc);
}

}  // namespace fixtures
