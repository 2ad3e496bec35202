// Serial reference path vs OpenMP kernels. Arg 0 = serial, 1 = parallel.
//   ./dtr_bench --benchmark_filter=Forest
// With one core the two paths should time the same; the point is that they agree and where
// the parallel path pays off on bigger machines.

#include "dtr/baselines.hpp"
#include "dtr/causal_forest.hpp"
#include "dtr/regression_tree.hpp"

#include <benchmark/benchmark.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <random>

using namespace dtr;

namespace {

struct Data {
  Matrix x;
  std::vector<double> y, w;
  std::vector<int> a;
};

Data make(std::size_t n, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u;
  Data s;
  s.x.resize(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int c = 0; c < d; ++c) s.x(r, c) = nd(rng);
    const int a = u(rng) < 1 / (1 + std::exp(-0.5 * s.x(r, 1))) ? 1 : 0;
    s.a.push_back(a);
    s.y.push_back(s.x(r, 2) + a * (s.x(r, 0) > 0 ? 1.0 : -1.0) + nd(rng));
    s.w.push_back(1.0);
  }
  return s;
}

Execution mode(const benchmark::State& st) { return st.range(0) ? Execution::parallel : Execution::serial; }

ForestParams params(int trees) {
  ForestParams p;
  p.n_trees = trees;
  p.nuisance_trees = 50;
  p.seed = 1;
  return p;
}

void BM_GrowForest(benchmark::State& st) {
  const auto d = make(2000, 10, 1);
  const CausalData cd{d.x, d.y, d.a, d.w};
  for (auto _ : st) benchmark::DoNotOptimize(grow_forest(cd, params(100), mode(st)));
}

void BM_ForestPredict(benchmark::State& st) {
  const auto d = make(2000, 10, 2);
  const auto f = grow_forest(CausalData{d.x, d.y, d.a, d.w}, params(200), Execution::parallel);
  const auto q = make(2000, 10, 3);
  for (auto _ : st) benchmark::DoNotOptimize(f.predict(q.x, mode(st)));
}

void BM_CrossfitOutcomes(benchmark::State& st) {
  const auto d = make(2000, 10, 4);
  const auto folds = crossfit_folds(2000, 5, 9);
  const auto rp = nuisance_params(params(1), 10);
  for (auto _ : st) benchmark::DoNotOptimize(crossfit_outcomes(d.x, d.y, folds, 5, rp, mode(st)));
}

void BM_KnnPredict(benchmark::State& st) {
  const auto d = make(3000, 10, 5);
  const KnnModel m(d.x, d.a, d.y, 10);
  for (auto _ : st) benchmark::DoNotOptimize(m.predict(d.x, mode(st)));
}

}  // namespace

BENCHMARK(BM_GrowForest)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForestPredict)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CrossfitOutcomes)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KnnPredict)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  logger().set_level(spdlog::level::err);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
