#include <benchmark/benchmark.h>

#include "qivnom/kernels.hpp"
#include "qivnom/rng.hpp"
#include "qivnom/sim.hpp"

using namespace qivnom;

namespace {

Mat cost(Eigen::Index f, Eigen::Index k) {
  Rng rng(3);
  Mat d(f, k);
  for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = rng.uniform();
  return d;
}

template <kernels::Backend B>
void BM_lse_rows(benchmark::State& st) {
  const Eigen::Index n = st.range(0);
  const Mat d = cost(n, n);
  const Vec pot = Vec::Zero(n);
  Vec out(n);
  for (auto _ : st) {
    kernels::lse_rows(B, d, pot, 1e-2, out);
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * n * n);
}
BENCHMARK(BM_lse_rows<kernels::Backend::Serial>)->RangeMultiplier(4)->Range(16, 1024);
BENCHMARK(BM_lse_rows<kernels::Backend::OpenMP>)->RangeMultiplier(4)->Range(16, 1024);

template <kernels::Backend B>
void BM_run_all(benchmark::State& st) {
  std::vector<ScenarioConfig> jobs;
  for (int i = 0; i < 4; ++i) {
    ScenarioConfig c = scenario("S1");
    c.duration_s = 20;
    c.seed = static_cast<std::uint64_t>(i);
    jobs.push_back(c);
  }
  for (auto _ : st) benchmark::DoNotOptimize(run_all(jobs, B));
}
BENCHMARK(BM_run_all<kernels::Backend::Serial>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_run_all<kernels::Backend::OpenMP>)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
