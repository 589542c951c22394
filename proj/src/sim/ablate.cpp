#include <cmath>
#include <numeric>

#include "qivnom/error.hpp"
#include "qivnom/sim.hpp"

namespace qivnom {

std::vector<MetricsReport> run_all(const std::vector<ScenarioConfig>& jobs, kernels::Backend backend) {
  for (const auto& j : jobs) j.validate();
  std::vector<MetricsReport> out(jobs.size());
  const auto n = static_cast<long>(jobs.size());
  if (backend == kernels::Backend::Serial) {
    for (long i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = run(jobs[static_cast<std::size_t>(i)]);
    return out;
  }
  // Errors cannot cross the parallel region; keep the first by job index.
  std::vector<std::exception_ptr> errors(jobs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = run(jobs[static_cast<std::size_t>(i)]);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
}

}  // namespace

AblationTable ablate(const std::vector<ScenarioConfig>& bases, const std::vector<Variant>& variants, int replications,
                     kernels::Backend backend) {
  if (replications < 1) fail(Errc::ConfigError, "replications must be >= 1");
  if (bases.empty() || variants.empty()) fail(Errc::ConfigError, "ablation needs scenarios and variants");
  AblationTable table;
  table.variants = variants;
  std::vector<ScenarioConfig> jobs;
  for (const auto& b : bases) {
    table.scenarios.push_back(b.name);
    for (Variant v : variants) {
      for (int i = 0; i < replications; ++i) {
        ScenarioConfig c = b;
        c.variant = v;
        c.seed = b.seed + static_cast<std::uint64_t>(i);
        jobs.push_back(std::move(c));
      }
    }
  }
  std::vector<MetricsReport> results = run_all(jobs, backend);
  std::size_t next = 0;
  for (const auto& b : bases) {
    for (Variant v : variants) {
      AblationCell cell;
      cell.scenario = b.name;
      cell.variant = v;
      std::vector<double> lat, pdr, rel;
      for (int i = 0; i < replications; ++i) {
        MetricsReport& r = results[next++];
        if (r.mean_latency_ms) lat.push_back(*r.mean_latency_ms);
        pdr.push_back(r.pdr_pct);
        rel.push_back(r.reliability_pct);
        cell.reps.push_back(std::move(r));
      }
      mean_std(lat, cell.latency_mean, cell.latency_std);
      mean_std(pdr, cell.pdr_mean, cell.pdr_std);
      mean_std(rel, cell.reliability_mean, cell.reliability_std);
      table.cells.push_back(std::move(cell));
    }
  }
  return table;
}

double sign_test_p(int wins, int losses) {
  if (wins < 0 || losses < 0) fail(Errc::InvalidArgument, "counts must be nonnegative");
  const int n = wins + losses;
  if (n == 0) return 1.0;
  // log-space binomial tail
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace qivnom
