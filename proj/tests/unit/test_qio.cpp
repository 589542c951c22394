#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "qivnom/error.hpp"
#include "qivnom/qio.hpp"

using namespace qivnom;

namespace {

CostBundle latency_only(const Vec& c) {
  CostBundle b;
  b.per_objective[Objective::Latency] = c;
  b.weights[Objective::Latency] = 1.0;
  return b;
}

QioConfig small(Eigen::Index k, int iters) {
  QioConfig cfg;
  cfg.K = k;
  cfg.max_iters = iters;
  return cfg;
}

double max_norm_dev(const QioTrace& tr) {
  double m = 0.0;
  for (const auto& r : tr) m = std::max(m, std::abs(r.psi_norm - 1.0));
  return m;
}

}  // namespace

TEST_CASE("step_size_backoff") {
  CHECK(step_size_backoff(0.01, 0) == 0.01);
  CHECK(step_size_backoff(0.01, 1) == 0.005);
  CHECK(step_size_backoff(0.01, 30) == 1e-8);
}

TEST_CASE("optimize on fixed diagonal costs") {
  const Vec c = (Vec(4) << 3, 1, 2, 4).finished();
  const QioResult r = optimize(Vec(), constant_costs(latency_only(c)), FeasibleSet::unconstrained(4), small(4, 5000));
  CHECK(r.distribution[1] >= 0.99);
  CHECK(r.plan == 1);
  CHECK(max_norm_dev(r.trace) <= 1e-9);
  CHECK(r.trace.back().energy <= r.trace.front().energy);
}

TEST_CASE("optimize with equal costs keeps the uniform policy") {
  const QioResult r =
      optimize(Vec(), constant_costs(latency_only(Vec::Constant(5, 2.0))), FeasibleSet::unconstrained(5), small(5, 500));
  CHECK(0.5 * (r.distribution.probs().array() - 0.2).abs().sum() <= 1e-6);
}

TEST_CASE("optimize respects a forbidden plan") {
  const Vec c = (Vec(4) << 3, 1, 2, 4).finished();
  FeasibleSet fs = FeasibleSet::unconstrained(4);
  fs.forbidden = {1};
  const QioResult r = optimize(Vec(), constant_costs(latency_only(c)), fs, small(4, 5000));
  CHECK(r.plan == 2);
  CHECK(r.distribution[2] >= 0.99);
  CHECK(r.psi[1] == 0.0);
}

TEST_CASE("optimize respects probability caps") {
  const Vec c = (Vec(3) << 0, 1, 2).finished();
  FeasibleSet fs{(Vec(3) << 0.6, 1.0, 1.0).finished(), {}};
  const QioResult r = optimize(Vec(), constant_costs(latency_only(c)), fs, small(3, 3000));
  CHECK(r.psi[0] * r.psi[0] <= 0.6 + 1e-9);
  CHECK(r.psi[0] * r.psi[0] >= 0.55);
  CHECK(max_norm_dev(r.trace) <= 1e-9);
}

TEST_CASE("energy is non-increasing on constant operators") {
  Rng rng(21);
  int counterexamples = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.below(63));
    QioConfig cfg = small(k, 300);
    cfg.seed = rep;
    const QioResult r =
        optimize(Vec(), constant_costs(latency_only(oracle::random_vec(rng, k, 0, 1))), FeasibleSet::unconstrained(k), cfg);
    int backoffs = 0;
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      if (!r.trace[i - 1].accepted) ++backoffs;
      if (backoffs > 10 && r.trace[i].energy > r.trace[i - 1].energy) ++counterexamples;
      if (backoffs <= 10 && r.trace[i - 1].accepted && r.trace[i].energy > r.trace[i - 1].energy + 1e-15) {
        // accepted steps are certified; with eta * L < 1 they descend
        ++counterexamples;
      }
    }
  }
  CHECK(counterexamples == 0);
}

TEST_CASE("coupled mobility plans and determinism") {
  Rng rng(4);
  QioConfig cfg = small(6, 400);
  cfg.L = 3;
  cfg.seed = 77;
  CostBundle b;
  b.per_objective[Objective::Latency] = oracle::random_vec(rng, 6, 0, 1);
  b.per_objective[Objective::Reliability] = oracle::random_vec(rng, 6, 0, 1);
  b.weights = {{Objective::Latency, 0.6}, {Objective::Reliability, 0.4}};
  const QioResult a = optimize(Vec::Ones(3), constant_costs(b), FeasibleSet::unconstrained(6), cfg);
  const QioResult c = optimize(Vec::Ones(3), constant_costs(b), FeasibleSet::unconstrained(6), cfg);
  REQUIRE(a.trace.size() == c.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].energy == c.trace[i].energy);
    CHECK(a.trace[i].coupling == c.trace[i].coupling);
    CHECK(a.trace[i].selected == c.trace[i].selected);
  }
  CHECK(max_norm_dev(a.trace) <= 1e-9);
  double w = 0.0;
  for (const auto& [q, v] : a.state.weights) w += v;
  CHECK(w == doctest::Approx(1.0));
}

TEST_CASE("a flat operator stops at once") {
  CostBundle b;
  b.per_objective[Objective::Latency] = (Vec(2) << 0.0, 1.0).finished();
  b.per_objective[Objective::Energy] = (Vec(2) << 1.0, 0.0).finished();
  b.weights = {{Objective::Latency, 0.5}, {Objective::Energy, 0.5}};
  QioConfig cfg = small(2, 1000);
  cfg.scalarize = false;
  const QioResult r = optimize(Vec(), constant_costs(b), FeasibleSet::unconstrained(2), cfg);
  CHECK(r.converged);
  CHECK(r.trace.size() == 1);
  CHECK(r.state.backoffs == 0);
  CHECK(r.distribution[0] == doctest::Approx(0.5));
}

TEST_CASE("optimize errors") {
  QioConfig cfg = small(3, 10);
  CHECK_THROWS_AS(optimize(Vec(), constant_costs(latency_only(Vec::Ones(4))), FeasibleSet::unconstrained(3), cfg), Error);
  cfg.beta = 1.5;
  CHECK_THROWS_AS(optimize(Vec(), constant_costs(latency_only(Vec::Ones(3))), FeasibleSet::unconstrained(3), cfg), Error);
  QioConfig ok = small(2, 10);
  const auto bad = [](int, const Amplitudes&) {
    CostBundle b;
    b.per_objective[Objective::Latency] = (Vec(2) << 1.0, std::nan("")).finished();
    b.weights[Objective::Latency] = 1.0;
    return b;
  };
  CHECK_THROWS_AS(optimize(Vec(), bad, FeasibleSet::unconstrained(2), ok), Error);
}
