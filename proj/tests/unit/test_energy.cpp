#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "qivnom/energy.hpp"
#include "qivnom/error.hpp"

using namespace qivnom;

namespace {
Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}
}  // namespace

TEST_CASE("assemble_cost") {
  CostBundle single;
  single.per_objective[Objective::Latency] = vec({1, 2, 3});
  single.weights[Objective::Latency] = 1.0;
  CHECK(assemble_cost(single) == vec({1, 2, 3}));

  CostBundle table;
  const double w[] = {0.4, 0.3, 0.2, 0.1};
  for (int q = 0; q < 4; ++q) {
    table.per_objective[kAllObjectives[q]] = Vec::Ones(5);
    table.weights[kAllObjectives[q]] = w[q];
  }
  CHECK((assemble_cost(table).array() - 1.0).abs().maxCoeff() < 1e-15);

  CostBundle two;
  two.per_objective[Objective::Latency] = vec({1, 0});
  two.per_objective[Objective::Reliability] = vec({0, 2});
  two.weights = {{Objective::Latency, 1.0}, {Objective::Reliability, 1.0}};
  CHECK(assemble_cost(two) == vec({1, 2}));

  two.per_objective[Objective::Energy] = vec({1, 2, 3});
  two.weights[Objective::Energy] = 1.0;
  CHECK_THROWS_AS(assemble_cost(two), Error);

  CostBundle neg = single;
  neg.weights[Objective::Latency] = -1.0;
  CHECK_THROWS_AS(assemble_cost(neg), Error);
}

TEST_CASE("penalized_operator") {
  CHECK(penalized_operator(vec({1, 2}), vec({-1, 0}), 5.0) == vec({1, 2}));
  CHECK(penalized_operator(vec({1, 1}), vec({-1, 0.5}), 2.0) == vec({1, 1.5}));
  CHECK(penalized_operator(vec({1, 1}), vec({3, 3}), 0.0) == vec({1, 1}));
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const Vec h = oracle::random_vec(rng, 6, 0, 1);
    const Vec g = oracle::random_vec(rng, 6, -1, 1);
    const double r1 = rng.uniform(0, 10), r2 = r1 + rng.uniform(0, 10);
    CHECK((penalized_operator(h, g, r2) - penalized_operator(h, g, r1)).minCoeff() >= 0.0);
  }
}

TEST_CASE("energy and gradient") {
  CHECK(energy(Amplitudes::basis(2, 0), vec({1, 2})) == 1.0);
  CHECK(energy(Amplitudes::uniform(2), vec({1, 2})) == doctest::Approx(1.5));
  Rng rng(2);
  const Amplitudes any = Amplitudes::normalized(oracle::random_vec(rng, 7));
  CHECK(energy(any, Vec::Constant(7, 2.5)) == doctest::Approx(2.5));
  CHECK(energy_gradient(Amplitudes::basis(2, 0), vec({3, 5})) == vec({6, 0}));
  CHECK(energy_gradient(any, Vec::Zero(7)).norm() == 0.0);

  SUBCASE("sign flips leave energy unchanged and bounds hold") {
    for (int rep = 0; rep < 100; ++rep) {
      const Vec h = oracle::random_vec(rng, 8, 0, 3);
      Vec v = oracle::random_vec(rng, 8);
      const double e = energy(Amplitudes::normalized(v), h);
      CHECK(e >= h.minCoeff() - 1e-12);
      CHECK(e <= h.maxCoeff() + 1e-12);
      v[rng.below(8)] *= -1;
      CHECK(energy(Amplitudes::normalized(v), h) == doctest::Approx(e).epsilon(1e-14));
    }
  }
  SUBCASE("finite differences") {
    double worst = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
      const Vec h = oracle::random_vec(rng, 8, 0, 3);
      const Vec x = oracle::random_vec(rng, 8);
      // energy of the unnormalized quadratic form; gradient 2 H x.
      const Vec fd = oracle::central_diff([&](const Vec& y) { return h.dot(y.cwiseAbs2()); }, x);
      const Amplitudes psi = Amplitudes::normalized(x);
      const Vec g = energy_gradient(psi, h) * x.norm();
      worst = std::max(worst, oracle::rel_err(g, fd));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("tchebycheff") {
  const auto eq = tchebycheff(vec({2, 2}), vec({0, 0}), 1e-3);
  CHECK(eq.value == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(eq.alpha[0] == doctest::Approx(0.5).epsilon(1e-9));

  CHECK(tchebycheff(vec({0, 0}), vec({0, 0}), 1e-3).value == 0.0);

  const auto edge = tchebycheff(vec({4, 0}), vec({0, 0}), 1e-3);
  CHECK(edge.value == doctest::Approx(0.004).epsilon(1e-9));
  CHECK(edge.alpha[0] == doctest::Approx(0.001).epsilon(1e-9));
  CHECK(edge.alpha[1] == doctest::Approx(0.999).epsilon(1e-9));

  CHECK_THROWS_AS(tchebycheff(vec({1, 1, 1}), vec({0, 0, 0}), 0.4), Error);
  try {
    tchebycheff(vec({1, 1, 1}), vec({0, 0, 0}), 0.4);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InfeasibleSimplex);
  }

  std::map<Objective, double> c{{Objective::Latency, 3.0}, {Objective::Energy, 1.0}};
  const auto m = tchebycheff(c, {}, 1e-3);
  CHECK(m.value == doctest::Approx(0.75).epsilon(1e-3));

  SUBCASE("matches brute-force grid for |Q| in {2,3}") {
    Rng rng(4);
    for (int rep = 0; rep < 30; ++rep) {
      const Vec d2 = oracle::random_vec(rng, 2, 0, 1);
      CHECK(std::abs(tchebycheff(d2, Vec::Zero(2)).value - oracle::tcheb_brute(d2, 1e-3, 10000)) <= 1e-4);
      const Vec d3 = oracle::random_vec(rng, 3, 0, 1);
      // the brute grid has ~5e7/2 points at n = 10^4 per axis pair; use n = 600 (~1.8e5 points)
      CHECK(std::abs(tchebycheff(d3, Vec::Zero(3)).value - oracle::tcheb_brute(d3, 1e-3, 600)) <= 1.0 / 200);
    }
  }
  SUBCASE("four objectives approach the analytic optimum") {
    // With all d > 0 the optimum equalizes alpha_q d_q: value = 1 / sum(1/d).
    Rng rng(6);
    for (int rep = 0; rep < 20; ++rep) {
      const Vec d = oracle::random_vec(rng, 4, 0.2, 1);
      const double exact = 1.0 / d.cwiseInverse().sum();
      const auto s = tchebycheff(d, Vec::Zero(4));
      CHECK(s.value >= exact - 1e-12);
      CHECK(s.value <= exact * 1.05);
      CHECK(s.alpha.sum() == doctest::Approx(1.0));
      CHECK(s.alpha.minCoeff() >= 1e-3 - 1e-12);
    }
  }
}

TEST_CASE("project_feasible") {
  Rng rng(8);
  const Amplitudes psi = Amplitudes::normalized(oracle::random_vec(rng, 5));
  CHECK(project_feasible(psi, FeasibleSet::unconstrained(5)).values() == psi.values());

  FeasibleSet forbid2{Vec::Ones(2), {1}};
  const Amplitudes e1 = project_feasible(Amplitudes::normalized(vec({0.6, 0.8})), forbid2);
  CHECK(e1[0] == doctest::Approx(1.0));
  CHECK(e1[1] == 0.0);

  FeasibleSet half{Vec::Constant(3, 0.5), {}};
  const Amplitudes u3 = Amplitudes::uniform(3);
  CHECK((project_feasible(u3, half).values() - u3.values()).norm() < 1e-15);

  try {
    project_feasible(Amplitudes::basis(2, 1), forbid2);
    FAIL("expected NoFeasiblePoint");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NoFeasiblePoint);
  }

  SUBCASE("random instances: caps, forbidden, idempotence") {
    int violations = 0;
    for (int rep = 0; rep < 1000; ++rep) {
      const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.below(63));
      FeasibleSet fs{Vec::Ones(k), {}};
      for (Eigen::Index i = 0; i < k; ++i) {
        if (rng.bernoulli(0.1) && static_cast<Eigen::Index>(fs.forbidden.size()) + 1 < k) {
          fs.forbidden.push_back(i);
        } else if (rng.bernoulli(0.5)) {
          fs.prob_upper_bounds[i] = rng.uniform(0.02, 0.6);
        }
      }
      double allowed_caps = 0.0;
      for (Eigen::Index i = 0; i < k; ++i)
        if (!fs.is_forbidden(i)) allowed_caps += fs.prob_upper_bounds[i];
      if (allowed_caps < 1.0) continue;
      const Amplitudes in = Amplitudes::normalized(oracle::random_vec(rng, k));
      const Amplitudes once = project_feasible(in, fs);
      const Amplitudes twice = project_feasible(once, fs);
      const Vec p = once.values().cwiseAbs2();
      if (std::abs(once.values().norm() - 1.0) > 1e-9) ++violations;
      for (Eigen::Index i = 0; i < k; ++i) {
        if (fs.is_forbidden(i) && p[i] != 0.0) ++violations;
        if (p[i] > fs.prob_upper_bounds[i] + 1e-9) ++violations;
      }
      if ((twice.values() - once.values()).cwiseAbs().maxCoeff() > 1e-9) ++violations;
    }
    CHECK(violations == 0);
  }
}

TEST_CASE("descent_certificate") {
  CHECK(descent_certificate(1.0, 1.0, 0.0, 0.1, 1.0));
  const double l = 4.0, eta = 1.0 / (2 * l), g2 = 3.0;
  CHECK(descent_certificate(1.0 - eta * g2 / 2, 1.0, g2, eta, l));
  CHECK_FALSE(descent_certificate(1.1, 1.0, 2.0, 1e-3, 1.0));
}

TEST_CASE("feasible set residuals") {
  FeasibleSet fs{vec({0.5, 1.0, 0.3}), {2}};
  const Vec g = fs.residuals(vec({0.6, 0.2, 0.2}));
  CHECK(g[0] == doctest::Approx(0.1));
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 1e3);
  CHECK(minmax_normalize(vec({2, 4, 3})) == vec({0, 1, 0.5}));
  CHECK(minmax_normalize(vec({2, 2})) == vec({0, 0}));
}
