#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "qivnom/error.hpp"
#include "qivnom/vehicle.hpp"

using namespace qivnom;

namespace {

VehicleState state_with(const Vec& x) {
  VehicleState s;
  s.x = x;
  s.belief_mean = x;
  s.belief_cov = Mat::Identity(x.size(), x.size());
  return s;
}

}  // namespace

TEST_CASE("propagate_state") {
  Rng rng(3);
  Dynamics id{Mat::Identity(2, 2), Mat::Zero(2, 1), Mat(), Mat::Identity(2, 2)};
  const Vec x = (Vec(2) << 4.0, -1.0).finished();
  CHECK(propagate_state(state_with(x), id, {}, {}, rng).state.x.isApprox(x));

  Dynamics di{(Mat(2, 2) << 1, 1, 0, 1).finished(), (Mat(2, 1) << 0, 1).finished(), Mat(), Mat::Identity(2, 2)};
  const auto p = propagate_state(state_with((Vec(2) << 0.0, 1.0).finished()), di, MicroAction{1.0, 0}, {}, rng);
  CHECK(p.state.x[0] == doctest::Approx(1.0));
  CHECK(p.state.x[1] == doctest::Approx(2.0));
  CHECK(p.observation.isApprox(p.state.x));

  SUBCASE("noise stays inside the box") {
    Dynamics noisy = id;
    noisy.w_max = 0.3;
    const VehicleState s = state_with(Vec::Zero(2));
    for (int i = 0; i < 10000; ++i) {
      CHECK(propagate_state(s, noisy, {}, {}, rng).state.x.cwiseAbs().maxCoeff() <= 0.3);
    }
  }
  SUBCASE("messages enter through B") {
    Dynamics withb = id;
    withb.msg_gain = 0.5 * Mat::Identity(2, 2);
    const std::vector<Vec> msgs = {Vec::Ones(2), Vec::Ones(2)};
    CHECK(propagate_state(state_with(Vec::Zero(2)), withb, {}, msgs, rng).state.x.isApprox(Vec::Ones(2)));
  }
  const Dynamics lon = Dynamics::longitudinal(0.1);
  CHECK(lon.phi(0, 1) == doctest::Approx(0.1));
  CHECK(lon.gamma(1, 0) == doctest::Approx(0.1));
}

TEST_CASE("update_belief") {
  VehicleState s = state_with(Vec::Zero(1));
  const Mat one = Mat::Identity(1, 1);
  const VehicleState post = update_belief(s, Vec::Constant(1, 2.0), one, one);
  CHECK(post.belief_mean[0] == doctest::Approx(1.0));
  CHECK(post.belief_cov(0, 0) == doctest::Approx(0.5));

  const VehicleState same = update_belief(s, Vec::Zero(1), one, one);
  CHECK(same.belief_mean[0] == 0.0);
  CHECK(same.belief_cov(0, 0) <= 1.0);

  const VehicleState flat = update_belief(s, Vec::Constant(1, 2.0), one, Mat::Constant(1, 1, 1e12));
  CHECK(std::abs(flat.belief_mean[0]) < 1e-6);
  CHECK(std::abs(flat.belief_cov(0, 0) - 1.0) < 1e-6);

  SUBCASE("posterior covariance is Loewner-below the prior") {
    Rng rng(8);
    for (int rep = 0; rep < 50; ++rep) {
      const Mat a = oracle::random_mat(rng, 3, 3);
      VehicleState p = state_with(oracle::random_vec(rng, 3));
      p.belief_cov = a * a.transpose() + 0.1 * Mat::Identity(3, 3);
      const Mat h = oracle::random_mat(rng, 2, 3);
      const Mat b = oracle::random_mat(rng, 2, 2);
      const Mat r = b * b.transpose() + 0.1 * Mat::Identity(2, 2);
      const VehicleState q = update_belief(p, oracle::random_vec(rng, 2), h, r);
      const Eigen::SelfAdjointEigenSolver<Mat> es(p.belief_cov - q.belief_cov);
      CHECK(es.eigenvalues().minCoeff() >= -1e-9);
      CHECK((q.belief_cov - q.belief_cov.transpose()).norm() < 1e-12);
    }
  }
  s.belief_cov = Mat::Zero(1, 1);
  CHECK_THROWS_AS(update_belief(s, Vec::Zero(1), one, Mat::Zero(1, 1)), Error);
}

TEST_CASE("make_message") {
  const Vec x = (Vec(3) << 3.0, -5.0, 1.0).finished();
  CHECK(make_message(x, {}, 0).isZero());
  CHECK(make_message(x, {}, 5).isApprox(x));
  CHECK(make_message(x, {}, 2).isApprox((Vec(3) << 3.0, -5.0, 0.0).finished()));
  const std::vector<Eigen::Index> mask = {0, 2};
  CHECK(make_message(x, mask, 3).isApprox((Vec(3) << 3.0, 0.0, 1.0).finished()));
  // ties keep the lowest index
  CHECK(make_message(Vec::Ones(3), {}, 1).isApprox((Vec(3) << 1.0, 0.0, 0.0).finished()));
}

TEST_CASE("link_admissible and packet_success") {
  LinkMetrics m{10.0, 100.0, 256 * 8, 1e6, 0.0, 1.0};
  const auto edge = link_admissible(m, 10.0, 100.0, 256 * 8 / 1e6);
  CHECK(edge.admissible);
  CHECK(edge.prob == doctest::Approx(0.25));
  CHECK(edge.latency_s == doctest::Approx(2.048e-3));
  m.snr_db = 9.0;
  CHECK_FALSE(link_admissible(m, 10.0, 100.0, 1.0).admissible);
  m.phy_rate_bps = 0.0;
  CHECK_THROWS_AS(link_admissible(m, 10.0, 100.0, 1.0), Error);

  CHECK(packet_success(5.0, 5.0, 1.0, 0.9) == doctest::Approx(0.45));
  CHECK(packet_success(std::log(3.0), 0.0, 1.0, 1.0) == doctest::Approx(0.75));
  CHECK(packet_success(1e4, 0.0, 1.0, 0.8) == doctest::Approx(0.8));
  CHECK_THROWS_AS(packet_success(0, 0, 1, 0.0), Error);
  CHECK_THROWS_AS(packet_success(0, 0, 1, 1.5), Error);
  double prev = 0.0;
  for (double g = -40; g <= 40; g += 0.25) {
    const double p = packet_success(g, 3.0, 0.7, 0.95);
    CHECK(p >= prev);
    CHECK(p <= 0.95);
    prev = p;
  }
}

TEST_CASE("queue and phy profile") {
  CHECK(update_queue(5, 3, 2) == 4);
  CHECK(update_queue(1, 3, 0) == 0);
  Rng rng(4);
  double q = 0.0;
  for (int i = 0; i < 100000; ++i) {
    q = update_queue(q, rng.uniform(0, 3), rng.uniform(0, 3));
    REQUIRE(q >= 0.0);
  }
  CHECK(*select_phy_profile((Vec(2) << 1e6, 2e6).finished()).index == 1);
  CHECK_FALSE(select_phy_profile(Vec::Zero(3)).index.has_value());
  CHECK(*select_phy_profile(Vec::Constant(2, 5.0)).index == 0);
}

TEST_CASE("cvar_policy") {
  CHECK(cvar({1, 2, 3, 4}, 0.5) == doctest::Approx(3.5));
  CHECK(cvar({1, 2, 3, 4}, 0.0) == doctest::Approx(2.5));
  CHECK_THROWS_AS(cvar({}, 0.5), Error);

  const std::vector<MicroAction> acts = {{1.0, 0}, {-1.0, 0}, {0.0, 0}};
  const CostSampler constant = [](const MicroAction& a, Rng&) { return 3.0 + a.accel; };
  CHECK(cvar_policy(acts, constant, 0.9, 20, 1) == 1);

  // two-point {0 w.p. 0.95, 100 w.p. 0.05} against a constant 10
  const std::vector<MicroAction> two = {{0.0, 0}, {1.0, 0}};
  const CostSampler tp = [](const MicroAction& a, Rng& r) {
    if (a.accel == 0.0) return r.bernoulli(0.05) ? 100.0 : 0.0;
    return 10.0;
  };
  int prefer_constant = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) prefer_constant += cvar_policy(two, tp, 0.95, 100, seed) == 1;
  CHECK(prefer_constant >= 45);
  // under the mean the risky action usually wins (mean 5 < 10)
  int prefer_risky = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    prefer_risky += cvar_policy(two, tp, 0.95, 100, seed, RiskMeasure::Mean) == 0;
  }
  CHECK(prefer_risky >= 45);
  CHECK(cvar_policy(two, tp, 0.95, 100, 7) == cvar_policy(two, tp, 0.95, 100, 7));
}

TEST_CASE("safety_filter") {
  CHECK(safety_filter({1.0, 0}, 100.0, 0.0, 1.0, 3.0).accel == 1.0);
  CHECK(safety_filter({2.0, 0}, 5.0, 0.0, 1.0, 3.0).accel == doctest::Approx(0.0));
  CHECK(safety_filter({-1.0, 0}, 5.0, 0.0, 1.0, 3.0).accel == -1.0);
  CHECK(safety_filter({1.0, 0}, 2.0, 10.0, 1.0, 3.0).accel == -3.0);
  CHECK(safety_filter({9.0, 0}, 1e6, 0.0, 1.0, 3.0).accel == 3.0);

  Rng rng(12);
  for (int rep = 0; rep < 2000; ++rep) {
    const double gap = rng.uniform(0, 40), rel = rng.uniform(-10, 10), kappa = rng.uniform(0.1, 2), dt = 0.1;
    const MicroAction a = safety_filter({rng.uniform(-5, 5), 0}, gap, rel, kappa, 3.0, 5.0, dt);
    CHECK(std::abs(a.accel) <= 3.0);
    const bool feasible = barrier_accel_bound(gap, rel, kappa, 5.0, dt) >= -3.0;
    if (feasible) CHECK(-(rel + a.accel * dt) + kappa * (gap - 5.0) >= -1e-9);
  }
}

TEST_CASE("kkt_residual and energy ledger") {
  CHECK(kkt_residual(Vec::Zero(2), Vec::Ones(2), -1.0, 0.0) == 0.0);
  CHECK(kkt_residual(-2.0 * Vec::Ones(2), Vec::Ones(2), 0.0, 2.0) == doctest::Approx(0.0));
  CHECK(kkt_residual(Vec::Zero(1), Vec::Zero(1), -3.0, 0.5) >= 1.5);

  CHECK(update_energy_ledger(2.0, {}, Vec::Zero(2), 1.0, 1.0) == 2.0);
  CHECK(update_energy_ledger(0.0, {2.0, 0}, Vec(), 1.0, 0.0) == doctest::Approx(4.0));
  double e = 0.0;
  for (double r = 1; r < 100; r += 7) {
    const double next = update_energy_ledger(e, {}, Vec::Constant(1, r), 0.0, 1e-3);
    CHECK(next > e);
    e = next;
  }
  CHECK_THROWS_AS(update_energy_ledger(0, {}, Vec(), -1.0, 0.0), Error);
}

TEST_CASE("multiplicative_psi_update") {
  const Amplitudes u = Amplitudes::uniform(3);
  CHECK(multiplicative_psi_update(u, Vec::Zero(3), 1.0).values().isApprox(u.values()));
  const Amplitudes r = Amplitudes::normalized((Vec(3) << 1, 2, 3).finished());
  CHECK(multiplicative_psi_update(r, Vec::Constant(3, 4.2), 0.7).values().isApprox(r.values()));
  const Amplitudes out = multiplicative_psi_update(Amplitudes::uniform(2), (Vec(2) << 0.0, std::log(4.0)).finished(), 1.0);
  CHECK(out[0] == doctest::Approx(4.0 / std::sqrt(17.0)));
  CHECK(out[1] == doctest::Approx(1.0 / std::sqrt(17.0)));
  CHECK(multiplicative_psi_update(r, Vec::Constant(3, 50.0), 5.0).values().minCoeff() > 0.0);
}

TEST_CASE("offload, rate, priority") {
  auto d = offload_decide(10, 2, 2, 2, 2);
  CHECK(d.offload);
  CHECK(d.total_latency == 6);
  d = offload_decide(10, 3, 3, 3, 2);
  CHECK_FALSE(d.offload);
  CHECK(d.total_latency == 10);
  CHECK(offload_decide(6, 2, 2, 2, 0).offload);

  CHECK(shannon_rate(1.0, 7e6, 1.0) == doctest::Approx(7e6));
  CHECK(shannon_rate(1.0, 7e6, 0.0) == 0.0);
  CHECK(shannon_rate(0.5, 20e6, 3.0) == doctest::Approx(20e6));

  CHECK(priority_weight(0, 0, 0, {0.5, 0.3, 0.2}) == 0.0);
  CHECK(priority_weight(0.3, 0.9, 4.0, {1, 0, 0}) == doctest::Approx(0.3));
  const Vec w = normalize_priorities((Vec(3) << priority_weight(1, 2, 3, {0.5, 0.3, 0.2}),
                                      priority_weight(0.1, 0, 0, {0.5, 0.3, 0.2}),
                                      priority_weight(0, 0, 7, {0.5, 0.3, 0.2}))
                                         .finished());
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);
}

TEST_CASE("consensus") {
  const Mat w2 = (Mat(2, 2) << 0.5, 0.5, 0.5, 0.5).finished();
  const auto out = consensus_step({Vec::Constant(1, 0.0), Vec::Constant(1, 2.0)}, w2, {}, Vec());
  CHECK(out[0][0] == doctest::Approx(1.0));
  CHECK(out[1][0] == doctest::Approx(1.0));

  const std::vector<Vec> same(3, Vec::Constant(2, 4.0));
  Mat a3 = Mat::Ones(3, 3);
  const auto fixed = consensus_step(same, metropolis_weights(a3), {}, Vec());
  for (const Vec& v : fixed) CHECK(v.isApprox(Vec::Constant(2, 4.0)));

  SUBCASE("path graph contraction matches the spectrum") {
    Mat adj = Mat::Zero(4, 4);
    for (int i = 0; i < 3; ++i) adj(i, i + 1) = adj(i + 1, i) = 1;
    const Mat w = metropolis_weights(adj);
    // power iteration on W - 11^T/n
    const Mat c = w - Mat::Constant(4, 4, 0.25);
    Vec v = (Vec(4) << 1.0, -0.3, 0.2, 0.7).finished();
    double lam = 0.0;
    for (int it = 0; it < 5000; ++it) {
      const Vec next = c * v;
      lam = next.norm() / v.norm();
      v = next / next.norm();
    }
    CHECK(std::abs(consensus_contraction(w) - lam) < 1e-9);
    std::vector<Vec> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(Vec::Constant(1, v[i]));
    const double d0 = disagreement(xs);
    const double d1 = disagreement(consensus_step(xs, w, {}, Vec()));
    CHECK(std::abs(std::sqrt(d1 / d0) - consensus_contraction(w)) < 1e-9);
  }
  SUBCASE("disagreement shrinks on connected random graphs") {
    Rng rng(21);
    for (int rep = 0; rep < 40; ++rep) {
      const int n = 2 + static_cast<int>(rng.below(19));
      Mat adj = Mat::Zero(n, n);
      for (int i = 1; i < n; ++i) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i)));
        adj(i, j) = adj(j, i) = 1;
      }
      for (int e = 0; e < n; ++e) {
        const auto i = rng.below(n), j = rng.below(n);
        if (i != j) adj(i, j) = adj(j, i) = 1;
      }
      const Mat w = metropolis_weights(adj);
      CHECK(consensus_contraction(w) < 1.0);
      std::vector<Vec> xs;
      for (int i = 0; i < n; ++i) xs.push_back(oracle::random_vec(rng, 2));
      double prev = disagreement(xs);
      for (int it = 0; it < 10; ++it) {
        xs = consensus_step(xs, w, {}, Vec());
        const double d = disagreement(xs);
        CHECK(d <= prev + 1e-12);
        if (prev > 1e-20) CHECK(d < prev);
        prev = d;
      }
    }
  }
  CHECK_THROWS_AS(consensus_step({Vec::Zero(1), Vec::Zero(1)}, (Mat(2, 2) << 0.5, 0.2, 0.5, 0.5).finished(), {}, Vec()),
                  Error);
  CHECK_THROWS_AS(consensus_step({Vec::Zero(1), Vec::Zero(1)}, (Mat(2, 2) << 0, -0.2, -0.2, 0).finished(), {}, Vec()),
                  Error);
}

TEST_CASE("robust_path_floor and lyapunov_check") {
  auto f = robust_path_floor({{1.0, 1.0}}, 0.9);
  CHECK(f.rho == 1.0);
  CHECK(f.ok);
  f = robust_path_floor({{0.9, 0.9}, {0.5}}, 0.6);
  CHECK(f.rho == doctest::Approx(0.5));
  CHECK_FALSE(f.ok);
  CHECK(robust_path_floor({{0.0}}, 0.0).ok);
  CHECK_THROWS_AS(robust_path_floor({}, 0.5), Error);

  CHECK(lyapunov_check(2.0, 2.0, 0.0, 1.0, 0.1, 1.0));
  CHECK_FALSE(lyapunov_check(4.0, 2.0, 0.0, 1.0, 0.1, 1.0));

  // V = e^2 with e' = (1 - g) e + w
  Rng rng(5);
  double e = 3.0;
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const double w = rng.uniform(-0.1, 0.1);
    const double next = 0.7 * e + w;
    violations += !lyapunov_check(next * next, e * e, e * e, 0.01, 0.3, 3.0);
    e = next;
  }
  CHECK(violations == 0);
}

namespace {

VehicleEnv quiet_env(int targets) {
  VehicleEnv env;
  for (int t = 0; t < targets; ++t) {
    LinkCandidate c;
    c.target = t;
    c.metrics = LinkMetrics{20.0 - t, 100.0 + 50 * t, 2048, 6e6, 0.0, 400.0};
    c.est_latency_s = 0.005 * (t + 1);
    c.est_std_s = 0.001;
    env.links.push_back(c);
  }
  env.leader_accel_spread = 0.0;
  env.target_speed = 10.0;
  return env;
}

}  // namespace

TEST_CASE("step_vehicle") {
  VehicleConfig cfg;
  const Vec x0 = (Vec(3) << 0.0, 10.0, 0.0).finished();

  SUBCASE("quiescent vehicle follows the dynamics") {
    const VehicleState s = make_vehicle(cfg, x0, 3);
    Rng rng(1);
    const VehicleStep st = step_vehicle(s, quiet_env(3), cfg, rng);
    CHECK(st.state.x.isApprox(cfg.dynamics.phi * x0));
    CHECK(st.out.lyapunov_ok);
    CHECK(st.out.robust_ok);
    CHECK_FALSE(st.out.deferred);
    CHECK(std::abs(st.out.link_probs.sum() - 1.0) < 1e-12);
    CHECK(st.out.accel_applied == doctest::Approx(0.0));
    CHECK(st.state.d_safe == 5.0);
  }
  SUBCASE("inadmissible links are gated and the best one kept as fallback") {
    const VehicleState s = make_vehicle(cfg, x0, 3);
    VehicleEnv env = quiet_env(3);
    for (auto& l : env.links) l.metrics.snr_db = 0.0;
    env.links[2].metrics.snr_db = 4.0;
    Rng rng(1);
    const VehicleStep st = step_vehicle(s, env, cfg, rng);
    CHECK(st.out.deferred);
    CHECK(st.out.fallback == 2);
    CHECK(st.out.link_probs.isZero());
  }
  SUBCASE("bit-identical under a fixed seed") {
    auto run = [&] {
      std::vector<VehicleState> vs;
      for (int i = 0; i < 3; ++i) vs.push_back(make_vehicle(cfg, x0 + Vec::Constant(3, i), 3));
      std::vector<double> record;
      const Rng root(99);
      for (int tick = 0; tick < 20; ++tick) {
        std::vector<VehicleState> next;
        for (int i = 0; i < 3; ++i) {
          VehicleEnv env = quiet_env(3);
          env.leader_accel_spread = 1.0;
          env.gap_m = 20.0 + i;
          for (int j = 0; j < 3; ++j) {
            if (j == i) continue;
            NeighborView nb;
            nb.psi = &vs[j].psi;
            nb.xi = &vs[j].consensus_xi;
            nb.weight = 1.0 / 3.0;
            env.neighbors.push_back(nb);
          }
          env.innovation = Vec::Constant(3, 0.01 * tick);
          Rng rng = root.fork(static_cast<std::uint64_t>(tick), static_cast<std::uint64_t>(i));
          VehicleStep st = step_vehicle(vs[i], env, cfg, rng);
          record.push_back(st.out.accel_applied);
          for (double p : st.out.link_probs) record.push_back(p);
          record.push_back(st.state.consensus_xi.sum());
          next.push_back(std::move(st.state));
        }
        vs = std::move(next);
      }
      return record;
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
  SUBCASE("a Lyapunov violation tightens the next tick") {
    const VehicleState s = make_vehicle(cfg, x0, 2);
    VehicleEnv env = quiet_env(2);
    env.force_lyapunov_increase = 100.0;
    Rng rng(2);
    const VehicleStep st = step_vehicle(s, env, cfg, rng);
    CHECK_FALSE(st.out.lyapunov_ok);
    CHECK(st.state.d_safe == doctest::Approx(5.5));
    CHECK(st.state.eta_psi == doctest::Approx(s.eta_psi / 2));
    env.force_lyapunov_increase = 0.0;
    const VehicleStep st2 = step_vehicle(st.state, env, cfg, rng);
    CHECK(st2.state.d_safe == doctest::Approx(5.5));
  }
  SUBCASE("energy never decreases and the queue stays nonnegative") {
    VehicleState s = make_vehicle(cfg, x0, 2);
    VehicleEnv env = quiet_env(2);
    Rng rng(6);
    for (int t = 0; t < 300; ++t) {
      env.arrivals = rng.uniform(0, 20);
      env.gap_m = rng.uniform(2, 60);
      env.rel_speed = rng.uniform(-3, 3);
      const double e0 = s.energy_e;
      s = step_vehicle(s, env, cfg, rng).state;
      CHECK(s.energy_e >= e0);
      CHECK(s.queue_q >= 0.0);
    }
  }
}
