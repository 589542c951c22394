#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "qivnom/anneal.hpp"
#include "qivnom/energy.hpp"
#include "qivnom/qio.hpp"
#include "qivnom/transport.hpp"

namespace qivnom {

struct FogSummary {
  Mat a;
  Vec s;
};

// Z = sum A_f s_f
Vec fuse(std::span<const FogSummary> summaries);

// softmax(-kappa_var var - kappa_lat latency)
Vec confidence_weights(const Vec& variances, const Vec& latencies, double kappa_var, double kappa_lat);

// K = (sum X' X^T)(sum X X^T + ridge I)^-1. Throws SingularSystem when the
// regularized covariance cannot be factored.
Mat koopman_fit(std::span<const std::pair<Vec, Vec>> pairs, double ridge);

Vec soft_threshold(const Vec& x, double t);

struct ModelUpdate {
  Vec theta;
  Vec moment;
};

ModelUpdate model_update(const Vec& theta, const Vec& moment, const Vec& grad, double eta, double l1_beta,
                         double moment_rho);

struct ConstraintEval {
  Vec g;
  Mat jacobian;  // rows: constraints, cols: dim(x)
};

using ConstraintFn = std::function<ConstraintEval(const Vec& x, const Vec& u)>;

struct PrimalDual {
  Vec x;
  Vec lambda;
};

// x' = clip(x - eta_x (grad J + Jg^T lambda), lo, hi),  lambda' = [lambda + eta_lambda g(x, u)]_+
PrimalDual primal_dual_step(const Vec& x, const Vec& u, const Vec& cost_grad, const ConstraintFn& g, const Vec& lambda,
                            double eta_x, double eta_lambda, const Vec& lo, const Vec& hi);

// P' proportional to exp(-eta_p h) * P
PlanDistribution population_update(const PlanDistribution& p, const Vec& costs, double eta_p);

// mean(g) + sqrt(2 var(g) ln(1/delta)) <= 0, population variance.
bool chance_constraint_ok(const Vec& samples, double delta);

// mean(V_next) - V_prev <= -kappa |x|^2 + c
bool cloud_lyapunov_ok(const Vec& v_next, double v_prev, double x_norm_sq, double kappa, double slack);

// ---------------------------------------------------------------------------
// Coordination epoch.

struct CloudConfig {
  QioConfig qio;  // K is set from the plan count
  std::map<Objective, double> weights = {{Objective::Latency, 0.4},
                                         {Objective::Reliability, 0.3},
                                         {Objective::Energy, 0.2},
                                         {Objective::Throughput, 0.1}};
  double epsilon = 1e-2;
  double delta = 1e-3;
  double eta_p = 1.0;
  double util_cap = 0.85;
  double epoch_s = 1.0;
  double demand_scale = 100.0;  // pkt/s per lifted unit
  double demand_cv = 0.1;       // forecast spread used by the chance gate
  int gate_samples = 32;
  double kappa_var = 1.0;
  double kappa_lat = 0.05;  // per ms
  double ridge = 1e-3;
  int koopman_window = 32;
  int horizon = 3;
  double model_eta = 0.05;
  double l1_beta = 1e-3;
  double moment_rho = 0.9;
  double pd_eta_x = 0.1;
  double pd_eta_lambda = 0.5;
  double lyapunov_kappa = 0.1;
  double lyapunov_slack = 100.0;  // packets^2
  int max_repairs = 5;
  double repair_weight_step = 0.1;
  bool adaptive_temperature = true;
  bool greedy_assign = false;
  SinkhornOptions sinkhorn;

  // Test hook: extra gate failure injected for the given repair round.
  std::function<bool(int round)> inject_failure;
};

struct CloudContext {
  std::vector<FogSummary> summaries;  // fuse to per-RSU demand in pkt/s
  Vec fog_capacity;                   // pkt/s
  Vec fog_backlog;                    // packets
  Vec fog_latency_mean;               // ms
  Vec fog_latency_var;                // ms^2, scaled
  Vec fog_energy;                     // energy per packet
  Mat backhaul_ms;                    // F x R
  Mat plan_shares;                    // K x F, rows on the simplex
  std::uint64_t seed = 0;
};

struct CloudState {
  Vec z;
  Vec xi;
  Vec x;  // primal fog-share variable
  Mat k_op;
  Vec theta;
  Vec moment;
  PlanDistribution population = PlanDistribution::uniform(1);
  TemperatureState temperature;
  CostHistory history;
  Vec lambda;
  double risk_delta = 1e-3;
  Vec u;  // control proxy: last dispatched fog shares
  QioState qio;
  bool qio_ready = false;
  std::deque<Vec> lifted;  // window of lifted features, oldest first
  std::map<Objective, double> weights;
  Vec ot_f, ot_g;  // last dispatch potentials, warm start for the next solve
  int epoch = 0;
};

CloudState make_cloud(const CloudConfig& cfg, Eigen::Index rsus, Eigen::Index fogs, Eigen::Index plans);

// Builds lifted features [z / scale, 1].
Vec lift(const Vec& z, double scale);

struct PlanCosts {
  CostBundle bundle;  // raw linear costs per objective
  FeasibleSet feasible;
  Mat utilization;    // K x F predicted utilization
};

PlanCosts plan_costs(const CloudState& s, const CloudContext& ctx, const CloudConfig& cfg, const Vec& demand,
                     const Vec& confidence);

struct Coordination {
  Eigen::Index plan = 0;
  TransportPlan dispatch;  // F x R
  Vec shares;              // fog marginal of the dispatch
  Vec demand;              // forecast per RSU, pkt/s
  PlanDistribution soft_plan = PlanDistribution::uniform(1);
  int repair_rounds = 0;
  bool flagged = false;
  bool chance_ok = true;
  bool lyapunov_ok = true;
  bool qio_converged = false;
  CloudState state;
};

Coordination coordinate(const CloudState& state, const CloudContext& ctx, const CloudConfig& cfg);

}  // namespace qivnom
