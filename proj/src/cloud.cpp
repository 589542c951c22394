#include "qivnom/cloud.hpp"

#include <algorithm>
#include <cmath>

#include "qivnom/error.hpp"
#include "qivnom/rng.hpp"

namespace qivnom {

Vec fuse(std::span<const FogSummary> summaries) {
  Vec z;
  for (const auto& f : summaries) {
    if (f.a.cols() != f.s.size()) fail(Errc::DimMismatch, "A_f and s_f disagree");
    if (z.size() == 0) z = Vec::Zero(f.a.rows());
    if (f.a.rows() != z.size()) fail(Errc::DimMismatch, "summaries map to different dimensions");
    z += f.a * f.s;
  }
  return z;
}

Vec confidence_weights(const Vec& variances, const Vec& latencies, double kappa_var, double kappa_lat) {
  if (variances.size() != latencies.size()) fail(Errc::LengthMismatch, "one variance and latency per node");
  if (variances.size() == 0) return Vec();
  const Vec logits = -kappa_var * variances - kappa_lat * latencies;
  const Vec w = (logits.array() - logits.maxCoeff()).exp().matrix();
  return w / w.sum();
}

Mat koopman_fit(std::span<const std::pair<Vec, Vec>> pairs, double ridge) {
  if (pairs.empty()) fail(Errc::TooFewSamples, "no feature pairs");
  if (ridge < 0.0) fail(Errc::InvalidArgument, "ridge must be nonnegative");
  const Eigen::Index n = pairs.front().first.size();
  Mat cross = Mat::Zero(n, n), cov = Mat::Zero(n, n);
  for (const auto& [x, y] : pairs) {
    if (x.size() != n || y.size() != n) fail(Errc::DimMismatch, "feature pairs differ in dimension");
    cross.noalias() += y * x.transpose();
    cov.noalias() += x * x.transpose();
  }
  cov.diagonal().array() += ridge;
  // K cov = cross, solved as cov K^T = cross^T with a pivoted QR.
  const Eigen::ColPivHouseholderQR<Mat> qr(cov);
  const double scale = std::max(cov.cwiseAbs().maxCoeff(), 1e-300);
  if (qr.rank() < n || std::abs(qr.matrixQR()(n - 1, n - 1)) <= 1e-14 * scale) {
    fail(Errc::SingularSystem, "feature covariance is rank-deficient");
  }
  return qr.solve(cross.transpose()).transpose();
}

Vec soft_threshold(const Vec& x, double t) {
  return x.unaryExpr([t](double v) { return std::copysign(std::max(std::abs(v) - t, 0.0), v); });
}

ModelUpdate model_update(const Vec& theta, const Vec& moment, const Vec& grad, double eta, double l1_beta,
                         double moment_rho) {
  if (!(eta > 0.0)) fail(Errc::InvalidArgument, "eta must be positive");
  if (!(moment_rho > 0.0 && moment_rho < 1.0)) fail(Errc::InvalidArgument, "moment rho must lie in (0, 1)");
  if (grad.size() != theta.size() || moment.size() != theta.size()) fail(Errc::LengthMismatch, "model sizes differ");
  ModelUpdate out;
  out.theta = soft_threshold(theta - eta * grad, eta * l1_beta);
  out.moment = moment_rho * moment + (1.0 - moment_rho) * grad.cwiseAbs2();
  return out;
}

PrimalDual primal_dual_step(const Vec& x, const Vec& u, const Vec& cost_grad, const ConstraintFn& g, const Vec& lambda,
                            double eta_x, double eta_lambda, const Vec& lo, const Vec& hi) {
  if (!(eta_x > 0.0) || !(eta_lambda > 0.0)) fail(Errc::InvalidArgument, "step sizes must be positive");
  if (cost_grad.size() != x.size() || lo.size() != x.size() || hi.size() != x.size()) {
    fail(Errc::LengthMismatch, "primal sizes differ");
  }
  const ConstraintEval ge = g(x, u);
  if (ge.g.size() != lambda.size() || ge.jacobian.rows() != lambda.size() || ge.jacobian.cols() != x.size()) {
    fail(Errc::DimMismatch, "constraint evaluation has the wrong shape");
  }
  PrimalDual out;
  out.x = (x - eta_x * (cost_grad + ge.jacobian.transpose() * lambda)).cwiseMax(lo).cwiseMin(hi);
  out.lambda = (lambda + eta_lambda * ge.g).cwiseMax(0.0);
  return out;
}

PlanDistribution population_update(const PlanDistribution& p, const Vec& costs, double eta_p) {
  if (!(eta_p > 0.0)) fail(Errc::InvalidArgument, "eta_p must be positive");
  if (costs.size() != p.size()) fail(Errc::LengthMismatch, "one cost per plan");
  const double lo = costs.minCoeff();
  Vec w = p.probs().cwiseProduct((-eta_p * (costs.array() - lo)).exp().matrix());
  if (!(w.sum() > 0.0)) w = p.probs();  // every supported plan underflowed
  return PlanDistribution::from_weights(std::move(w));
}

bool chance_constraint_ok(const Vec& samples, double delta) {
  if (samples.size() < 2) fail(Errc::TooFewSamples, "chance constraint needs at least two samples");
  if (!(delta > 0.0 && delta < 1.0)) fail(Errc::InvalidArgument, "delta must lie in (0, 1)");
  const double mean = samples.mean();
  const double var = (samples.array() - mean).square().mean();
  return mean + std::sqrt(2.0 * var * std::log(1.0 / delta)) <= 0.0;
}

bool cloud_lyapunov_ok(const Vec& v_next, double v_prev, double x_norm_sq, double kappa, double slack) {
  if (v_next.size() == 0) fail(Errc::TooFewSamples, "no Lyapunov samples");
  return v_next.mean() - v_prev <= -kappa * x_norm_sq + slack;
}

// ---------------------------------------------------------------------------

Vec lift(const Vec& z, double scale) {
  Vec xi(z.size() + 1);
  xi.head(z.size()) = z / scale;
  xi[z.size()] = 1.0;
  return xi;
}

CloudState make_cloud(const CloudConfig& cfg, Eigen::Index rsus, Eigen::Index fogs, Eigen::Index plans) {
  CloudState s;
  s.z = Vec::Zero(rsus);
  s.xi = lift(s.z, cfg.demand_scale);
  s.x = Vec::Constant(fogs, fogs > 0 ? 1.0 / static_cast<double>(fogs) : 0.0);
  s.k_op = Mat::Identity(rsus + 1, rsus + 1);
  s.theta = Vec::Ones(rsus);
  s.moment = Vec::Zero(rsus);
  s.population = PlanDistribution::uniform(std::max<Eigen::Index>(plans, 1));
  s.temperature = TemperatureState{cfg.qio.initial_temperature, cfg.qio.beta, cfg.qio.history_window};
  s.history = CostHistory(cfg.qio.history_window);
  s.lambda = Vec::Zero(fogs);
  s.risk_delta = cfg.delta;
  s.u = s.x;
  s.weights = cfg.weights;
  return s;
}

namespace {

constexpr double kMs = 1e3;

Vec demand_shares(const Vec& demand) {
  const double total = demand.sum();
  if (!(total > 0.0)) return Vec::Constant(demand.size(), 1.0 / static_cast<double>(demand.size()));
  return demand / total;
}

// Fog load implied by routing RSU r through column r of the coupling.
Vec routed_load(const Mat& coupling, const Vec& nu, const Vec& demand) {
  Vec load = Vec::Zero(coupling.rows());
  for (Eigen::Index r = 0; r < coupling.cols(); ++r) {
    if (nu[r] <= 0.0) continue;
    load += coupling.col(r) * (demand[r] / nu[r]);
  }
  return load;
}

Vec normalized_cost(const PlanCosts& pc, const std::map<Objective, double>& weights) {
  CostBundle b = pc.bundle;
  for (auto& [q, c] : b.per_objective) c = minmax_normalize(c);
  b.weights = weights;
  return assemble_cost(b);
}

void renormalize(std::map<Objective, double>& w) {
  double total = 0.0;
  for (const auto& [q, v] : w) total += v;
  for (auto& [q, v] : w) v /= total;
}

}  // namespace

PlanCosts plan_costs(const CloudState& s, const CloudContext& ctx, const CloudConfig& cfg, const Vec& demand,
                     const Vec& confidence) {
  const Mat& shares = ctx.plan_shares;
  const Eigen::Index k = shares.rows(), f = shares.cols();
  const double total = demand.sum();
  const Vec nu = demand_shares(demand);
  const Vec backlog_rate = ctx.fog_backlog / cfg.epoch_s;
  Vec per_fog_latency(f);
  for (Eigen::Index j = 0; j < f; ++j) {
    per_fog_latency[j] = ctx.backhaul_ms.row(j).dot(nu) + kMs / ctx.fog_capacity[j];
  }
  PlanCosts pc;
  pc.utilization = Mat(k, f);
  Vec lat(k), rel(k), en(k), thr(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Vec load = shares.row(i).transpose() * total + backlog_rate;
    const Vec util = load.cwiseQuotient(ctx.fog_capacity);
    pc.utilization.row(i) = util.transpose();
    lat[i] = shares.row(i).dot(per_fog_latency);
    double risk = util.maxCoeff();
    for (Eigen::Index j = 0; j < f; ++j) {
      risk += shares(i, j) * (std::max(0.0, 1.0 - static_cast<double>(f) * confidence[j]) + s.lambda[j]);
    }
    rel[i] = risk;
    en[i] = total * shares.row(i).dot(ctx.fog_energy);
    thr[i] = total > 0.0 ? (load - ctx.fog_capacity).cwiseMax(0.0).sum() / total : 0.0;
  }
  pc.bundle.per_objective = {{Objective::Latency, lat},
                             {Objective::Reliability, rel},
                             {Objective::Energy, en},
                             {Objective::Throughput, thr}};
  pc.bundle.weights = s.weights;
  pc.feasible = FeasibleSet::unconstrained(k);
  for (Eigen::Index i = 1; i < k; ++i) {
    if (pc.utilization.row(i).maxCoeff() > cfg.util_cap) pc.feasible.forbidden.push_back(i);
  }
  return pc;
}

Coordination coordinate(const CloudState& state, const CloudContext& ctx, const CloudConfig& cfg) {
  const Eigen::Index nf = ctx.fog_capacity.size();
  const Eigen::Index nr = ctx.backhaul_ms.cols();
  const Eigen::Index nk = ctx.plan_shares.rows();
  if (nf == 0 || nr == 0 || nk == 0) fail(Errc::InvalidArgument, "coordination needs fogs, RSUs and plans");
  if (ctx.backhaul_ms.rows() != nf || ctx.plan_shares.cols() != nf || ctx.fog_backlog.size() != nf ||
      ctx.fog_latency_mean.size() != nf || ctx.fog_latency_var.size() != nf || ctx.fog_energy.size() != nf) {
    fail(Errc::DimMismatch, "per-fog inputs disagree");
  }
  if ((ctx.fog_capacity.array() <= 0.0).any()) fail(Errc::InvalidArgument, "fog capacity must be positive");
  if (state.theta.size() != nr || state.x.size() != nf) fail(Errc::DimMismatch, "cloud state does not match the world");

  Coordination out;
  CloudState s = state;
  ++s.epoch;
  const Rng rng_root(ctx.seed, 0xc10d);

  // Fuse and lift.
  s.z = ctx.summaries.empty() ? Vec(Vec::Zero(nr)) : fuse(ctx.summaries);
  if (s.z.size() != nr) fail(Errc::DimMismatch, "fused vector must have one entry per RSU");
  s.xi = lift(s.z, cfg.demand_scale);
  s.lifted.push_back(s.xi);
  while (static_cast<int>(s.lifted.size()) > cfg.koopman_window + 1) s.lifted.pop_front();
  const Vec confidence = confidence_weights(ctx.fog_latency_var, ctx.fog_latency_mean, cfg.kappa_var, cfg.kappa_lat);

  // Windowed Koopman refit.
  if (s.lifted.size() >= 3) {
    std::vector<std::pair<Vec, Vec>> pairs;
    for (std::size_t i = 0; i + 1 < s.lifted.size(); ++i) pairs.emplace_back(s.lifted[i], s.lifted[i + 1]);
    try {
      s.k_op = koopman_fit(pairs, cfg.ridge);
    } catch (const Error& e) {
      if (e.code() != Errc::SingularSystem) throw;
    }
  }

  // Horizon loss on the head scales theta: yhat_h = theta .* C K^h xi_{t-h}, weights 1/h.
  {
    Vec grad = Vec::Zero(nr);
    const Vec target = s.z / cfg.demand_scale;
    Mat kp = Mat::Identity(nr + 1, nr + 1);
    const auto n = static_cast<int>(s.lifted.size());
    for (int h = 1; h <= cfg.horizon && h < n; ++h) {
      kp = s.k_op * kp;
      const Vec base = (kp * s.lifted[static_cast<std::size_t>(n - 1 - h)]).head(nr);
      const Vec pred = s.theta.cwiseProduct(base);
      grad += (2.0 / h) * (pred - target).cwiseProduct(base) / static_cast<double>(nr);
    }
    const ModelUpdate mu = model_update(s.theta, s.moment, grad, cfg.model_eta, cfg.l1_beta, cfg.moment_rho);
    s.theta = mu.theta;
    s.moment = mu.moment;
  }
  out.demand = (s.theta.cwiseProduct((s.k_op * s.xi).head(nr)) * cfg.demand_scale).cwiseMax(0.0);
  const double total = out.demand.sum();

  // Primal-dual on the continuous fog shares; multipliers price utilization.
  {
    Vec grad(nf);
    const Vec nu = demand_shares(out.demand);
    for (Eigen::Index j = 0; j < nf; ++j) {
      grad[j] = (ctx.backhaul_ms.row(j).dot(nu) + kMs / ctx.fog_capacity[j]) / kMs + (s.x[j] - s.u[j]);
    }
    const ConstraintFn g = [&](const Vec& x, const Vec&) {
      ConstraintEval ge;
      const Vec per = Vec::Constant(nf, total).cwiseQuotient(ctx.fog_capacity);
      ge.g = (x.cwiseProduct(per) + (ctx.fog_backlog / cfg.epoch_s).cwiseQuotient(ctx.fog_capacity)).array() -
             cfg.util_cap;
      ge.jacobian = per.asDiagonal();
      return ge;
    };
    const PrimalDual pd = primal_dual_step(s.x, s.u, grad, g, s.lambda, cfg.pd_eta_x, cfg.pd_eta_lambda,
                                           Vec::Zero(nf), Vec::Ones(nf));
    s.x = pd.x;
    s.lambda = pd.lambda;
  }

  // Plan costs and the QIO pass.
  s.weights = cfg.weights;
  PlanCosts pc = plan_costs(s, ctx, cfg, out.demand, confidence);
  QioConfig qcfg = cfg.qio;
  qcfg.K = nk;
  if (!s.qio_ready || s.qio.psi.size() != nk) {
    s.qio = initial_qio_state(s.xi, qcfg);
    s.qio_ready = true;
  }
  qcfg.seed = cfg.qio.seed ^ static_cast<std::uint64_t>(s.epoch);
  QioResult qr = optimize(s.qio, constant_costs(pc.bundle), pc.feasible, qcfg);
  s.qio = std::move(qr.state);
  out.qio_converged = qr.converged;
  const PlanDistribution amp = probabilities(qr.psi);

  // Population, temperature, soft plan, dispatch and gates, with repair.
  double delta = cfg.delta;
  double eta_p = cfg.eta_p;
  double eps = cfg.epsilon;
  std::map<Objective, double> weights = cfg.weights;
  const Vec nu = demand_shares(out.demand);
  Mat dnorm = ctx.backhaul_ms;
  if (dnorm.maxCoeff() > 0.0) dnorm /= dnorm.maxCoeff();
  const Vec backlog_rate = ctx.fog_backlog / cfg.epoch_s;
  const double v_prev = ctx.fog_backlog.squaredNorm();

  for (int round = 0;; ++round) {
    const Vec h = normalized_cost(pc, weights);
    const PlanDistribution pop = population_update(amp, h, eta_p);
    const double t = std::max(s.temperature.value, kTemperatureFloor);
    Vec soft = pop.probs().cwiseProduct((-(h.array() - h.minCoeff()) / t).exp().matrix());
    if (!(soft.sum() > 0.0)) soft = pop.probs();
    out.soft_plan = PlanDistribution::from_weights(soft);
    Rng rng = rng_root.fork(static_cast<std::uint64_t>(round));
    out.plan = sample_plan(out.soft_plan, rng);
    out.shares = ctx.plan_shares.transpose() * out.soft_plan.probs();
    out.shares /= out.shares.sum();
    s.population = pop;

    const TransportProblem problem{dnorm, out.shares, nu, eps};
    if (cfg.greedy_assign) {
      out.dispatch = assign_greedy(problem);
    } else {
      SinkhornOptions so = cfg.sinkhorn;
      if (so.warm_f.size() == 0) {
        so.warm_f = s.ot_f;
        so.warm_g = s.ot_g;
      }
      out.dispatch = sinkhorn(problem, so);
      s.ot_f = out.dispatch.f;
      s.ot_g = out.dispatch.g;
    }

    // Gate samples under forecast noise.
    Vec g(cfg.gate_samples), v_next(cfg.gate_samples);
    for (int i = 0; i < cfg.gate_samples; ++i) {
      Vec d = out.demand;
      for (double& x : d) x *= std::max(0.0, 1.0 + cfg.demand_cv * rng.normal());
      const Vec load = routed_load(out.dispatch.coupling, nu, d) + backlog_rate;
      g[i] = load.cwiseQuotient(ctx.fog_capacity).maxCoeff() - cfg.util_cap;
      const Vec q_next = (ctx.fog_backlog + (load - backlog_rate - ctx.fog_capacity) * cfg.epoch_s).cwiseMax(0.0);
      v_next[i] = q_next.squaredNorm();
    }
    out.chance_ok = chance_constraint_ok(g, delta);
    out.lyapunov_ok = cloud_lyapunov_ok(v_next, v_prev, v_prev, cfg.lyapunov_kappa, cfg.lyapunov_slack);
    const bool injected = cfg.inject_failure && cfg.inject_failure(round);
    out.repair_rounds = round;
    if (out.chance_ok && out.lyapunov_ok && !injected) break;
    if (round >= cfg.max_repairs) {
      out.flagged = true;
      break;
    }
    // Repair: lean toward the violated objective, tighten risk, perturb steps.
    const Objective target = !out.chance_ok || injected ? Objective::Reliability : Objective::Latency;
    weights[target] *= 1.0 + cfg.repair_weight_step;
    renormalize(weights);
    delta *= 0.5;
    eta_p *= 0.9;
    eps *= 1.1;
  }
  s.risk_delta = delta;
  s.weights = weights;
  s.u = out.shares;

  const double expected = out.soft_plan.probs().dot(normalized_cost(pc, weights));
  s.history.push(expected);
  if (cfg.adaptive_temperature) {
    s.temperature = update_temperature(s.temperature, s.history.values(), TemperatureVariant::Cloud);
  }
  out.state = std::move(s);
  return out;
}

}  // namespace qivnom
