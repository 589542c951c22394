#include "qivnom/qio.hpp"

#include <algorithm>
#include <cmath>

#include "qivnom/error.hpp"

namespace qivnom {

namespace {

constexpr double kEtaFloor = 1e-8;
constexpr double kRhoCap = 1e6;

Amplitudes random_init(const Vec& features, Eigen::Index k, double scale, Rng rng) {
  const Eigen::Index dim = std::max<Eigen::Index>(features.size(), 1);
  Mat w(k, dim);
  Vec b(k);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < k; ++i) w(i, j) = scale * rng.normal();
  for (Eigen::Index i = 0; i < k; ++i) b[i] = scale * rng.normal();
  const Vec z = features.size() > 0 ? features : Vec::Zero(1);
  return init_superposition(z, w, b, Activation::Sigmoid);
}

CostBundle normalized_bundle(CostBundle b, Eigen::Index k, bool normalize) {
  for (auto& [q, c] : b.per_objective) {
    if (c.size() != k) fail(Errc::LengthMismatch, "cost provider returned a vector of the wrong length");
    if (!c.allFinite()) fail(Errc::NonFinite, "cost provider returned non-finite costs");
    if (normalize) c = minmax_normalize(c);
  }
  return b;
}

}  // namespace

void QioConfig::validate() const {
  auto bad = [](const char* what) { fail(Errc::InvalidArgument, what); };
  if (K < 1 || L < 1) bad("K and L must be positive");
  if (!(eta > 0.0)) bad("eta must be positive");
  if (!(beta > 0.0 && beta < 1.0)) bad("beta must lie in (0, 1)");
  if (!(rho >= 0.0)) bad("rho must be nonnegative");
  if (!(tol_energy > 0.0) || !(tol_coupling > 0.0)) bad("tolerances must be positive");
  if (max_iters < 1) bad("max_iters must be positive");
  if (!(l_smooth > 0.0)) bad("l_smooth must be positive");
  if (!(alpha_min > 0.0)) bad("alpha_min must be positive");
  if (!(initial_temperature > 0.0)) bad("initial temperature must be positive");
  if (history_window < 1) bad("history window must be positive");
}

double step_size_backoff(double eta, int violations) {
  return std::max(eta * std::ldexp(1.0, -std::max(violations, 0)), kEtaFloor);
}

QioState initial_qio_state(const Vec& features, const QioConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed, 0x910);
  QioState s;
  s.psi = cfg.init_scale > 0.0 ? random_init(features, cfg.K, cfg.init_scale, root.fork(1))
                               : Amplitudes::uniform(cfg.K);
  s.psi_m = Amplitudes::uniform(cfg.L);
  s.joint = s.psi.values() * s.psi_m.values().transpose();
  s.temperature = TemperatureState{cfg.initial_temperature, cfg.beta, cfg.history_window};
  s.history = CostHistory(cfg.history_window);
  s.eta = cfg.eta;
  s.rho = cfg.rho;
  return s;
}

QioResult optimize(const Vec& features, const CostProvider& costs, const FeasibleSet& fs, const QioConfig& cfg) {
  return optimize(initial_qio_state(features, cfg), costs, fs, cfg);
}

QioResult optimize(QioState st, const CostProvider& costs, const FeasibleSet& fs, const QioConfig& cfg) {
  cfg.validate();
  const Eigen::Index k = cfg.K;
  if (st.psi.size() != k) fail(Errc::DimMismatch, "state amplitudes differ from K");
  if (fs.prob_upper_bounds.size() != k) fail(Errc::LengthMismatch, "feasible set size differs from K");
  fs.validate();
  if (cfg.projection) st.psi = project_feasible(st.psi, fs);

  Rng rng = Rng(cfg.seed, 0x910).fork(2, static_cast<std::uint64_t>(st.backoffs));
  QioResult out;
  out.trace.reserve(static_cast<std::size_t>(std::min(cfg.max_iters, 100000)));
  Vec last_op;
  bool converged = false;

  for (int t = 0; t < cfg.max_iters; ++t) {
    // Joint encoding and coupling of the current state.
    const Mat residual = st.joint - st.psi.values() * st.psi_m.values().transpose();
    const JointAmplitude joint{st.joint};
    const double coupling = cfg.coupling ? mutual_information(joint) : 0.0;

    // Cost assembly and penalty.
    CostBundle bundle = normalized_bundle(costs(t, st.psi), k, cfg.normalize_costs);
    if (st.weights.empty()) st.weights = bundle.weights;
    bundle.weights = st.weights;
    const Vec h = assemble_cost(bundle);
    const Vec p = st.psi.values().cwiseAbs2();
    Vec g = fs.residuals(p);
    if (bundle.residuals.size() == k) g = g.cwiseMax(bundle.residuals);
    const Vec op = penalized_operator(h, g, st.rho);
    last_op = op;

    // Energy, tangent direction, sphere step.
    const double e = energy(st.psi, op);
    if (!std::isfinite(e)) fail(Errc::Diverged, "energy is not finite");
    const Vec grad = energy_gradient(st.psi, op);
    const double lambda = st.psi.values().dot(grad);
    const Vec d = -grad + lambda * st.psi.values();
    const double d2 = d.squaredNorm();
    // A vanishing tangent gradient is a stationary point; a step there only adds rounding.
    const double scale = std::max(1.0, op.cwiseAbs().maxCoeff());
    if (d2 <= 1e-24 * scale * scale && coupling <= cfg.tol_coupling) {
      QioRecord rec;
      rec.energy = e;
      rec.temperature = st.temperature.value;
      rec.coupling = coupling;
      rec.grad_norm = std::sqrt(d2);
      rec.eta = st.eta;
      rec.rho = st.rho;
      rec.selected = argmax_lowest(st.psi.values().cwiseAbs());
      rec.psi_norm = st.psi.values().norm();
      out.trace.push_back(rec);
      converged = true;
      break;
    }
    Amplitudes next = Amplitudes::normalized(st.psi.values() + st.eta * d);

    // Temperature and soft policy.
    st.history.push(e);
    if (cfg.adaptive_temperature) {
      st.temperature = update_temperature(st.temperature, st.history.values(), TemperatureVariant::Qio);
    }
    const PlanDistribution pi = soft_policy(op, st.temperature.value);
    const Eigen::Index provisional = sample_plan(pi, rng);

    // Coupling adjustment of psi_c, psi_m and the free joint.
    Amplitudes next_m = st.psi_m;
    Mat next_joint = st.joint + st.eta * (d * st.psi_m.values().transpose());
    if (cfg.coupling && cfg.L > 1) {
      const double step = st.eta / 10.0;
      const CouplingGradients cg = mi_gradients(next.values(), st.psi_m.values(), residual);
      next = Amplitudes::normalized(next.values() - step * cg.comm);
      next_m = Amplitudes::normalized(st.psi_m.values() - step * cg.mobility);
      next_joint -= step * mi_joint_gradient(JointAmplitude{next_joint});
    }
    const double jn = next_joint.norm();
    if (jn > 1e-12) next_joint /= jn;

    // Tchebycheff re-weighting for the next iteration.
    if (cfg.scalarize && bundle.per_objective.size() > 1) {
      const Vec pn = next.values().cwiseAbs2();
      Vec c(static_cast<Eigen::Index>(bundle.per_objective.size()));
      Eigen::Index qi = 0;
      for (const auto& [q, cq] : bundle.per_objective) c[qi++] = cq.dot(pn);
      const Scalarization s = tchebycheff(c, Vec::Zero(c.size()), cfg.alpha_min);
      qi = 0;
      double total = 0.0;
      std::map<Objective, double> w;
      for (const auto& [q, cq] : bundle.per_objective) {
        const auto it = bundle.weights.find(q);
        const double w0 = it == bundle.weights.end() ? 0.0 : it->second;
        w[q] = w0 * s.alpha[qi++];
        total += w[q];
      }
      if (total > 0.0) {
        for (auto& [q, v] : w) v /= total;
        st.weights = w;
      }
    }

    if (cfg.projection) next = project_feasible(next, fs);

    // Descent certificate under the operator of this iteration.
    const double e_next = energy(next, op);
    const bool ok = descent_certificate(e_next, e, d2, st.eta, cfg.l_smooth);

    QioRecord rec;
    rec.energy = e;
    rec.temperature = st.temperature.value;
    rec.coupling = coupling;
    rec.grad_norm = std::sqrt(d2);
    rec.eta = st.eta;
    rec.rho = st.rho;
    rec.selected = provisional;
    rec.psi_norm = st.psi.values().norm();
    rec.accepted = ok;
    out.trace.push_back(rec);

    if (ok) {
      st.psi = next;
      st.psi_m = next_m;
      st.joint = next_joint;
    } else {
      ++st.backoffs;
      st.eta = step_size_backoff(st.eta, 1);
      st.rho = std::min(std::max(2.0 * st.rho, 1e-12), kRhoCap);
    }
    if (ok && std::abs(e_next - e) <= cfg.tol_energy && coupling <= cfg.tol_coupling) {
      converged = true;
      break;
    }
  }

  out.psi = st.psi;
  out.distribution = soft_policy(last_op, st.temperature.value);
  out.plan = argmax_lowest(st.psi.values().cwiseAbs());
  out.converged = converged;
  out.state = std::move(st);
  return out;
}

CostProvider constant_costs(CostBundle bundle) {
  return [b = std::move(bundle)](int, const Amplitudes&) { return b; };
}

}  // namespace qivnom
