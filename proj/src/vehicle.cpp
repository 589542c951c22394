#include "qivnom/vehicle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qivnom/error.hpp"

namespace qivnom {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Dynamics Dynamics::longitudinal(double dt) {
  Dynamics d;
  d.phi = Mat::Identity(3, 3);
  d.phi(0, 1) = dt;
  d.gamma = Mat::Zero(3, 1);
  d.gamma(1, 0) = dt;
  d.msg_gain = Mat::Zero(3, 3);
  d.obs = Mat::Identity(3, 3);
  return d;
}

Propagated propagate_state(const VehicleState& s, const Dynamics& dyn, const MicroAction& u,
                           std::span<const Vec> messages, Rng& rng) {
  const Eigen::Index n = s.x.size();
  if (dyn.phi.rows() != n || dyn.phi.cols() != n || dyn.gamma.rows() != n) {
    fail(Errc::DimMismatch, "dynamics do not match the state dimension");
  }
  Vec uvec = Vec::Zero(dyn.gamma.cols());
  if (uvec.size() > 0) uvec[0] = u.accel;
  Vec x = dyn.phi * s.x + dyn.gamma * uvec;
  if (dyn.msg_gain.size() > 0) {
    for (const Vec& m : messages) {
      if (m.size() != dyn.msg_gain.cols()) fail(Errc::DimMismatch, "message length differs from B");
      x += dyn.msg_gain * m;
    }
  }
  if (dyn.w_max > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) x[i] += rng.uniform(-dyn.w_max, dyn.w_max);
  }
  Vec y = dyn.obs * x;
  if (dyn.n_max > 0.0) {
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += rng.uniform(-dyn.n_max, dyn.n_max);
  }
  Propagated out{s, std::move(y)};
  out.state.x = std::move(x);
  return out;
}

namespace {

// Small systems keep their temporaries on the stack.
template <class M>
void kalman_step(Vec& mean, Mat& cov, const Vec& y, const Mat& h, const Mat& r) {
  const Eigen::Index n = mean.size();
  const M sinn = h * cov * h.transpose() + r;
  const Eigen::LDLT<M> ldlt(sinn);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 1e-300) {
    fail(Errc::SingularCovariance, "innovation covariance is not invertible");
  }
  const M hc = h * cov;
  const M gain = ldlt.solve(hc).transpose();
  mean += gain * (y - h * mean);
  // Joseph form keeps the covariance symmetric PSD.
  const M ikh = M::Identity(n, n) - gain * h;
  const M next = ikh * cov * ikh.transpose() + gain * r * gain.transpose();
  cov = 0.5 * (next + next.transpose());
}

void kalman_update(Vec& mean, Mat& cov, const Vec& y, const Mat& h, const Mat& r) {
  const Eigen::Index n = mean.size();
  if (h.cols() != n || h.rows() != y.size() || r.rows() != y.size() || r.cols() != y.size() || cov.rows() != n) {
    fail(Errc::DimMismatch, "belief update dimensions disagree");
  }
  using Small = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 4, 4>;
  if (n <= 4 && h.rows() <= 4) {
    kalman_step<Small>(mean, cov, y, h, r);
  } else {
    kalman_step<Mat>(mean, cov, y, h, r);
  }
}

}  // namespace

VehicleState update_belief(const VehicleState& s, const Vec& y, const Mat& h, const Mat& r) {
  VehicleState out = s;
  kalman_update(out.belief_mean, out.belief_cov, y, h, r);
  return out;
}

Vec make_message(const Vec& x_hat, std::span<const Eigen::Index> mask, int cap, const Mat& s) {
  Vec m = s.size() > 0 ? Vec(s * x_hat) : x_hat;
  if (!mask.empty()) {
    Vec kept = Vec::Zero(m.size());
    for (Eigen::Index i : mask) {
      if (i >= 0 && i < m.size()) kept[i] = m[i];
    }
    m = kept;
  }
  if (cap <= 0) return Vec::Zero(m.size());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(m[a]) > std::abs(m[b]);
  });
  for (std::size_t i = static_cast<std::size_t>(cap); i < order.size(); ++i) m[order[i]] = 0.0;
  return m;
}

LinkDecision link_admissible(const LinkMetrics& m, double gamma_th_db, double d_max_m, double deadline_s) {
  if (!(m.phy_rate_bps > 0.0) || !(m.neighbor_service_rate > 0.0)) {
    fail(Errc::InvalidArgument, "link rates must be positive");
  }
  LinkDecision d;
  d.latency_s = m.payload_bits / m.phy_rate_bps + m.neighbor_queue / m.neighbor_service_rate;
  d.admissible = m.snr_db >= gamma_th_db && m.distance_m <= d_max_m && d.latency_s <= deadline_s;
  d.prob = logistic(m.snr_db - gamma_th_db) * logistic(d_max_m - m.distance_m);
  return d;
}

double packet_success(double snr_db, double gamma0_db, double steepness, double coding_gain) {
  if (!(coding_gain > 0.0 && coding_gain <= 1.0)) fail(Errc::InvalidCodingGain, "coding gain must lie in (0, 1]");
  return coding_gain * logistic(steepness * (snr_db - gamma0_db));
}

double update_queue(double q, double service_mu, double arrivals) {
  return std::max(0.0, q - service_mu) + arrivals;
}

ChannelPick select_phy_profile(const Vec& rates) {
  ChannelPick pick;
  for (Eigen::Index i = 0; i < rates.size(); ++i) {
    if (rates[i] > pick.rate) {
      pick.rate = rates[i];
      pick.index = i;
    }
  }
  return pick;
}

double cvar(std::vector<double> samples, double alpha) {
  if (samples.empty()) fail(Errc::TooFewSamples, "cvar needs samples");
  const double n = static_cast<double>(samples.size());
  const auto tail = static_cast<std::size_t>(
      std::clamp(std::ceil((1.0 - alpha) * n - 1e-9), 1.0, n));
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(tail - 1), samples.end(),
                   std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < tail; ++i) s += samples[i];
  return s / static_cast<double>(tail);
}

std::size_t cvar_policy(std::span<const MicroAction> actions, const CostSampler& sampler, double alpha, int n_samples,
                        std::uint64_t seed, RiskMeasure measure) {
  if (actions.empty()) fail(Errc::EmptyCandidates, "no actions to choose from");
  if (!(alpha >= 0.0 && alpha < 1.0)) fail(Errc::InvalidArgument, "alpha must lie in [0, 1)");
  if (n_samples < 1) fail(Errc::TooFewSamples, "n_samples must be positive");
  const Rng root(seed, 0xc0a7);
  std::size_t best = 0;
  double best_risk = std::numeric_limits<double>::infinity();
  std::vector<double> draws(static_cast<std::size_t>(n_samples));
  for (std::size_t a = 0; a < actions.size(); ++a) {
    Rng rng = root.fork(a);
    for (double& d : draws) d = sampler(actions[a], rng);
    double risk;
    if (measure == RiskMeasure::Mean) {
      risk = std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
    } else {
      risk = cvar(draws, alpha);
    }
    if (risk < best_risk) {
      best_risk = risk;
      best = a;
    }
  }
  return best;
}

double barrier_accel_bound(double gap_m, double rel_speed, double kappa, double d_safe, double dt) {
  return (kappa * (gap_m - d_safe) - rel_speed) / dt;
}

MicroAction safety_filter(const MicroAction& action, double gap_m, double rel_speed, double kappa, double u_max,
                          double d_safe, double dt) {
  if (!(kappa > 0.0) || !(dt > 0.0)) fail(Errc::InvalidArgument, "kappa and dt must be positive");
  MicroAction out = action;
  out.accel = std::clamp(action.accel, -u_max, u_max);
  const double bound = barrier_accel_bound(gap_m, rel_speed, kappa, d_safe, dt);
  if (out.accel > bound) out.accel = std::max(bound, -u_max);
  return out;
}

double kkt_residual(const Vec& grad_j, const Vec& grad_g, double constraint_value, double multiplier) {
  if (grad_j.size() != grad_g.size()) fail(Errc::LengthMismatch, "gradients differ in length");
  return (grad_j + multiplier * grad_g).norm() + std::abs(multiplier * constraint_value) +
         std::max(0.0, -multiplier) + std::max(0.0, constraint_value);
}

double update_energy_ledger(double e, const MicroAction& action, const Vec& tx_rates, double chi_drive,
                            double chi_comm) {
  if (chi_drive < 0.0 || chi_comm < 0.0) fail(Errc::InvalidArgument, "energy coefficients must be nonnegative");
  const double rates = tx_rates.size() > 0 ? tx_rates.cwiseMax(0.0).sum() : 0.0;
  return e + chi_drive * action.accel * action.accel + chi_comm * rates;
}

Amplitudes multiplicative_psi_update(const Amplitudes& psi, const Vec& grad, double eta) {
  if (grad.size() != psi.size()) fail(Errc::LengthMismatch, "gradient length differs from K");
  if (!(eta > 0.0)) fail(Errc::InvalidArgument, "eta must be positive");
  Vec v = psi.values().cwiseAbs().cwiseMax(1e-12);
  const double shift = grad.minCoeff();
  v.array() *= (-eta * (grad.array() - shift)).exp();
  return Amplitudes::normalized(std::move(v));
}

OffloadDecision offload_decide(double l_local, double l_upl, double l_proc, double l_down, double delta) {
  const double fog = l_upl + l_proc + l_down;
  OffloadDecision d;
  d.offload = l_local - fog >= delta;
  d.total_latency = d.offload ? fog : l_local;
  return d;
}

double shannon_rate(double alpha_share, double bandwidth_hz, double sinr_linear) {
  if (alpha_share < 0.0 || alpha_share > 1.0) fail(Errc::InvalidArgument, "share must lie in [0, 1]");
  return alpha_share * bandwidth_hz * std::log2(1.0 + std::max(sinr_linear, 0.0));
}

double priority_weight(double safety, double fault_risk, double staleness, const std::array<double, 3>& alphas) {
  return alphas[0] * safety + alphas[1] * fault_risk + alphas[2] * staleness;
}

Vec normalize_priorities(const Vec& weights) {
  const double s = weights.sum();
  if (!(s > 0.0)) return Vec::Constant(weights.size(), weights.size() > 0 ? 1.0 / weights.size() : 0.0);
  return weights / s;
}

Mat metropolis_weights(const Mat& adjacency) {
  const Eigen::Index n = adjacency.rows();
  if (adjacency.cols() != n) fail(Errc::InvalidWeights, "adjacency must be square");
  Vec deg = Vec::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j && adjacency(i, j) != 0.0) deg[i] += 1.0;
  Mat w = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i != j && adjacency(i, j) != 0.0) w(i, j) = 1.0 / (1.0 + std::max(deg[i], deg[j]));
    }
    w(i, i) = 1.0 - w.row(i).sum();
  }
  return w;
}

std::vector<Vec> consensus_step(const std::vector<Vec>& states, const Mat& weights, const std::vector<Vec>& targets,
                                const Vec& eta) {
  const auto n = static_cast<Eigen::Index>(states.size());
  if (weights.rows() != n || weights.cols() != n) fail(Errc::InvalidWeights, "weight matrix must be n x n");
  if (!targets.empty() && static_cast<Eigen::Index>(targets.size()) != n) {
    fail(Errc::LengthMismatch, "one innovation target per node");
  }
  if (!targets.empty() && eta.size() != n) fail(Errc::LengthMismatch, "one innovation gain per node");
  for (Eigen::Index i = 0; i < n; ++i) {
    double off = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (weights(i, j) < 0.0 || std::abs(weights(i, j) - weights(j, i)) > 1e-12) {
        fail(Errc::InvalidWeights, "weights must be symmetric and nonnegative");
      }
      if (j != i) off += weights(i, j);
    }
    if (off > 1.0 + 1e-12) fail(Errc::InvalidWeights, "off-diagonal row mass exceeds 1");
  }
  std::vector<Vec> out(states.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec acc = Vec::Zero(states[static_cast<std::size_t>(i)].size());
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i || weights(i, j) == 0.0) continue;
      acc += weights(i, j) * (states[static_cast<std::size_t>(j)] - states[static_cast<std::size_t>(i)]);
    }
    Vec next = states[static_cast<std::size_t>(i)] + acc;
    if (!targets.empty()) {
      next += eta[i] * (targets[static_cast<std::size_t>(i)] - states[static_cast<std::size_t>(i)]);
    }
    out[static_cast<std::size_t>(i)] = std::move(next);
  }
  return out;
}

double consensus_contraction(const Mat& weights) {
  const Eigen::Index n = weights.rows();
  if (n <= 1) return 0.0;
  const Mat centered = weights - Mat::Constant(n, n, 1.0 / static_cast<double>(n));
  const Eigen::SelfAdjointEigenSolver<Mat> es(centered);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double disagreement(const std::vector<Vec>& states) {
  if (states.empty()) return 0.0;
  Vec mean = Vec::Zero(states.front().size());
  for (const Vec& s : states) mean += s;
  mean /= static_cast<double>(states.size());
  double d = 0.0;
  for (const Vec& s : states) d += (s - mean).squaredNorm();
  return d;
}

PathFloor robust_path_floor(const std::vector<std::vector<double>>& link_probs_per_path, double rho_min) {
  if (link_probs_per_path.empty()) fail(Errc::EmptyPathSet, "no candidate paths");
  double rho = std::numeric_limits<double>::infinity();
  for (const auto& path : link_probs_per_path) {
    double p = 1.0;
    for (double q : path) p *= q;
    rho = std::min(rho, p);
  }
  return PathFloor{rho, rho >= rho_min};
}

// ---------------------------------------------------------------------------

VehicleState make_vehicle(const VehicleConfig& cfg, const Vec& x0, int targets) {
  VehicleState s;
  s.x = x0;
  s.belief_mean = x0;
  s.belief_cov = Mat::Identity(x0.size(), x0.size());
  s.psi = Amplitudes::uniform(std::max(targets, 1));
  s.temperature = TemperatureState{1.0, 0.9, 16};
  s.consensus_xi = Vec::Zero(std::max(targets, 1));
  s.eta_psi = 0.5;
  s.d_safe = 5.0;
  (void)cfg;
  return s;
}

VehicleStep step_vehicle(const VehicleState& s, const VehicleEnv& env, const VehicleConfig& cfg, Rng& rng) {
  const Dynamics& dyn = cfg.dynamics;
  const Eigen::Index n_targets = s.psi.size();
  const double dt = dyn.phi.rows() > 1 ? dyn.phi(0, 1) : 1.0;
  VehicleOutputs out;

  // 1. sense / predict / update
  std::vector<Vec> inbox;
  inbox.reserve(env.neighbors.size());
  for (const auto& nb : env.neighbors) {
    if (nb.message.size() == s.x.size()) inbox.push_back(nb.message);
  }
  Propagated pr = propagate_state(s, dyn, MicroAction{s.last_accel, 0}, inbox, rng);
  VehicleState st = std::move(pr.state);
  Vec uvec = Vec::Zero(dyn.gamma.cols());
  if (uvec.size() > 0) uvec[0] = s.last_accel;
  st.belief_mean = dyn.phi * st.belief_mean + dyn.gamma * uvec;
  const double qw = dyn.w_max * dyn.w_max / 3.0 + 1e-9;
  st.belief_cov = dyn.phi * st.belief_cov * dyn.phi.transpose() + qw * Mat::Identity(st.x.size(), st.x.size());
  const Mat r = cfg.obs_noise_cov.size() > 0
                    ? cfg.obs_noise_cov
                    : Mat((dyn.n_max * dyn.n_max / 3.0 + 1e-6) * Mat::Identity(dyn.obs.rows(), dyn.obs.rows()));
  kalman_update(st.belief_mean, st.belief_cov, pr.observation, dyn.obs, r);
  out.observation = pr.observation;

  // 2. message
  out.message = make_message(st.belief_mean, {}, cfg.message_cap);

  // 3. admissibility gate with fallback
  std::vector<std::size_t> admissible;
  std::vector<LinkDecision> decisions(env.links.size());
  double best_prob = -1.0;
  for (std::size_t i = 0; i < env.links.size(); ++i) {
    decisions[i] = link_admissible(env.links[i].metrics, cfg.gamma_th_db, cfg.d_max_m, cfg.deadline_s);
    if (decisions[i].admissible) admissible.push_back(i);
    if (decisions[i].prob > best_prob) {
      best_prob = decisions[i].prob;
      out.fallback = env.links[i].target;
    }
  }
  out.deferred = admissible.empty();

  // 4. queue + PHY profile
  Vec rates = Vec::Zero(static_cast<Eigen::Index>(admissible.size()));
  for (std::size_t a = 0; a < admissible.size(); ++a) rates[static_cast<Eigen::Index>(a)] =
      env.links[admissible[a]].metrics.phy_rate_bps;
  const ChannelPick phy = select_phy_profile(rates);
  const double payload = env.links.empty() ? 2048.0 : env.links.front().metrics.payload_bits;
  const double service_pkts = phy.index ? phy.rate / payload * dt : 0.0;
  st.queue_q = update_queue(s.queue_q, service_pkts, env.arrivals);

  // 5. activation probabilities over admissible links
  out.link_probs = Vec::Zero(n_targets);
  Vec theta = Vec::Zero(n_targets);
  double theta_mass = 0.0;
  for (std::size_t a : admissible) {
    const int t = env.links[a].target;
    theta[t] = st.psi[t] * st.psi[t];
    theta_mass += theta[t];
  }

  // 6. risk-aware link costs, micro-action and safety filter
  Vec link_cost = Vec::Constant(n_targets, 1.0);
  const Rng risk_root(rng.next_u64(), 0x11);
  std::vector<double> draws(static_cast<std::size_t>(cfg.n_samples));
  for (std::size_t a : admissible) {
    const LinkCandidate& lc = env.links[a];
    Rng rr = risk_root.fork(static_cast<std::uint64_t>(lc.target));
    const double floor = decisions[a].latency_s;
    for (double& d : draws) d = std::max(floor, lc.est_latency_s + lc.est_std_s * rr.normal());
    double risk;
    if (cfg.risk == RiskMeasure::Mean) {
      risk = std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
    } else {
      risk = cvar(draws, cfg.cvar_alpha);
    }
    link_cost[lc.target] = risk / cfg.deadline_s;
  }
  if (theta_mass > 0.0) {
    const double t = std::max(st.temperature.value, kTemperatureFloor);
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t a : admissible) lo = std::min(lo, link_cost[env.links[a].target]);
    double z = 0.0;
    for (std::size_t a : admissible) {
      const int tg = env.links[a].target;
      out.link_probs[tg] = theta[tg] / theta_mass * std::exp(-(link_cost[tg] - lo) / t);
      z += out.link_probs[tg];
    }
    out.link_probs /= z;
  }
  double expected_cost = 0.0;
  for (Eigen::Index t = 0; t < n_targets; ++t) expected_cost += out.link_probs[t] * link_cost[t];
  if (out.deferred) expected_cost = 1.0;
  out.link_cost = expected_cost;

  const double v = st.belief_mean.size() > 1 ? st.belief_mean[1] : 0.0;
  const double vt = env.target_speed;
  const std::array<MicroAction, 5> actions = {MicroAction{-cfg.u_max, 0}, MicroAction{-0.5 * cfg.u_max, 0},
                                              MicroAction{0.0, 0}, MicroAction{0.5 * cfg.u_max, 0},
                                              MicroAction{cfg.u_max, 0}};
  const double d_safe = st.d_safe;
  const CostSampler sampler = [&](const MicroAction& a, Rng& g) {
    const double lead = g.uniform(-env.leader_accel_spread, env.leader_accel_spread);
    const double v_next = v + a.accel * dt;
    const double gap_next = env.gap_m - (env.rel_speed + (a.accel - lead) * dt) * dt;
    const double e = (v_next - vt) / std::max(vt, 1.0);
    return e * e + 10.0 * std::max(0.0, d_safe - gap_next) / d_safe;
  };
  const std::size_t pick =
      cvar_policy(actions, sampler, cfg.cvar_alpha, cfg.n_samples, rng.next_u64(), cfg.risk);
  out.action = safety_filter(actions[pick], env.gap_m, env.rel_speed, cfg.kappa, cfg.u_max, d_safe, dt);

  // 7. KKT refinement: one projected-gradient step on a quadratic surrogate
  const double bound = std::max(barrier_accel_bound(env.gap_m, env.rel_speed, cfg.kappa, d_safe, dt), -cfg.u_max);
  const double ridge = 0.1;
  auto grad_j = [&](double a) { return (v + a * dt - vt) * dt + ridge * a; };
  double a_ref = std::clamp(out.action.accel - cfg.kkt_step * grad_j(out.action.accel), -cfg.u_max,
                            std::min(cfg.u_max, bound));
  const double g_val = a_ref - bound;
  const double lam = g_val >= -1e-9 ? std::max(0.0, -grad_j(a_ref)) : 0.0;
  out.kkt = kkt_residual(Vec::Constant(1, grad_j(a_ref)), Vec::Ones(1), g_val, lam);

  // 8. energy ledger
  st.energy_e = update_energy_ledger(st.energy_e, MicroAction{a_ref, 0}, Vec::Constant(1, phy.rate), cfg.chi_drive,
                                     cfg.chi_comm);

  // 9. control map with bounded actuation
  const double u = std::clamp(a_ref + cfg.control_gain * (vt - v), -cfg.u_max, std::min(cfg.u_max, bound));
  out.accel_applied = u;
  st.last_accel = u;

  // 10. psi update + entanglement
  st.psi = multiplicative_psi_update(st.psi, link_cost, st.eta_psi);
  if (cfg.entangle && !env.neighbors.empty()) {
    std::vector<Amplitudes> nb;
    std::vector<double> cp;
    for (const auto& n : env.neighbors) {
      if (n.psi && n.psi->size() == n_targets) {
        nb.push_back(*n.psi);
        cp.push_back(-cfg.entangle_coupling / static_cast<double>(env.neighbors.size()));
      }
    }
    st.psi = entangle_neighbors(st.psi, nb, cp);
  }

  // 11. collapse on a cost spike
  if (!out.deferred && should_collapse(expected_cost, s.last_cost, cfg.collapse_threshold)) {
    Vec masked = Vec::Zero(n_targets);
    for (std::size_t a : admissible) masked[env.links[a].target] = std::abs(st.psi[env.links[a].target]);
    const int k = static_cast<int>(argmax_lowest(masked));
    out.committed = k;
    out.collapsed = true;
    out.link_probs.setZero();
    out.link_probs[k] = 1.0;
  }
  st.last_cost = expected_cost;
  st.cost_history.push(expected_cost);
  if (cfg.adaptive_temperature) {
    st.temperature = update_temperature(st.temperature, st.cost_history.values(), TemperatureVariant::Vehicle);
  }

  // 12. offload decision
  out.offload = offload_decide(env.l_local, env.l_upl, env.l_proc, env.l_down, cfg.offload_delta);

  // 13. bandwidth share
  double sharing = 0.0;
  for (std::size_t a : admissible) sharing += out.link_probs[env.links[a].target] * std::max(env.links[a].sharing, 1);
  out.bandwidth_share = sharing > 0.0 ? 1.0 / sharing : 0.0;

  // 14. priority
  out.priority = priority_weight(std::min(1.0, d_safe / std::max(env.gap_m, 1e-3)), 1.0 - std::max(best_prob, 0.0),
                                 env.stale_s, cfg.priority_alphas);

  // 15. consensus with neighbors + innovation
  if (st.consensus_xi.size() == n_targets) {
    Vec acc = Vec::Zero(n_targets);
    for (const auto& nb : env.neighbors) {
      if (nb.xi && nb.xi->size() == n_targets) acc += nb.weight * (*nb.xi - s.consensus_xi);
    }
    Vec next = s.consensus_xi + acc;
    if (env.innovation.size() == n_targets) next += cfg.consensus_eta * (env.innovation - s.consensus_xi);
    st.consensus_xi = std::move(next);
  }

  // 16. robust path floor
  std::vector<std::vector<double>> paths;
  for (std::size_t a : admissible) paths.push_back({decisions[a].prob});
  for (const auto& nb : env.neighbors) {
    if (!nb.relay_probs.empty()) paths.push_back(nb.relay_probs);
  }
  if (paths.empty()) {
    out.robust_rho = 0.0;
    out.robust_ok = false;
  } else {
    const PathFloor pf = robust_path_floor(paths, cfg.rho_min);
    out.robust_rho = pf.rho;
    out.robust_ok = pf.ok;
  }

  // 17. Lyapunov check on the speed-tracking error; repair tightens margins
  const double err = v - vt;
  const double err_next = v + u * dt - vt;
  const double v_next = err_next * err_next + env.force_lyapunov_increase;
  const double w2 = env.leader_accel_spread * env.leader_accel_spread * dt * dt + dyn.w_max * dyn.w_max;
  out.lyapunov_ok = lyapunov_check(v_next, err * err, err * err, w2, cfg.lyapunov_lambda, cfg.lyapunov_chi);
  st.lyapunov_v = v_next;
  if (!out.lyapunov_ok) {
    st.d_safe = s.d_safe * 1.1;
    st.eta_psi = std::max(s.eta_psi * 0.5, 1e-3);
  }
  return VehicleStep{std::move(st), std::move(out)};
}

}  // namespace qivnom
