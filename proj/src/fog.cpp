#include "qivnom/fog.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qivnom/energy.hpp"
#include "qivnom/error.hpp"
#include "qivnom/rng.hpp"

namespace qivnom {

Vec aggregate(std::span<const AggregateInput> inputs, const Mat& u, const Vec& ybar) {
  if (u.cols() != ybar.size()) fail(Errc::DimMismatch, "U and ybar disagree");
  Vec z = u.size() > 0 ? Vec(u * ybar) : Vec();
  for (const auto& in : inputs) {
    if (in.weight.cols() != in.y.size()) fail(Errc::DimMismatch, "W_i and y_i disagree");
    if (z.size() == 0) z = Vec::Zero(in.weight.rows());
    if (in.weight.rows() != z.size()) fail(Errc::DimMismatch, "inputs map to different dimensions");
    z += in.weight * in.y;
  }
  return z;
}

Vec sketch(const Vec& z, const Mat& p, const Mat& omega, const Vec& b) {
  if (omega.cols() != z.size() || omega.rows() != b.size() || p.cols() != b.size()) {
    fail(Errc::DimMismatch, "sketch operators disagree");
  }
  return p * (omega * z + b).array().tanh().matrix();
}

Vec privatize(const Vec& s, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) fail(Errc::InvalidArgument, "sigma must be nonnegative");
  if (sigma == 0.0) return s;
  Rng rng(seed, 0xd1ff);
  Vec out = s;
  for (double& x : out) x += sigma * rng.normal();
  return out;
}

double hazard_score(const Vec& z, const Mat& d, double alpha, double beta) {
  const double a = alpha * (d.size() > 0 ? (d * z).lpNorm<1>() : z.lpNorm<1>()) + beta;
  if (a > 30.0) return a;
  return std::log1p(std::exp(a));
}

std::optional<std::size_t> pick_route(std::span<const RouteCandidate> candidates, const std::array<double, 3>& weights,
                                      double hazard, double hazard_threshold) {
  if (candidates.empty()) fail(Errc::EmptyCandidates, "no detour candidates");
  if (hazard > hazard_threshold) return std::nullopt;
  std::size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!(c.bandwidth > 0.0)) fail(Errc::InvalidArgument, "candidate bandwidth must be positive");
    const double score = weights[0] * c.travel_time + weights[1] * c.congestion + weights[2] / c.bandwidth;
    if (score < best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

namespace {

void check_tasks(std::span<const TaskDescriptor> tasks, const FogState& s) {
  for (const auto& t : tasks) {
    if (!(t.priority > 0.0)) fail(Errc::InvalidArgument, "task priority must be positive");
  }
  if (s.cpu_shares.size() != static_cast<Eigen::Index>(tasks.size()) ||
      s.cache_frac.size() != static_cast<Eigen::Index>(tasks.size())) {
    fail(Errc::LengthMismatch, "one CPU share and cache fraction per task");
  }
}

// Projection onto {x >= lo, sum x <= cap}.
Vec project_capped(const Vec& x, double lo, double cap) {
  Vec y = x.cwiseMax(lo);
  if (y.sum() <= cap || y.size() == 0) return y;
  Vec p = cap * project_clipped_simplex(x / cap, std::min(lo / cap, 1.0 / static_cast<double>(x.size())));
  const double total = p.sum();
  if (total > cap) p *= cap / total;
  return p;
}

// argmin_p  c / p + r p^2 / 2 + (p - v)^2 / (2 eta)  over p > 0, i.e. the
// positive root of (r + 1/eta) p^3 - (v/eta) p^2 - c = 0.
double prox_latency(double v, double c_eta, double eta, double r) {
  const double a = 1.0 + eta * r;  // scaled by eta
  if (c_eta <= 0.0) return std::max(v / a, 0.0);
  // cubic a p^3 - v p^2 - c_eta = 0 has exactly one positive root
  double p = std::max({v / a, std::cbrt(c_eta / a), 1e-12});
  for (int it = 0; it < 100; ++it) {
    const double f = a * p * p * p - v * p * p - c_eta;
    const double df = 3.0 * a * p * p - 2.0 * v * p;
    const double next = p - f / df;
    if (!(next > 0.0)) {
      p *= 0.5;
      continue;
    }
    if (std::abs(next - p) <= 1e-15 * p) return next;
    p = next;
  }
  return p;
}

}  // namespace

double allocation_objective(std::span<const TaskDescriptor> tasks, const FogState& s, const AllocateOptions& o) {
  check_tasks(tasks, s);
  double j = 0.0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const auto& t = tasks[k];
    j += t.priority * (o.alpha * t.latency / std::max(s.cpu_shares[i], o.min_share) + o.beta * t.energy * s.cpu_shares[i] +
                       o.gamma * t.storage * (1.0 - s.cache_frac[i]));
  }
  if (o.reg == Regularizer::Ridge) j += 0.5 * o.ridge * (s.cpu_shares.squaredNorm() + s.cache_frac.squaredNorm());
  return j;
}

FogState allocate(std::span<const TaskDescriptor> tasks, const FogState& state, const AllocateOptions& o) {
  if (!(o.eta > 0.0)) fail(Errc::InvalidArgument, "eta must be positive");
  if (!(state.cpu_cap > 0.0) || !(state.mem_cap > 0.0)) fail(Errc::InvalidArgument, "capacities must be positive");
  check_tasks(tasks, state);
  FogState s = state;
  const auto n = static_cast<Eigen::Index>(tasks.size());
  const double r = o.reg == Regularizer::Ridge ? o.ridge : 0.0;
  for (int round = 0; round < o.rounds; ++round) {
    Vec pi = s.cpu_shares;
    Vec ka = s.cache_frac;
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& t = tasks[static_cast<std::size_t>(k)];
      // The linear energy and dual terms take the gradient step; latency and
      // ridge go through their closed-form prox.
      const double v = pi[k] - o.eta * (t.priority * o.beta * t.energy + s.dual);
      pi[k] = std::max(prox_latency(v, o.eta * t.priority * o.alpha * t.latency, o.eta, r), o.min_share);
      ka[k] = (ka[k] + o.eta * t.priority * o.gamma * t.storage) / (1.0 + o.eta * r);
    }
    const double used = pi.sum();
    s.violation = std::max(0.0, used - s.cpu_cap);
    s.dual = std::max(0.0, s.dual + o.eta * (used - s.cpu_cap));
    s.cache_frac = project_capped(ka.cwiseMin(1.0), 0.0, s.mem_cap);
    s.cpu_shares = project_capped(pi, o.min_share, s.cpu_cap);
  }
  return s;
}

double fog_delay(double z, double mu, double lambda, double delta) {
  if (mu <= lambda) fail(Errc::Overload, "service rate does not exceed arrivals");
  return z / (mu - lambda) + delta;
}

double cache_hit(double nu, double request_intensity) {
  return -std::expm1(-std::max(0.0, nu) * std::max(0.0, request_intensity));
}

FogTick fog_tick(const FogState& state, const FogTickInput& in, const FogCoefs& c) {
  FogTick out{state, {}, true};
  FogState& s = out.state;
  s.backlog = std::max(0.0, state.backlog + in.arrivals - in.services);
  const double cpu = s.cpu_shares.size() > 0 ? s.cpu_shares.sum() : 0.0;
  const double tx = in.tx_rates.size() > 0 ? in.tx_rates.cwiseMax(0.0).sum() : 0.0;
  s.energy = state.energy + c.eta_cpu * cpu + c.eta_tx * tx;
  for (Eigen::Index i = 0; i < in.hazards.size(); ++i) {
    if (in.hazards[i] >= c.alert_threshold) out.alerts.push_back(static_cast<std::size_t>(i));
  }
  const double v_prev = state.backlog * state.backlog;
  const double v_next = s.backlog * s.backlog;
  out.lyapunov_ok = lyapunov_check(v_next, v_prev, v_prev, in.arrivals * in.arrivals, c.lyapunov_lambda, c.lyapunov_chi);
  if (!out.lyapunov_ok) ++s.lyapunov_violations;
  return out;
}

}  // namespace qivnom
