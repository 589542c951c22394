#include "qivnom/anneal.hpp"

#include <algorithm>
#include <cmath>

#include "qivnom/error.hpp"

namespace qivnom {

double windowed_variance(const Vec& history, int window) {
  const Eigen::Index n = history.size();
  if (n == 0) return 0.0;
  const Eigen::Index w = window > 0 ? std::min<Eigen::Index>(n, window) : n;
  const auto tail = history.tail(w);
  const double mean = tail.mean();
  return (tail.array() - mean).square().mean();
}

TemperatureState update_temperature(const TemperatureState& state, const Vec& cost_history, TemperatureVariant variant) {
  if (cost_history.size() == 0) fail(Errc::InvalidArgument, "cost history must be nonempty");
  const double b = state.smoothing_beta;
  if (!(b >= 0.0 && b < 1.0)) fail(Errc::InvalidArgument, "smoothing beta must lie in [0, 1)");
  double var = windowed_variance(cost_history, state.history_window);
  if (!std::isfinite(var)) fail(Errc::NonFinite, "cost variance is not finite");
  if (variant == TemperatureVariant::Vehicle) var = var / (1.0 + var);
  TemperatureState out = state;
  out.value = std::max(b * state.value + (1.0 - b) * var, kTemperatureFloor);
  return out;
}

void CostHistory::push(double c) {
  buf_.push_back(c);
  while (window_ > 0 && static_cast<int>(buf_.size()) > window_) buf_.pop_front();
}

Vec CostHistory::values() const {
  Vec v(static_cast<Eigen::Index>(buf_.size()));
  Eigen::Index i = 0;
  for (double c : buf_) v[i++] = c;
  return v;
}

PlanDistribution soft_policy(const Vec& costs, double temperature) {
  require(costs.size() >= 1, Errc::InvalidArgument, "soft policy needs at least one plan");
  const double t = std::max(temperature, kTemperatureFloor);
  const double lo = costs.minCoeff();
  if (!std::isfinite(lo)) fail(Errc::NonFinite, "non-finite plan cost");
  Vec w = (-(costs.array() - lo) / t).exp().matrix();
  return PlanDistribution::from_weights(std::move(w));
}

Eigen::Index sample_plan(const PlanDistribution& pi, Rng& rng) {
  const Vec& p = pi.probs();
  const double u = rng.uniform();
  double acc = 0.0;
  Eigen::Index last = 0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p[k] <= 0.0) continue;
    acc += p[k];
    last = k;
    if (u < acc) return k;
  }
  return last;
}

Eigen::Index sample_plan(const PlanDistribution& pi, std::uint64_t seed) {
  Rng rng(seed, 0x5a3d1e);
  return sample_plan(pi, rng);
}

}  // namespace qivnom
