#pragma once

#include <cstdint>
#include <deque>

#include "qivnom/qstate.hpp"
#include "qivnom/rng.hpp"

namespace qivnom {

inline constexpr double kTemperatureFloor = 1e-6;

enum class TemperatureVariant { Qio, Vehicle, Cloud };

struct TemperatureState {
  double value = 1.0;
  double smoothing_beta = 0.9;
  int history_window = 16;
};

// Population variance of the last `window` entries (all entries if fewer).
double windowed_variance(const Vec& history, int window);

TemperatureState update_temperature(const TemperatureState& state, const Vec& cost_history, TemperatureVariant variant);

// Bounded history buffer that feeds update_temperature.
class CostHistory {
 public:
  explicit CostHistory(int window = 16) : window_(window) {}
  void push(double c);
  Vec values() const;
  bool empty() const noexcept { return buf_.empty(); }
  void clear() noexcept { buf_.clear(); }

 private:
  int window_;
  std::deque<double> buf_;
};

// Boltzmann weights exp(-h/T), shifted by the minimum cost before exponentiating.
PlanDistribution soft_policy(const Vec& costs, double temperature);

// Inverse-CDF draw using one uniform from rng.
Eigen::Index sample_plan(const PlanDistribution& pi, Rng& rng);
Eigen::Index sample_plan(const PlanDistribution& pi, std::uint64_t seed);

}  // namespace qivnom
