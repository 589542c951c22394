#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "qivnom/anneal.hpp"
#include "qivnom/energy.hpp"

namespace qivnom {

struct QioConfig {
  Eigen::Index K = 128;
  Eigen::Index L = 1;
  double eta = 1e-2;
  double beta = 0.9;
  double rho = 1.0;
  double tol_energy = 1e-8;
  double tol_coupling = 1e-6;
  int max_iters = 5000;
  // Smoothness bound for the descent certificate. For an unpenalized operator
  // with entries in [0, 1] the exact sphere step needs spread(H) + eta |d|^2 <= 1.04.
  double l_smooth = 10.0;
  double alpha_min = 1e-3;
  std::uint64_t seed = 0;
  double initial_temperature = 1.0;
  int history_window = 16;
  double init_scale = 0.1;  // spread of the random initial weight matrix

  bool coupling = true;
  bool adaptive_temperature = true;
  bool projection = true;
  bool scalarize = true;
  bool normalize_costs = true;

  void validate() const;
};

struct QioRecord {
  double energy = 0.0;
  double temperature = 0.0;
  double coupling = 0.0;
  double grad_norm = 0.0;
  double eta = 0.0;
  double rho = 0.0;
  Eigen::Index selected = 0;
  double psi_norm = 1.0;
  bool accepted = true;
};

using QioTrace = std::vector<QioRecord>;

// Mutable optimizer state; lets a caller resume across calls.
struct QioState {
  Amplitudes psi = Amplitudes::uniform(1);
  Amplitudes psi_m = Amplitudes::uniform(1);
  Mat joint;
  TemperatureState temperature;
  CostHistory history;
  double eta = 1e-2;
  double rho = 1.0;
  std::map<Objective, double> weights;  // empty until the first bundle arrives
  int backoffs = 0;
};

struct QioResult {
  Amplitudes psi = Amplitudes::uniform(1);
  PlanDistribution distribution = PlanDistribution::uniform(1);
  Eigen::Index plan = 0;
  QioTrace trace;
  bool converged = false;
  QioState state;
};

// Cost provider: iteration index and current amplitudes -> cost bundle.
using CostProvider = std::function<CostBundle(int, const Amplitudes&)>;

double step_size_backoff(double eta, int violations);

QioState initial_qio_state(const Vec& features, const QioConfig& cfg);

QioResult optimize(const Vec& features, const CostProvider& costs, const FeasibleSet& fs, const QioConfig& cfg);
QioResult optimize(QioState state, const CostProvider& costs, const FeasibleSet& fs, const QioConfig& cfg);

// Provider returning the same bundle every iteration.
CostProvider constant_costs(CostBundle bundle);

}  // namespace qivnom
