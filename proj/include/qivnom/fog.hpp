#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qivnom/qstate.hpp"
#include "qivnom/vehicle.hpp"

namespace qivnom {

struct FogState {
  double backlog = 0.0;
  Vec cpu_shares;  // one per task
  Vec cache_frac;  // one per task
  double dual = 0.0;
  double energy = 0.0;
  double cpu_cap = 1.0;
  double mem_cap = 1.0;
  double violation = 0.0;  // primal violation before the last projection
  int lyapunov_violations = 0;
};

struct TaskDescriptor {
  double priority = 1.0;
  double latency = 1.0;  // work: latency cost is latency / share
  double energy = 0.0;   // per unit of CPU share
  double storage = 0.0;  // per unit of uncached fraction
};

struct AggregateInput {
  Mat weight;
  Vec y;
};

// z = sum W_i y_i + U ybar
Vec aggregate(std::span<const AggregateInput> inputs, const Mat& u, const Vec& ybar);

// s = P tanh(Omega z + b)
Vec sketch(const Vec& z, const Mat& p, const Mat& omega, const Vec& b);

Vec privatize(const Vec& s, double sigma, std::uint64_t seed);

// Overflow-safe softplus of alpha ||D z||_1 + beta.
double hazard_score(const Vec& z, const Mat& d, double alpha, double beta);

struct RouteCandidate {
  double travel_time = 0.0;
  double congestion = 0.0;
  double bandwidth = 1.0;
};

std::optional<std::size_t> pick_route(std::span<const RouteCandidate> candidates, const std::array<double, 3>& weights,
                                      double hazard, double hazard_threshold);

inline ChannelPick schedule_subchannel(const Vec& rates) { return select_phy_profile(rates); }

enum class Regularizer { None, Ridge };

struct AllocateOptions {
  double alpha = 1.0;  // latency weight
  double beta = 1.0;   // energy weight
  double gamma = 1.0;  // storage weight
  double eta = 1e-2;
  Regularizer reg = Regularizer::Ridge;
  double ridge = 1e-3;
  int rounds = 100;
  double min_share = 1e-6;
};

double allocation_objective(std::span<const TaskDescriptor> tasks, const FogState& state, const AllocateOptions& opts);

FogState allocate(std::span<const TaskDescriptor> tasks, const FogState& state, const AllocateOptions& opts);

// Z / (mu - Lambda) + Delta; throws Overload when mu <= Lambda.
double fog_delay(double z, double mu, double lambda, double delta);

double cache_hit(double nu, double request_intensity);

struct FogTickInput {
  double arrivals = 0.0;
  double services = 0.0;
  Vec tx_rates;
  Vec hazards;  // one per attached vehicle
};

struct FogCoefs {
  double eta_cpu = 1.0;
  double eta_tx = 1e-9;
  double alert_threshold = 3.0;
  double lyapunov_lambda = 0.01;
  double lyapunov_chi = 1.0;
};

struct FogTick {
  FogState state;
  std::vector<std::size_t> alerts;
  bool lyapunov_ok = true;
};

FogTick fog_tick(const FogState& state, const FogTickInput& in, const FogCoefs& coefs);

}  // namespace qivnom
