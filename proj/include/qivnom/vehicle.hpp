#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "qivnom/anneal.hpp"
#include "qivnom/qstate.hpp"
#include "qivnom/rng.hpp"

namespace qivnom {

struct MicroAction {
  double accel = 0.0;
  int lane_change = 0;
};

struct LinkMetrics {
  double snr_db = 0.0;
  double distance_m = 0.0;
  double payload_bits = 2048.0;
  double phy_rate_bps = 1e6;
  double neighbor_queue = 0.0;
  double neighbor_service_rate = 1.0;
};

// x' = phi x + gamma u + B sum(m) + w,  y = H x' + n, with w and n uniform in
// +-w_max and +-n_max per component.
struct Dynamics {
  Mat phi;
  Mat gamma;
  Mat msg_gain;
  Mat obs;
  double w_max = 0.0;
  double n_max = 0.0;

  // State (position, speed, heading) with Euler discretization.
  static Dynamics longitudinal(double dt);
};

struct VehicleState {
  Vec x;
  Vec belief_mean;
  Mat belief_cov;
  double queue_q = 0.0;
  double energy_e = 0.0;
  Amplitudes psi = Amplitudes::uniform(1);
  TemperatureState temperature;
  Vec consensus_xi;

  // Tightened by the Lyapunov repair branch.
  double d_safe = 5.0;
  double eta_psi = 0.5;
  double lyapunov_v = 0.0;
  double last_cost = 0.0;
  double last_accel = 0.0;
  CostHistory cost_history{16};
};

struct Propagated {
  VehicleState state;
  Vec observation;
};

Propagated propagate_state(const VehicleState& s, const Dynamics& dyn, const MicroAction& u,
                           std::span<const Vec> messages, Rng& rng);

// Kalman measurement update with observation matrix H and noise covariance R.
VehicleState update_belief(const VehicleState& s, const Vec& y, const Mat& h, const Mat& r);

// Keeps the `cap` largest-magnitude entries of S x inside `mask` (empty mask = all).
Vec make_message(const Vec& x_hat, std::span<const Eigen::Index> mask, int cap, const Mat& s = Mat());

struct LinkDecision {
  bool admissible = false;
  double latency_s = 0.0;
  double prob = 0.0;
};

LinkDecision link_admissible(const LinkMetrics& m, double gamma_th_db, double d_max_m, double deadline_s);

double packet_success(double snr_db, double gamma0_db, double steepness, double coding_gain);

double update_queue(double q, double service_mu, double arrivals);

struct ChannelPick {
  std::optional<Eigen::Index> index;
  double rate = 0.0;
};

// Highest rate wins, lowest index on ties, none if every rate is zero.
ChannelPick select_phy_profile(const Vec& rates);

// Mean of the ceil((1 - alpha) n) largest samples.
double cvar(std::vector<double> samples, double alpha);

enum class RiskMeasure { CVaR, Mean };

using CostSampler = std::function<double(const MicroAction&, Rng&)>;

// Index of the action with the smallest risk over n_samples draws each.
std::size_t cvar_policy(std::span<const MicroAction> actions, const CostSampler& sampler, double alpha, int n_samples,
                        std::uint64_t seed, RiskMeasure measure = RiskMeasure::CVaR);

// Largest acceleration a with  -(rel_speed + a dt) + kappa (gap - d_safe) >= 0.
double barrier_accel_bound(double gap_m, double rel_speed, double kappa, double d_safe, double dt);

MicroAction safety_filter(const MicroAction& action, double gap_m, double rel_speed, double kappa, double u_max,
                          double d_safe = 5.0, double dt = 1.0);

double kkt_residual(const Vec& grad_j, const Vec& grad_g, double constraint_value, double multiplier);

double update_energy_ledger(double e, const MicroAction& action, const Vec& tx_rates, double chi_drive, double chi_comm);

Amplitudes multiplicative_psi_update(const Amplitudes& psi, const Vec& grad, double eta);

struct OffloadDecision {
  bool offload = false;
  double total_latency = 0.0;
};

OffloadDecision offload_decide(double l_local, double l_upl, double l_proc, double l_down, double delta);

double shannon_rate(double alpha_share, double bandwidth_hz, double sinr_linear);

double priority_weight(double safety, double fault_risk, double staleness, const std::array<double, 3>& alphas);
Vec normalize_priorities(const Vec& weights);

// Metropolis weights for an undirected graph given as a symmetric 0/1 matrix.
Mat metropolis_weights(const Mat& adjacency);

// xi'_i = xi_i + sum_j w_ij (xi_j - xi_i) + eta_i (target_i - xi_i).
// An empty `targets` list means zero innovations.
std::vector<Vec> consensus_step(const std::vector<Vec>& states, const Mat& weights, const std::vector<Vec>& targets,
                                const Vec& eta);

// Spectral radius of W - 11^T/n: one-step contraction of the disagreement norm.
double consensus_contraction(const Mat& weights);

double disagreement(const std::vector<Vec>& states);

struct PathFloor {
  double rho = 0.0;
  bool ok = false;
};

PathFloor robust_path_floor(const std::vector<std::vector<double>>& link_probs_per_path, double rho_min);

inline bool lyapunov_check(double v_next, double v_prev, double x_norm_sq, double w_norm_sq, double lambda_margin,
                           double chi) noexcept {
  return v_next - v_prev <= -lambda_margin * x_norm_sq + chi * w_norm_sq;
}

// ---------------------------------------------------------------------------
// One vehicle tick.

struct VehicleConfig {
  Dynamics dynamics = Dynamics::longitudinal(1.0);
  Mat obs_noise_cov;  // defaults to n_max^2/3 I when empty
  double gamma_th_db = 5.0;
  double d_max_m = 600.0;
  double deadline_s = 0.080;
  double gamma0_db = 5.0;
  double steepness = 0.5;
  double coding_gain = 0.98;
  double cvar_alpha = 0.95;
  int n_samples = 64;
  double kappa = 1.0;
  double u_max = 3.0;
  double entangle_coupling = 0.5;
  double collapse_threshold = 0.5;
  double offload_delta = 0.002;
  double chi_drive = 1e-3;
  double chi_comm = 1e-9;
  double lyapunov_lambda = 0.05;
  double lyapunov_chi = 1.0;
  std::array<double, 3> priority_alphas = {0.5, 0.3, 0.2};
  double consensus_eta = 0.3;
  double rho_min = 0.5;
  double bandwidth_hz = 10e6;
  int message_cap = 2;
  double kkt_step = 0.2;
  double control_gain = 0.3;

  bool entangle = true;
  bool adaptive_temperature = true;
  RiskMeasure risk = RiskMeasure::CVaR;
};

// One candidate uplink as seen by the vehicle at this tick.
struct LinkCandidate {
  int target = 0;  // RSU index
  LinkMetrics metrics;
  double est_latency_s = 0.0;  // predicted mean latency through this link
  double est_std_s = 0.0;      // predicted volatility
  int sharing = 1;             // vehicles currently associated with the target
};

struct NeighborView {
  const Amplitudes* psi = nullptr;
  const Vec* xi = nullptr;
  double weight = 0.0;  // Metropolis weight
  Vec message;
  std::vector<double> relay_probs;  // link probabilities along a relay path
};

struct VehicleEnv {
  std::vector<LinkCandidate> links;  // over all targets; inadmissible ones are gated
  std::vector<NeighborView> neighbors;
  double gap_m = 1e9;
  double rel_speed = 0.0;
  double target_speed = 10.0;
  double leader_accel_spread = 1.0;
  double arrivals = 0.0;  // packets generated this tick
  double l_local = 0.0, l_upl = 0.0, l_proc = 0.0, l_down = 0.0;
  Vec innovation;  // target for the consensus estimate; empty = none
  double stale_s = 0.0;
  double force_lyapunov_increase = 0.0;  // test hook: added to V_next
};

struct VehicleOutputs {
  Vec link_probs;  // over targets; zero on inadmissible links
  std::optional<int> committed;
  bool deferred = false;
  int fallback = -1;  // best-probability link when deferring
  MicroAction action;
  double kkt = 0.0;
  double accel_applied = 0.0;
  bool collapsed = false;
  OffloadDecision offload;
  double bandwidth_share = 0.0;
  double priority = 0.0;
  Vec message;
  double robust_rho = 0.0;
  bool robust_ok = true;
  bool lyapunov_ok = true;
  double link_cost = 0.0;
  Vec observation;
};

struct VehicleStep {
  VehicleState state;
  VehicleOutputs out;
};

VehicleState make_vehicle(const VehicleConfig& cfg, const Vec& x0, int targets);

VehicleStep step_vehicle(const VehicleState& s, const VehicleEnv& env, const VehicleConfig& cfg, Rng& rng);

}  // namespace qivnom
