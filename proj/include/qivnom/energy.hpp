#pragma once

#include <array>
#include <map>
#include <string_view>
#include <vector>

#include "qivnom/qstate.hpp"

namespace qivnom {

enum class Objective { Latency, Reliability, Energy, Throughput };

inline constexpr std::array<Objective, 4> kAllObjectives = {Objective::Latency, Objective::Reliability,
                                                            Objective::Energy, Objective::Throughput};

std::string_view objective_name(Objective q) noexcept;

struct CostBundle {
  std::map<Objective, Vec> per_objective;
  std::map<Objective, double> weights;
  Vec residuals;  // constraint violation per plan, <= 0 is feasible; may be empty
  double penalty_rho = 0.0;

  Eigen::Index plans() const;
};

// Probability caps plus forbidden plans. Caps of 1 mean "unbounded".
struct FeasibleSet {
  Vec prob_upper_bounds;
  std::vector<Eigen::Index> forbidden;

  static FeasibleSet unconstrained(Eigen::Index k);

  bool is_forbidden(Eigen::Index k) const;
  bool trivial() const;
  void validate() const;

  // Residual G_k = (p_k - cap_k) on capped plans, +M on forbidden ones.
  Vec residuals(const Vec& probs, double big_m = 1e3) const;
};

// Rescales to [0, 1]; a constant vector maps to zeros.
Vec minmax_normalize(const Vec& v);

Vec assemble_cost(const CostBundle& bundle);

// Diagonal of diag(h) + rho * diag(max{0, G}^2). An empty G means feasible.
Vec penalized_operator(const Vec& h, const Vec& residuals, double rho);

double energy(const Amplitudes& psi, const Vec& op_diag);
Vec energy_gradient(const Amplitudes& psi, const Vec& op_diag);

struct Scalarization {
  double value = 0.0;
  Vec alpha;
};

// min over {alpha : sum alpha = 1, alpha_q >= alpha_min} of max_q alpha_q (C_q - C*_q).
// Grid search for |Q| <= 3, projected subgradient for larger |Q|.
Scalarization tchebycheff(const Vec& costs, const Vec& utopia, double alpha_min = 1e-3);
Scalarization tchebycheff(const std::map<Objective, double>& costs, const std::map<Objective, double>& utopia,
                          double alpha_min = 1e-3);

// Euclidean projection onto {x : x_i >= lo, sum x = 1}.
Vec project_clipped_simplex(const Vec& x, double lo);

Amplitudes project_feasible(const Amplitudes& psi, const FeasibleSet& fs);

inline bool descent_certificate(double e_next, double e_prev, double grad_norm_sq, double eta, double l_smooth) noexcept {
  return e_next - e_prev <= -eta * grad_norm_sq + eta * eta * l_smooth * grad_norm_sq;
}

}  // namespace qivnom
