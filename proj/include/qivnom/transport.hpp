#pragma once

#include "qivnom/kernels.hpp"
#include "qivnom/qstate.hpp"

namespace qivnom {

struct TransportProblem {
  Mat cost;  // F x K
  Vec mu;    // length F
  Vec nu;    // length K
  double epsilon = 1e-2;

  void validate() const;
  TransportProblem transposed() const;
};

struct TransportPlan {
  Mat coupling;
  int iterations = 0;
  double marginal_error = 0.0;
  Vec f, g;  // final potentials (row-first sweep)
};

struct SinkhornOptions {
  int max_iters = 10000;
  double tol = 1e-6;
  kernels::Backend backend = kernels::Backend::Serial;
  // Optional starting potentials, e.g. from a previous solve of a nearby
  // problem. Used only when both match the problem shape; skips epsilon scaling.
  Vec warm_f, warm_g;
};

// max of the L1 row and column deviations from (mu, nu)
double marginal_error(const Mat& coupling, const Vec& mu, const Vec& nu);

// Log-domain Sinkhorn. The returned coupling averages the row-first and
// column-first sweeps, which makes the solver exactly equivariant under
// transposition. Throws NotConverged if tol is unmet after max_iters.
TransportPlan sinkhorn(const TransportProblem& problem, const SinkhornOptions& opts = {});
TransportPlan sinkhorn(const TransportProblem& problem, int max_iters, double tol);

// Single alternating sweep sequence starting with the row potentials.
TransportPlan sinkhorn_row_first(const TransportProblem& problem, const SinkhornOptions& opts = {});

double transport_objective(const TransportPlan& plan, const TransportProblem& problem);

// Fills cells in ascending cost order (ties by row, then column).
TransportPlan assign_greedy(const TransportProblem& problem);

}  // namespace qivnom
