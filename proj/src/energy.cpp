#include "qivnom/energy.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "qivnom/error.hpp"

namespace qivnom {

std::string_view objective_name(Objective q) noexcept {
  switch (q) {
    case Objective::Latency: return "L";
    case Objective::Reliability: return "R";
    case Objective::Energy: return "E";
    case Objective::Throughput: return "Th";
  }
  return "?";
}

Eigen::Index CostBundle::plans() const {
  if (per_objective.empty()) fail(Errc::InvalidArgument, "cost bundle has no objectives");
  return per_objective.begin()->second.size();
}

FeasibleSet FeasibleSet::unconstrained(Eigen::Index k) { return FeasibleSet{Vec::Ones(k), {}}; }

bool FeasibleSet::is_forbidden(Eigen::Index k) const {
  return std::find(forbidden.begin(), forbidden.end(), k) != forbidden.end();
}

bool FeasibleSet::trivial() const { return forbidden.empty() && (prob_upper_bounds.array() >= 1.0).all(); }

void FeasibleSet::validate() const {
  const Eigen::Index k = prob_upper_bounds.size();
  require(k >= 1, Errc::InvalidArgument, "feasible set needs K >= 1");
  double cap_sum = 0.0;
  Eigen::Index allowed = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double c = prob_upper_bounds[i];
    if (!(c > 0.0 && c <= 1.0)) fail(Errc::InvalidArgument, "probability caps must lie in (0, 1]");
    if (is_forbidden(i)) continue;
    ++allowed;
    cap_sum += c;
  }
  for (Eigen::Index f : forbidden) {
    if (f < 0 || f >= k) fail(Errc::InvalidArgument, "forbidden index out of range");
  }
  if (allowed == 0) fail(Errc::NoFeasiblePoint, "every plan is forbidden");
  if (cap_sum < 1.0 - 1e-12) fail(Errc::NoFeasiblePoint, "caps of allowed plans sum below 1");
}

Vec FeasibleSet::residuals(const Vec& probs, double big_m) const {
  if (probs.size() != prob_upper_bounds.size()) fail(Errc::LengthMismatch, "probability length differs from K");
  Vec g = Vec::Zero(probs.size());
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    if (prob_upper_bounds[k] < 1.0) g[k] = probs[k] - prob_upper_bounds[k];
  }
  for (Eigen::Index f : forbidden) g[f] = big_m;
  return g;
}

Vec minmax_normalize(const Vec& v) {
  if (v.size() == 0) return v;
  const double lo = v.minCoeff();
  const double span = v.maxCoeff() - lo;
  if (!(span > 0.0)) return Vec::Zero(v.size());
  return ((v.array() - lo) / span).matrix();
}

Vec assemble_cost(const CostBundle& bundle) {
  const Eigen::Index k = bundle.plans();
  Vec h = Vec::Zero(k);
  bool any_positive = false;
  for (const auto& [q, w] : bundle.weights) {
    if (!std::isfinite(w) || w < 0.0) fail(Errc::InvalidWeights, "objective weights must be nonnegative");
    if (w > 0.0) any_positive = true;
  }
  if (!any_positive) fail(Errc::InvalidWeights, "at least one objective weight must be positive");
  for (const auto& [q, c] : bundle.per_objective) {
    if (c.size() != k) fail(Errc::LengthMismatch, "objective cost vectors differ in length");
    const auto it = bundle.weights.find(q);
    if (it == bundle.weights.end() || it->second == 0.0) continue;
    h += it->second * c;
  }
  if (bundle.residuals.size() != 0 && bundle.residuals.size() != k) {
    fail(Errc::LengthMismatch, "residual vector length differs from K");
  }
  return h;
}

Vec penalized_operator(const Vec& h, const Vec& residuals, double rho) {
  if (residuals.size() == 0 || rho == 0.0) return h;
  if (residuals.size() != h.size()) fail(Errc::LengthMismatch, "residual vector length differs from K");
  return h + rho * residuals.cwiseMax(0.0).cwiseAbs2();
}

double energy(const Amplitudes& psi, const Vec& op_diag) {
  if (op_diag.size() != psi.size()) fail(Errc::LengthMismatch, "operator size differs from K");
  return op_diag.dot(psi.values().cwiseAbs2());
}

Vec energy_gradient(const Amplitudes& psi, const Vec& op_diag) {
  if (op_diag.size() != psi.size()) fail(Errc::LengthMismatch, "operator size differs from K");
  return 2.0 * op_diag.cwiseProduct(psi.values());
}

namespace {

// Standard sort-based projection of (x - lo) onto the simplex of mass
// 1 - lo * n, done in place; `sorted` is scratch space.
void clip_project_in_place(Vec& x, double lo, std::vector<double>& sorted) {
  const Eigen::Index n = x.size();
  const double budget = 1.0 - lo * static_cast<double>(n);
  if (budget < -1e-15) fail(Errc::InfeasibleSimplex, "alpha_min * |Q| exceeds 1");
  for (double& v : x) v -= lo;
  sorted.assign(x.data(), x.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cum = 0.0, tau = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    cum += sorted[i];
    const double t = (cum - std::max(budget, 0.0)) / static_cast<double>(i + 1);
    if (sorted[i] - t > 0.0) tau = t;
  }
  for (double& v : x) v = lo + std::max(v - tau, 0.0);
}

}  // namespace

Vec project_clipped_simplex(const Vec& x, double lo) {
  Vec out = x;
  std::vector<double> scratch;
  clip_project_in_place(out, lo, scratch);
  return out;
}

namespace {

double tcheb_value(const Vec& alpha, const Vec& d) { return alpha.cwiseProduct(d).maxCoeff(); }

// Walks the uniform grid g/n on the standard simplex and maps it affinely onto
// the clipped simplex, so the alpha_min faces are part of the grid.
Scalarization grid_search(const Vec& d, double alpha_min, int n) {
  const Eigen::Index q = d.size();
  const double free = 1.0 - alpha_min * static_cast<double>(q);
  Scalarization best{std::numeric_limits<double>::infinity(), Vec()};
  Vec alpha(q);
  auto consider = [&](const Vec& a) {
    const double v = tcheb_value(a, d);
    if (v < best.value) best = Scalarization{v, a};
  };
  if (q == 2) {
    for (int i = 0; i <= n; ++i) {
      alpha[0] = alpha_min + free * static_cast<double>(i) / n;
      alpha[1] = alpha_min + free * static_cast<double>(n - i) / n;
      consider(alpha);
    }
  } else {
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; i + j <= n; ++j) {
        alpha[0] = alpha_min + free * static_cast<double>(i) / n;
        alpha[1] = alpha_min + free * static_cast<double>(j) / n;
        alpha[2] = alpha_min + free * static_cast<double>(n - i - j) / n;
        consider(alpha);
      }
    }
  }
  return best;
}

Scalarization subgradient(const Vec& d, double alpha_min, int iterations) {
  const Eigen::Index q = d.size();
  Vec alpha = Vec::Constant(q, 1.0 / static_cast<double>(q));
  Scalarization best{tcheb_value(alpha, d), alpha};
  const double scale = d.maxCoeff();
  if (!(scale > 0.0)) return best;
  std::vector<double> scratch;
  scratch.reserve(static_cast<std::size_t>(q));
  for (int t = 1; t <= iterations; ++t) {
    Eigen::Index top = 0;
    for (Eigen::Index i = 1; i < q; ++i) {
      if (alpha[i] * d[i] > alpha[top] * d[top]) top = i;
    }
    alpha[top] -= (d[top] / scale) / std::sqrt(static_cast<double>(t));
    clip_project_in_place(alpha, alpha_min, scratch);
    const double v = tcheb_value(alpha, d);
    if (v < best.value) {
      best.value = v;
      best.alpha = alpha;
    }
  }
  return best;
}

}  // namespace

Scalarization tchebycheff(const Vec& costs, const Vec& utopia, double alpha_min) {
  if (costs.size() != utopia.size()) fail(Errc::LengthMismatch, "costs and utopia differ in length");
  const Eigen::Index q = costs.size();
  require(q >= 1, Errc::InvalidArgument, "need at least one objective");
  if (!(alpha_min > 0.0)) fail(Errc::InvalidArgument, "alpha_min must be positive");
  if (alpha_min * static_cast<double>(q) > 1.0) fail(Errc::InfeasibleSimplex, "alpha_min * |Q| exceeds 1");
  const Vec d = costs - utopia;
  for (double v : d) {
    if (!std::isfinite(v)) fail(Errc::NonFinite, "non-finite objective deviation");
    if (v < -1e-12) fail(Errc::InvalidArgument, "costs must dominate the utopia point");
  }
  const Vec dev = d.cwiseMax(0.0);
  if (q == 1) return Scalarization{dev[0], Vec::Ones(1)};
  if (q == 2) return grid_search(dev, alpha_min, 10000);
  if (q == 3) return grid_search(dev, alpha_min, 200);
  return subgradient(dev, alpha_min, 200);
}

Scalarization tchebycheff(const std::map<Objective, double>& costs, const std::map<Objective, double>& utopia,
                          double alpha_min) {
  Vec c(static_cast<Eigen::Index>(costs.size()));
  Vec u(c.size());
  Eigen::Index i = 0;
  for (const auto& [q, v] : costs) {
    const auto it = utopia.find(q);
    c[i] = v;
    u[i] = it == utopia.end() ? 0.0 : it->second;
    ++i;
  }
  return tchebycheff(c, u, alpha_min);
}

Amplitudes project_feasible(const Amplitudes& psi, const FeasibleSet& fs) {
  const Eigen::Index k = psi.size();
  if (fs.prob_upper_bounds.size() != k) fail(Errc::LengthMismatch, "feasible set size differs from K");
  const Vec& v = psi.values();
  Vec p = v.cwiseAbs2();
  bool changed = false;
  std::vector<char> allowed(static_cast<std::size_t>(k), 1);
  for (Eigen::Index f : fs.forbidden) {
    allowed[static_cast<std::size_t>(f)] = 0;
    if (p[f] != 0.0) changed = true;
    p[f] = 0.0;
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    if (allowed[static_cast<std::size_t>(i)] && p[i] > fs.prob_upper_bounds[i] + 1e-12) changed = true;
  }
  if (!changed) return psi;
  if (!(p.sum() >= 1e-12)) fail(Errc::NoFeasiblePoint, "projection removed all probability mass");

  // Clip-and-renormalize until the capped set stops growing. Each pass either
  // terminates or pins at least one more coordinate to its cap.
  std::vector<char> capped(static_cast<std::size_t>(k), 0);
  for (int round = 0; round < 100; ++round) {
    double capped_mass = 0.0, free_mass = 0.0;
    Eigen::Index free_count = 0;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!allowed[static_cast<std::size_t>(i)]) continue;
      if (capped[static_cast<std::size_t>(i)]) {
        capped_mass += fs.prob_upper_bounds[i];
      } else {
        free_mass += p[i];
        ++free_count;
      }
    }
    const double remaining = 1.0 - capped_mass;
    if (free_count == 0) {
      if (remaining > 1e-12) fail(Errc::NoFeasiblePoint, "caps exhaust before unit mass is placed");
      break;
    }
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!allowed[static_cast<std::size_t>(i)] || capped[static_cast<std::size_t>(i)]) continue;
      p[i] = free_mass > 0.0 ? p[i] * remaining / free_mass : remaining / static_cast<double>(free_count);
    }
    bool grew = false;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!allowed[static_cast<std::size_t>(i)] || capped[static_cast<std::size_t>(i)]) continue;
      if (p[i] > fs.prob_upper_bounds[i]) {
        capped[static_cast<std::size_t>(i)] = 1;
        p[i] = fs.prob_upper_bounds[i];
        grew = true;
      }
    }
    if (!grew) break;
  }
  if (!(p.sum() > 0.0)) fail(Errc::NoFeasiblePoint, "projection removed all probability mass");
  Vec out(k);
  for (Eigen::Index i = 0; i < k; ++i) out[i] = (v[i] < 0.0 ? -1.0 : 1.0) * std::sqrt(p[i]);
  return Amplitudes::normalized(std::move(out));
}

}  // namespace qivnom
