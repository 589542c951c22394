#include "qivnom/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "qivnom/error.hpp"

namespace qivnom {

namespace {

void check_marginal(const Vec& m, const char* what) {
  if (m.size() == 0) fail(Errc::InvalidMarginals, std::string(what) + " is empty");
  for (double v : m) {
    if (!std::isfinite(v) || v < 0.0) fail(Errc::InvalidMarginals, std::string(what) + " has a negative entry");
  }
  if (std::abs(m.sum() - 1.0) > 1e-9) fail(Errc::InvalidMarginals, std::string(what) + " does not sum to 1");
}

Vec log_of(const Vec& m) {
  Vec out(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    out[i] = m[i] > 0.0 ? std::log(m[i]) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace

void TransportProblem::validate() const {
  if (cost.rows() != mu.size() || cost.cols() != nu.size()) {
    fail(Errc::DimMismatch, "cost must be F x K with |mu| = F and |nu| = K");
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail(Errc::InvalidArgument, "epsilon must be positive");
  if (!cost.allFinite()) fail(Errc::NonFinite, "transport cost has non-finite entries");
  check_marginal(mu, "mu");
  check_marginal(nu, "nu");
}

TransportProblem TransportProblem::transposed() const { return TransportProblem{cost.transpose(), nu, mu, epsilon}; }

double marginal_error(const Mat& coupling, const Vec& mu, const Vec& nu) {
  const double row = (coupling.rowwise().sum() - mu).cwiseAbs().sum();
  const double col = (coupling.colwise().sum().transpose() - nu).cwiseAbs().sum();
  return std::max(row, col);
}

TransportPlan sinkhorn_row_first(const TransportProblem& problem, const SinkhornOptions& opts) {
  problem.validate();
  const Mat& d = problem.cost;
  const double eps = problem.epsilon;
  const Eigen::Index nf = d.rows(), nk = d.cols();
  const Vec log_mu = log_of(problem.mu);
  const Vec log_nu = log_of(problem.nu);
  const bool warm = opts.warm_f.size() == nf && opts.warm_g.size() == nk;
  Vec f = Vec::Zero(nf), g = Vec::Zero(nk), lse_f(nf), lse_g(nk);
  if (warm) {
    f = opts.warm_f.unaryExpr([](double x) { return std::isfinite(x) ? x : 0.0; });
    g = opts.warm_g.unaryExpr([](double x) { return std::isfinite(x) ? x : 0.0; });
  }
  for (Eigen::Index k = 0; k < nk; ++k) {
    if (problem.nu[k] == 0.0) g[k] = -std::numeric_limits<double>::infinity();
  }
  auto coupling = [&] {
    Mat p(nf, nk);
    for (Eigen::Index k = 0; k < nk; ++k) {
      for (Eigen::Index fi = 0; fi < nf; ++fi) {
        const double a = f[fi] + g[k] - d(fi, k);
        p(fi, k) = std::isfinite(a) ? std::exp(a / eps) : 0.0;
      }
    }
    return p;
  };
  // Epsilon scaling: warm-start the potentials on a geometric ladder of
  // larger regularizers before iterating at the target epsilon.
  std::vector<double> ladder;
  const double spread = d.size() > 0 ? d.maxCoeff() - d.minCoeff() : 0.0;
  if (!warm) {
    for (double e = spread; e > 2.0 * eps; e *= 0.5) ladder.push_back(e);
  }
  ladder.push_back(eps);
  // Within a stage the iterations run on scalings (u, v) of the kernel
  // exp((f + g - D) / e), so each sweep is a matrix-vector product. The
  // scalings are folded back into (f, g) whenever they leave a safe range;
  // a sweep that underflows is redone in the log domain.
  Mat kt(nf, nk);
  Vec u(nf), v(nk), rs(nf), cs(nk);
  double e = ladder.front();
  auto rebuild = [&] {
    for (Eigen::Index k = 0; k < nk; ++k) {
      for (Eigen::Index fi = 0; fi < nf; ++fi) {
        const double a = f[fi] + g[k] - d(fi, k);
        kt(fi, k) = std::isfinite(a) ? std::exp(a / e) : 0.0;
      }
    }
    u.setOnes();
    v.setOnes();
    rs.noalias() = kt * v;
  };
  auto fold = [&] {
    for (Eigen::Index i = 0; i < nf; ++i) f[i] = problem.mu[i] > 0.0 ? f[i] + e * std::log(u[i]) : log_mu[i];
    for (Eigen::Index k = 0; k < nk; ++k) g[k] = problem.nu[k] > 0.0 ? g[k] + e * std::log(v[k]) : log_nu[k];
  };
  auto log_sweep = [&] {
    kernels::lse_rows(opts.backend, d, g, e, lse_f);
    for (Eigen::Index i = 0; i < nf; ++i) f[i] = problem.mu[i] > 0.0 ? e * (log_mu[i] - lse_f[i]) : log_mu[i];
    kernels::lse_cols(opts.backend, d, f, e, lse_g);
    for (Eigen::Index k = 0; k < nk; ++k) g[k] = problem.nu[k] > 0.0 ? e * (log_nu[k] - lse_g[k]) : log_nu[k];
    // Columns are exact after the g sweep; only the row deviation remains.
    kernels::lse_rows(opts.backend, d, g, e, lse_f);
    double r = 0.0;
    for (Eigen::Index i = 0; i < nf; ++i) {
      const double mass = problem.mu[i] > 0.0 ? std::exp(f[i] / e + lse_f[i]) : 0.0;
      r += std::abs(mass - problem.mu[i]);
    }
    return r;
  };
  constexpr double kSafe = 1e30;
  auto in_range = [&](double x) { return x == 0.0 || (x > 1.0 / kSafe && x < kSafe); };

  double err = std::numeric_limits<double>::infinity();
  int it = 0;
  for (std::size_t stage = 0; stage < ladder.size(); ++stage) {
    e = ladder[stage];
    const bool last = stage + 1 == ladder.size();
    const double stage_tol = last ? opts.tol : std::max(opts.tol, 1e-3);
    int stage_it = 0;
    rebuild();
    while (it < opts.max_iters && (last || stage_it < 200)) {
      ++it;
      ++stage_it;
      bool ok = true;
      for (Eigen::Index i = 0; i < nf; ++i) {
        u[i] = problem.mu[i] > 0.0 ? problem.mu[i] / rs[i] : 0.0;
        ok = ok && std::isfinite(u[i]);
      }
      if (ok) {
        cs.noalias() = kt.transpose() * u;
        for (Eigen::Index k = 0; k < nk; ++k) {
          v[k] = problem.nu[k] > 0.0 ? problem.nu[k] / cs[k] : 0.0;
          ok = ok && std::isfinite(v[k]);
        }
      }
      if (ok) {
        rs.noalias() = kt * v;
        err = 0.0;
        for (Eigen::Index i = 0; i < nf; ++i) err += std::abs(u[i] * rs[i] - problem.mu[i]);
        const bool safe = u.unaryExpr(in_range).all() && v.unaryExpr(in_range).all();
        if (!safe) {
          fold();
          rebuild();
        }
      } else {
        err = log_sweep();
        rebuild();
      }
      if (!std::isfinite(err)) fail(Errc::Diverged, "sinkhorn potentials diverged");
      if (err <= stage_tol) break;
    }
    fold();
  }
  TransportPlan plan{coupling(), it, 0.0, f, g};
  plan.marginal_error = marginal_error(plan.coupling, problem.mu, problem.nu);
  if (!(plan.marginal_error <= opts.tol)) throw NotConverged(it, plan.marginal_error);
  return plan;
}

TransportPlan sinkhorn(const TransportProblem& problem, const SinkhornOptions& opts) {
  TransportPlan a = sinkhorn_row_first(problem, opts);
  SinkhornOptions topts = opts;
  std::swap(topts.warm_f, topts.warm_g);
  TransportPlan b = sinkhorn_row_first(problem.transposed(), topts);
  TransportPlan out;
  out.f = std::move(a.f);
  out.g = std::move(a.g);
  out.coupling = 0.5 * (a.coupling + b.coupling.transpose());
  out.iterations = std::max(a.iterations, b.iterations);
  out.marginal_error = marginal_error(out.coupling, problem.mu, problem.nu);
  return out;
}

TransportPlan sinkhorn(const TransportProblem& problem, int max_iters, double tol) {
  SinkhornOptions opts;
  opts.max_iters = max_iters;
  opts.tol = tol;
  return sinkhorn(problem, opts);
}

double transport_objective(const TransportPlan& plan, const TransportProblem& problem) {
  const Mat& p = plan.coupling;
  if (p.rows() != problem.cost.rows() || p.cols() != problem.cost.cols()) {
    fail(Errc::DimMismatch, "coupling and cost differ in shape");
  }
  double linear = 0.0, neg_entropy = 0.0;
  for (Eigen::Index k = 0; k < p.cols(); ++k) {
    for (Eigen::Index f = 0; f < p.rows(); ++f) {
      const double v = p(f, k);
      linear += v * problem.cost(f, k);
      if (v > 0.0) neg_entropy += v * std::log(v);
    }
  }
  return linear + problem.epsilon * neg_entropy;
}

TransportPlan assign_greedy(const TransportProblem& problem) {
  problem.validate();
  const Mat& d = problem.cost;
  const Eigen::Index nf = d.rows(), nk = d.cols();
  std::vector<std::pair<Eigen::Index, Eigen::Index>> cells;
  cells.reserve(static_cast<std::size_t>(nf * nk));
  for (Eigen::Index f = 0; f < nf; ++f) {
    for (Eigen::Index k = 0; k < nk; ++k) cells.emplace_back(f, k);
  }
  std::stable_sort(cells.begin(), cells.end(),
                   [&](const auto& a, const auto& b) { return d(a.first, a.second) < d(b.first, b.second); });
  Vec row_left = problem.mu, col_left = problem.nu;
  TransportPlan plan{Mat::Zero(nf, nk), 0, 0.0};
  for (const auto& [f, k] : cells) {
    const double m = std::min(row_left[f], col_left[k]);
    if (m <= 0.0) continue;
    plan.coupling(f, k) += m;
    row_left[f] -= m;
    col_left[k] -= m;
    ++plan.iterations;
  }
  plan.marginal_error = marginal_error(plan.coupling, problem.mu, problem.nu);
  return plan;
}

}  // namespace qivnom
