#pragma once

// Reference implementations used only by tests. Written independently of the
// library and kept deliberately naive.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "qivnom/rng.hpp"

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline Vec random_vec(qivnom::Rng& rng, Eigen::Index n, double lo = -1.0, double hi = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

inline Mat random_mat(qivnom::Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

inline Vec random_simplex(qivnom::Rng& rng, Eigen::Index n, double floor = 0.05) {
  Vec v = random_vec(rng, n, floor, 1.0);
  return v / v.sum();
}

// Mutual information of Y.^2 / sum(Y.^2), by direct summation.
inline double mi(const Mat& y) {
  Mat p = y.array().square().matrix();
  p /= p.sum();
  double out = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (p(i, j) <= 1e-12) continue;
      out += p(i, j) * std::log(p(i, j) / (p.row(i).sum() * p.col(j).sum()));
    }
  }
  return out;
}

// Central difference of f at x.
inline Vec central_diff(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

inline double rel_err(const Vec& a, const Vec& b, double floor = 1e-8) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(floor, std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()));
}

// Brute force over a uniform simplex grid for min_alpha max_q alpha_q d_q with alpha_q >= lo.
inline double tcheb_brute(const Vec& d, double lo, int n) {
  double best = std::numeric_limits<double>::infinity();
  if (d.size() == 2) {
    for (int i = 0; i <= n; ++i) {
      const double a = static_cast<double>(i) / n;
      if (a < lo || 1 - a < lo) continue;
      best = std::min(best, std::max(a * d[0], (1 - a) * d[1]));
    }
  } else {
    for (int i = 0; i <= n; ++i)
      for (int j = 0; i + j <= n; ++j) {
        const double a = double(i) / n, b = double(j) / n, c = 1 - a - b;
        if (a < lo || b < lo || c < lo) continue;
        best = std::min(best, std::max({a * d[0], b * d[1], c * d[2]}));
      }
  }
  return best;
}

// Exact min-cost transport by enumerating basic feasible solutions (vertices) of
// the transportation polytope: choose F+K-1 cells, solve the equality system.
inline double lp_transport(const Mat& d, const Vec& mu, const Vec& nu) {
  const int nf = static_cast<int>(d.rows()), nk = static_cast<int>(d.cols());
  const int cells = nf * nk, basis = nf + nk - 1;
  std::vector<int> pick(basis);
  for (int i = 0; i < basis; ++i) pick[i] = i;
  double best = std::numeric_limits<double>::infinity();
  Mat a(nf + nk, basis);
  Vec rhs(nf + nk);
  rhs << mu, nu;
  while (true) {
    a.setZero();
    for (int c = 0; c < basis; ++c) {
      const int f = pick[c] / nk, k = pick[c] % nk;
      a(f, c) = 1.0;
      a(nf + k, c) = 1.0;
    }
    Eigen::FullPivHouseholderQR<Mat> qr(a);
    if (qr.rank() == basis) {
      const Vec x = qr.solve(rhs);
      if ((a * x - rhs).norm() < 1e-9 && x.minCoeff() > -1e-12) {
        double cost = 0.0;
        for (int c = 0; c < basis; ++c) cost += x[c] * d(pick[c] / nk, pick[c] % nk);
        best = std::min(best, cost);
      }
    }
    int i = basis - 1;
    while (i >= 0 && pick[i] == cells - basis + i) --i;
    if (i < 0) break;
    ++pick[i];
    for (int j = i + 1; j < basis; ++j) pick[j] = pick[j - 1] + 1;
  }
  return best;
}

// Iterative proportional fitting of an arbitrary positive matrix onto (mu, nu).
inline Mat ipf(Mat m, const Vec& mu, const Vec& nu, int rounds = 5000) {
  for (int r = 0; r < rounds; ++r) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) *= mu[i] / m.row(i).sum();
    for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) *= nu[j] / m.col(j).sum();
  }
  return m;
}

inline double entropic_objective(const Mat& p, const Mat& d, double eps) {
  double out = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = p.data()[i];
    out += v * d.data()[i] + (v > 0 ? eps * v * std::log(v) : 0.0);
  }
  return out;
}

// Minimizer of 0.5 (x - y)^2 + t |x| over a grid of spacing h around y.
inline double prox_grid(double y, double t, double h, double radius) {
  double best_x = 0.0, best = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(std::round(radius / h));
  for (int i = -n; i <= n; ++i) {
    const double x = i * h;
    const double v = 0.5 * (x - y) * (x - y) + t * std::abs(x);
    if (v < best) {
      best = v;
      best_x = x;
    }
  }
  return best_x;
}

}  // namespace oracle
