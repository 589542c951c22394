#pragma once

#include <cmath>
#include <limits>

#include "qivnom/qstate.hpp"

namespace qivnom::kernels::detail {

// Two-pass log-sum-exp of (pot[j] - d(row/col, j)) / eps over one line.
// Entries with pot = -inf (zero marginal mass) drop out.
template <class Line>
inline double lse_line(const Line& dline, const Vec& pot, double eps) {
  const Eigen::Index n = pot.size();
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) {
    const double a = (pot[j] - dline[j]) / eps;
    if (a > m) m = a;
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) s += std::exp((pot[j] - dline[j]) / eps - m);
  return m + std::log(s);
}

}  // namespace qivnom::kernels::detail
