#include "lse.hpp"
#include "qivnom/kernels.hpp"

namespace qivnom::kernels {

void lse_rows_serial(const Mat& d, const Vec& pot, double eps, Vec& out) {
  out.resize(d.rows());
  for (Eigen::Index f = 0; f < d.rows(); ++f) out[f] = detail::lse_line(d.row(f), pot, eps);
}

void lse_cols_serial(const Mat& d, const Vec& pot, double eps, Vec& out) {
  out.resize(d.cols());
  for (Eigen::Index k = 0; k < d.cols(); ++k) out[k] = detail::lse_line(d.col(k), pot, eps);
}

}  // namespace qivnom::kernels
