#include "lse.hpp"
#include "qivnom/kernels.hpp"

namespace qivnom::kernels {

void lse_rows_omp(const Mat& d, const Vec& pot, double eps, Vec& out) {
  out.resize(d.rows());
  const Eigen::Index rows = d.rows();
#pragma omp parallel for schedule(static)
  for (Eigen::Index f = 0; f < rows; ++f) out[f] = detail::lse_line(d.row(f), pot, eps);
}

void lse_cols_omp(const Mat& d, const Vec& pot, double eps, Vec& out) {
  out.resize(d.cols());
  const Eigen::Index cols = d.cols();
#pragma omp parallel for schedule(static)
  for (Eigen::Index k = 0; k < cols; ++k) out[k] = detail::lse_line(d.col(k), pot, eps);
}

}  // namespace qivnom::kernels
