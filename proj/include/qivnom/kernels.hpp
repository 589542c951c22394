#pragma once

#include "qivnom/qstate.hpp"

// Log-sum-exp sweeps used by the Sinkhorn solver. The OpenMP and serial
// versions perform identical arithmetic per output entry, so they agree bitwise.
namespace qivnom::kernels {

enum class Backend { Serial, OpenMP };

// out[f] = log sum_k exp((pot[k] - d(f, k)) / eps)
void lse_rows_serial(const Mat& d, const Vec& pot, double eps, Vec& out);
void lse_rows_omp(const Mat& d, const Vec& pot, double eps, Vec& out);

// out[k] = log sum_f exp((pot[f] - d(f, k)) / eps)
void lse_cols_serial(const Mat& d, const Vec& pot, double eps, Vec& out);
void lse_cols_omp(const Mat& d, const Vec& pot, double eps, Vec& out);

inline void lse_rows(Backend b, const Mat& d, const Vec& pot, double eps, Vec& out) {
  b == Backend::OpenMP ? lse_rows_omp(d, pot, eps, out) : lse_rows_serial(d, pot, eps, out);
}
inline void lse_cols(Backend b, const Mat& d, const Vec& pot, double eps, Vec& out) {
  b == Backend::OpenMP ? lse_cols_omp(d, pot, eps, out) : lse_cols_serial(d, pot, eps, out);
}

}  // namespace qivnom::kernels
