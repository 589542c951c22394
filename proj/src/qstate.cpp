#include "qivnom/qstate.hpp"

#include <cmath>

#include "qivnom/error.hpp"

namespace qivnom {

namespace {

constexpr double kZeroNorm = 1e-12;
constexpr double kMassFloor = 1e-12;

}  // namespace

Amplitudes Amplitudes::normalized(Vec v) {
  require(v.size() >= 1, Errc::InvalidArgument, "amplitude vector must be nonempty");
  const double n = v.norm();
  if (!std::isfinite(n)) fail(Errc::NonFinite, "amplitude norm is not finite");
  if (n < kZeroNorm) fail(Errc::ZeroVector, "amplitude vector has (near) zero norm");
  v /= n;
  return Amplitudes(std::move(v));
}

Amplitudes Amplitudes::uniform(Eigen::Index k) {
  require(k >= 1, Errc::InvalidArgument, "K must be >= 1");
  return Amplitudes(Vec::Constant(k, 1.0 / std::sqrt(static_cast<double>(k))));
}

Amplitudes Amplitudes::basis(Eigen::Index k, Eigen::Index index) {
  require(k >= 1 && index >= 0 && index < k, Errc::InvalidArgument, "basis index out of range");
  Vec v = Vec::Zero(k);
  v[index] = 1.0;
  return Amplitudes(std::move(v));
}

PlanDistribution PlanDistribution::from_weights(Vec weights) {
  require(weights.size() >= 1, Errc::InvalidArgument, "distribution must be nonempty");
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) fail(Errc::InvalidArgument, "weights must be finite and nonnegative");
  }
  const double s = weights.sum();
  if (s <= 0.0) fail(Errc::ZeroVector, "weights sum to zero");
  weights /= s;
  return PlanDistribution(std::move(weights));
}

PlanDistribution PlanDistribution::uniform(Eigen::Index k) {
  require(k >= 1, Errc::InvalidArgument, "K must be >= 1");
  return PlanDistribution(Vec::Constant(k, 1.0 / static_cast<double>(k)));
}

PlanDistribution PlanDistribution::one_hot(Eigen::Index k, Eigen::Index index) {
  require(k >= 1 && index >= 0 && index < k, Errc::InvalidArgument, "index out of range");
  Vec p = Vec::Zero(k);
  p[index] = 1.0;
  return PlanDistribution(std::move(p));
}

double activate(Activation kind, double x) noexcept {
  switch (kind) {
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::Tanh: return std::tanh(x);
  }
  return x;
}

Amplitudes init_superposition(const Vec& features, const Mat& weight, const Vec& bias, Activation activation) {
  if (weight.cols() != features.size() || weight.rows() != bias.size()) {
    fail(Errc::DimMismatch, "weight must be K x dim(features) and bias length K");
  }
  Vec pre = weight * features + bias;
  for (double& x : pre) x = activate(activation, x);
  return Amplitudes::normalized(std::move(pre));
}

PlanDistribution probabilities(const Amplitudes& psi) {
  return PlanDistribution::from_weights(psi.values().array().square().matrix());
}

JointAmplitude joint_encode(const Amplitudes& psi_c, const Amplitudes& psi_m) {
  return JointAmplitude{psi_c.values() * psi_m.values().transpose()};
}

std::pair<PlanDistribution, PlanDistribution> marginals(const JointAmplitude& joint) {
  const Mat p = joint.values.array().square().matrix();
  return {PlanDistribution::from_weights(p.rowwise().sum()), PlanDistribution::from_weights(p.colwise().sum().transpose())};
}

double mutual_information(const JointAmplitude& joint) {
  Mat p = joint.values.array().square().matrix();
  const double total = p.sum();
  if (!(total > 0.0)) return 0.0;
  p /= total;
  const Vec row = p.rowwise().sum();
  const Vec col = p.colwise().sum().transpose();
  double mi = 0.0;
  for (Eigen::Index k = 0; k < p.rows(); ++k) {
    for (Eigen::Index l = 0; l < p.cols(); ++l) {
      const double m = p(k, l);
      if (m < kMassFloor) continue;
      mi += m * std::log(m / (row[k] * col[l]));
    }
  }
  return mi;
}

// With q = Y^2, S = sum q, p = q / S:
//   dI/dq_ab = (log(p_ab / (r_a c_b)) - I) / S,   dI/dY_ab = 2 Y_ab dI/dq_ab.
// Entries below the mass floor contribute zero (0 log 0 := 0).
Mat mi_joint_gradient(const JointAmplitude& joint) {
  const Mat& y = joint.values;
  Mat p = y.array().square().matrix();
  const double total = p.sum();
  Mat grad = Mat::Zero(y.rows(), y.cols());
  if (!(total > 0.0)) return grad;
  p /= total;
  const Vec row = p.rowwise().sum();
  const Vec col = p.colwise().sum().transpose();
  double mi = 0.0;
  for (Eigen::Index k = 0; k < p.rows(); ++k) {
    for (Eigen::Index l = 0; l < p.cols(); ++l) {
      if (p(k, l) >= kMassFloor) mi += p(k, l) * std::log(p(k, l) / (row[k] * col[l]));
    }
  }
  for (Eigen::Index k = 0; k < p.rows(); ++k) {
    for (Eigen::Index l = 0; l < p.cols(); ++l) {
      if (p(k, l) < kMassFloor) continue;
      const double g = 2.0 * y(k, l) * (std::log(p(k, l) / (row[k] * col[l])) - mi) / total;
      if (!std::isfinite(g)) fail(Errc::NonFinite, "coupling gradient diverged");
      grad(k, l) = g;
    }
  }
  return grad;
}

CouplingGradients mi_gradients(const Vec& psi_c, const Vec& psi_m, const Mat& residual) {
  if (residual.rows() != psi_c.size() || residual.cols() != psi_m.size()) {
    fail(Errc::DimMismatch, "residual must be K x L");
  }
  const JointAmplitude joint{psi_c * psi_m.transpose() + residual};
  const Mat g = mi_joint_gradient(joint);
  return CouplingGradients{g * psi_m, g.transpose() * psi_c};
}

Amplitudes entangle_neighbors(const Amplitudes& self, std::span<const Amplitudes> neighbors,
                              std::span<const double> couplings) {
  if (neighbors.size() != couplings.size()) fail(Errc::LengthMismatch, "one coupling per neighbor");
  if (neighbors.empty()) return self;
  Vec out = self.values();
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    if (neighbors[j].size() != self.size()) fail(Errc::LengthMismatch, "neighbor amplitudes differ in length");
    if (couplings[j] == 0.0) continue;
    out.array() *= 1.0 + couplings[j] * neighbors[j].values().array();
  }
  return Amplitudes::normalized(std::move(out));
}

Eigen::Index argmax_lowest(const Vec& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Eigen::Index argmin_lowest(const Vec& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

Collapsed collapse(const Amplitudes& psi) {
  const Eigen::Index k = argmax_lowest(psi.values());
  return Collapsed{Amplitudes::basis(psi.size(), k), k};
}

}  // namespace qivnom
