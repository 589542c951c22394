#pragma once

#include <span>
#include <utility>

#include <Eigen/Dense>

namespace qivnom {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Real superposition over K candidate plans; always unit L2 norm.
class Amplitudes {
 public:
  // Scales v to unit norm. Throws ZeroVector when ||v|| < 1e-12.
  static Amplitudes normalized(Vec v);
  static Amplitudes uniform(Eigen::Index k);
  static Amplitudes basis(Eigen::Index k, Eigen::Index index);

  const Vec& values() const noexcept { return v_; }
  Eigen::Index size() const noexcept { return v_.size(); }
  double operator[](Eigen::Index i) const { return v_[i]; }

 private:
  explicit Amplitudes(Vec v) : v_(std::move(v)) {}
  Vec v_;
};

// Probability vector; entries >= 0 summing to 1.
class PlanDistribution {
 public:
  // Normalizes nonnegative weights. Throws ZeroVector for an all-zero input
  // and InvalidArgument for negative or non-finite entries.
  static PlanDistribution from_weights(Vec weights);
  static PlanDistribution uniform(Eigen::Index k);
  static PlanDistribution one_hot(Eigen::Index k, Eigen::Index index);

  const Vec& probs() const noexcept { return p_; }
  Eigen::Index size() const noexcept { return p_.size(); }
  double operator[](Eigen::Index i) const { return p_[i]; }

 private:
  explicit PlanDistribution(Vec p) : p_(std::move(p)) {}
  Vec p_;
};

// Free K x L amplitude matrix coupling communication and mobility plans.
struct JointAmplitude {
  Mat values;
};

enum class Activation { Sigmoid, Tanh };

double activate(Activation kind, double x) noexcept;

Amplitudes init_superposition(const Vec& features, const Mat& weight, const Vec& bias, Activation activation);

PlanDistribution probabilities(const Amplitudes& psi);

JointAmplitude joint_encode(const Amplitudes& psi_c, const Amplitudes& psi_m);

std::pair<PlanDistribution, PlanDistribution> marginals(const JointAmplitude& joint);

// Mutual information (nats) of the squared joint, renormalized to unit mass.
double mutual_information(const JointAmplitude& joint);

// dI/dUpsilon for the free joint matrix.
Mat mi_joint_gradient(const JointAmplitude& joint);

struct CouplingGradients {
  Vec comm;      // dI/dpsi_c
  Vec mobility;  // dI/dpsi_m
};

// Gradients through Upsilon = psi_c psi_m^T + residual.
CouplingGradients mi_gradients(const Vec& psi_c, const Vec& psi_m, const Mat& residual);

Amplitudes entangle_neighbors(const Amplitudes& self, std::span<const Amplitudes> neighbors,
                              std::span<const double> couplings);

// Lowest index among maximal entries.
Eigen::Index argmax_lowest(const Vec& v);
Eigen::Index argmin_lowest(const Vec& v);

struct Collapsed {
  Amplitudes state;
  Eigen::Index index;
};

Collapsed collapse(const Amplitudes& psi);

inline bool should_collapse(double cost_now, double cost_prev, double threshold) noexcept {
  return cost_now - cost_prev >= threshold;
}

}  // namespace qivnom
