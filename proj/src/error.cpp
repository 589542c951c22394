#include "qivnom/error.hpp"

namespace qivnom {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ZeroVector: return "ZeroVector";
    case Errc::NonFinite: return "NonFinite";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::InfeasibleSimplex: return "InfeasibleSimplex";
    case Errc::NoFeasiblePoint: return "NoFeasiblePoint";
    case Errc::InvalidMarginals: return "InvalidMarginals";
    case Errc::NotConverged: return "NotConverged";
    case Errc::Diverged: return "Diverged";
    case Errc::SingularCovariance: return "SingularCovariance";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::InvalidCodingGain: return "InvalidCodingGain";
    case Errc::InvalidWeights: return "InvalidWeights";
    case Errc::EmptyPathSet: return "EmptyPathSet";
    case Errc::EmptyCandidates: return "EmptyCandidates";
    case Errc::Overload: return "Overload";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ConfigError: return "ConfigError";
    case Errc::UnknownScenario: return "UnknownScenario";
  }
  return "Unknown";
}

NotConverged::NotConverged(int iterations, double marginal_error)
    : Error(Errc::NotConverged, "tolerance unmet after " + std::to_string(iterations) +
                                    " iterations (marginal error " + std::to_string(marginal_error) + ")"),
      iterations_(iterations),
      marginal_error_(marginal_error) {}

}  // namespace qivnom
