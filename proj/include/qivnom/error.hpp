#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qivnom {

enum class Errc {
  ZeroVector,
  NonFinite,
  LengthMismatch,
  DimMismatch,
  InfeasibleSimplex,
  NoFeasiblePoint,
  InvalidMarginals,
  NotConverged,
  Diverged,
  SingularCovariance,
  SingularSystem,
  InvalidCodingGain,
  InvalidWeights,
  EmptyPathSet,
  EmptyCandidates,
  Overload,
  TooFewSamples,
  InvalidArgument,
  ConfigError,
  UnknownScenario,
};

std::string_view errc_name(Errc code) noexcept;

// Base of every error thrown by the library. The code drives CLI exit-status
// mapping; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), message_(what) {}

  Errc code() const noexcept { return code_; }
  // The text without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

class NotConverged : public Error {
 public:
  NotConverged(int iterations, double marginal_error);

  int iterations() const noexcept { return iterations_; }
  double marginal_error() const noexcept { return marginal_error_; }

 private:
  int iterations_;
  double marginal_error_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, Errc code, const char* what) {
  if (!ok) fail(code, what);
}

}  // namespace qivnom
