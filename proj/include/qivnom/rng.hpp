#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace qivnom {

// Counter-based generator: draw n of stream (seed, key) is a pure function of
// (seed, key, n), so results are identical on every platform and substreams
// can be forked without sharing state. Mixing is SplitMix64.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed, std::uint64_t key = 0) noexcept
      : base_(mix(seed ^ (0x6a09e667f3bcc909ULL + mix(key)))) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Independent child stream keyed by up to three integers.
  constexpr Rng fork(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const noexcept {
    Rng child(0);
    child.base_ = mix(base_ ^ mix(a + 0x243f6a8885a308d3ULL * (b + 1) + 0x13198a2e03707344ULL * (c + 7)));
    return child;
  }

  constexpr std::uint64_t next_u64() noexcept { return mix(base_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; both uniforms come from this stream.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return n == 0 ? 0 : static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  std::uint64_t draws() const noexcept { return counter_; }

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

}  // namespace qivnom
