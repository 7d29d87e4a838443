#pragma once

#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "kge/error.hpp"

namespace kge {

// Seeded 64-bit Mersenne twister with distribution helpers built from raw
// bits, so draws do not depend on the standard library's distribution
// implementations. State round-trips through a string for checkpoints.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform in (-pi, pi].
  double angle() { return std::numbers::pi - 2.0 * std::numbers::pi * uniform01(); }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw SamplingError("Rng::below called with n = 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  bool coin() { return (next() >> 63) != 0; }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw CorruptionError("malformed RNG state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace kge
