#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace balancelab {

// std::*_distribution output is implementation-defined, so the variates are
// derived here from the raw mt19937_64 stream, whose sequence the standard fixes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t index(std::uint64_t n);

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Derives an independent stream seed from a base seed and a list of tags.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

}  // namespace balancelab
