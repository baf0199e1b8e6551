#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ssda {

/// Deterministic random stream. The engine (mt19937_64) and every transform
/// here are fully specified, so identical seeds reproduce identical values on
/// any platform. Never use std:: distributions directly; they are not
/// portable across standard-library implementations.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double stddev = 1.0);

  /// Uniform integer in [0, n).
  int randint(int n);

 private:
  std::mt19937_64 engine_;
};

/// Derives a child seed from a root seed, a stream tag, and an index. All
/// randomness in a run flows from one root through this function.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index);

}  // namespace ssda
