#include "ssda/rng.hpp"

#include <cmath>

namespace ssda {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

double RandomStream::normal(double mean, double stddev) {
  // Box-Muller, no caching: two uniforms per draw keeps the stream layout
  // independent of call history.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double radius = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * radius * std::cos(kTwoPi * u2);
}

int RandomStream::randint(int n) {
  if (n <= 0) return 0;
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = (~0ULL / un) * un;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<int>(x % un);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return splitmix64(splitmix64(root ^ h) ^ index);
}

}  // namespace ssda
