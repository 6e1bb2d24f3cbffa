#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mossl {

// All randomness is derived from one run seed. Independent streams are keyed
// by a label (and optional counters) so that adding a consumer never shifts
// the draws of another.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ splitmix64(fnv1a(label)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(derive_seed(seed, label) ^ splitmix64(a + 0x632be59bd9b4e019ULL * (b + 1)));
}

using Rng = std::mt19937_64;

/// Uniform in [0, 1) with 53 random bits; independent of the standard library's distributions.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller on uniform01.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace mossl
