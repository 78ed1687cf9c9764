#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

// Portable draws on top of std::mt19937_64. The engine's output sequence is
// fixed by the standard, but the std distributions are not, so everything
// that must reproduce across toolchains goes through these helpers.
namespace fss::rnd {

using Engine = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Engine& e) { return static_cast<double>(e() >> 11) * 0x1.0p-53; }

inline double uniform(Engine& e, double lo, double hi) { return lo + (hi - lo) * uniform01(e); }

// Uniform integer in [0, n), unbiased by rejection. n must be positive.
inline std::uint64_t below(Engine& e, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = e();
  } while (x >= limit);
  return x % n;
}

// Standard normal by Box-Muller; one draw per call keeps the state simple.
inline double normal(Engine& e) {
  const double u1 = 1.0 - uniform01(e);  // (0, 1]
  const double u2 = uniform01(e);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Independent stream for a (seed, purpose) pair, so adding draws for one
// purpose never shifts another.
inline Engine derive(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(purpose >> 32)};
  return Engine(seq);
}

}  // namespace fss::rnd
