#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace lmlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Deterministic RNG. The engine is std::mt19937_64, whose output sequence
// the standard pins down bit-for-bit; the distributions are hand-rolled
// because std::*_distribution output is implementation-defined. All
// randomness in the lab flows through this class, seeded from configs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  // Independent stream for (seed, index) pairs, e.g. one per prefix, so
  // batched work is reproducible regardless of scheduling.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix64(seed) + 0x632BE59BD9B4E019ull * (index + 1));
  }

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (cos branch only; keeps state trivial).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t reject = (0 - n) % n;  // 2^64 mod n
    std::uint64_t x = eng_();
    while (x < reject) x = eng_();
    return x % n;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace lmlab
