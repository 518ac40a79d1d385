#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace pit {

// Deterministic splitmix64 generator. All randomness in the library flows
// through this class so that identical seeds give bit-identical buffers
// regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, stddev) resampled until within two standard deviations.
  double truncated_normal(double stddev) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * stddev;
  }

  // Derive an independent stream from (a, b), e.g. (seed, epoch).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    Rng r(a ^ (b * 0xd6e8feb86659fd93ULL + 0x2545f4914f6cdd1dULL));
    r.next_u64();
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = rng.uniform_index(i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace pit
