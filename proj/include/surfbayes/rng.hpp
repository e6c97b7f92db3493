#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace surfbayes {

// splitmix64 step; used both as a mixer for seed derivation and to seed
// the main engine.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Counter scheme for fanning one global seed out to independent stages:
// each (stream, index) pair gets its own stream of draws. Documented in the
// README so runs are reproducible from a single --seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(base ^ (0xA5A5A5A5A5A5A5A5ULL + stream));
  return splitmix64(s ^ (0xC3C3C3C3C3C3C3C3ULL + index));
}

// Deterministic RNG. mt19937_64 output is pinned by the standard and the
// normal/rademacher transforms below are hand-rolled, so streams are
// bit-identical across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

  std::uint64_t u64() { return eng_(); }

  // uniform on (0,1); never returns 0 or 1
  double uniform() {
    return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // standard normal via Box-Muller (no state caching: one draw = two uniforms)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double rademacher() { return (eng_() & 1ULL) ? 1.0 : -1.0; }

  // integer in [0, m)
  std::uint64_t below(std::uint64_t m) { return eng_() % m; }

  double exponential(double mean) { return -mean * std::log(uniform()); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace surfbayes
