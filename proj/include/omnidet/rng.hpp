#pragma once

// Deterministic RNG utilities. mt19937_64 is specified bit-exactly by the
// standard; the distributions here are hand-rolled so streams are identical
// across standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace omnidet::rng {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable per-item seed derivation from a master seed and an index.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t s = master ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  splitmix64(s);
  return splitmix64(s);
}

inline double uniform(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform(eng);
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t below(Engine& eng, std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = eng();
  } while (v >= limit);
  return v % n;
}

inline double normal(Engine& eng, double mean = 0.0, double stddev = 1.0) {
  // Box-Muller; one draw per call keeps the stream position predictable.
  double u1 = uniform(eng);
  if (u1 < 1e-300) u1 = 1e-300;
  const double u2 = uniform(eng);
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(6.283185307179586 * u2);
}

// Knuth's product-of-uniforms method; fine for small means.
inline int poisson(Engine& eng, double mean) {
  if (mean <= 0.0) return 0;
  const double limit = std::exp(-mean);
  int k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= uniform(eng);
  } while (p > limit);
  return k - 1;
}

template <typename T>
void shuffle(Engine& eng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(below(eng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace omnidet::rng
