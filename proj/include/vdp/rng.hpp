#pragma once

// Deterministic random number helpers. Everything downstream of a seed is
// reproducible bit-for-bit across platforms: mt19937_64 has a standardized
// output sequence and the mappings below avoid the implementation-defined
// std::*_distribution classes.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace vdp {

using Rng = std::mt19937_64;

// splitmix64; used to derive independent stream seeds from one master seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
  return mix_seed(master ^ mix_seed(salt));
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform_double(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform double in (0, 1]; safe as a log argument.
inline double uniform_double_pos(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
}

// Standard normal via Box-Muller (cosine branch only, so one call consumes
// exactly two rng draws regardless of history).
inline double normal(Rng& rng) {
  const double u1 = uniform_double_pos(rng);
  const double u2 = uniform_double(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

inline void fill_normal(Rng& rng, std::vector<double>& out) {
  for (double& v : out) v = normal(rng);
}

inline std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  fill_normal(rng, out);
  return out;
}

// Uniform integer in [0, n). The modulo bias is ~n/2^64, irrelevant here.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return rng() % n;
}

// Fisher-Yates with an explicit draw mapping (std::shuffle is
// implementation-defined and would break cross-platform reproducibility).
template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace vdp
