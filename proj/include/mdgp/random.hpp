#ifndef MDGP_RANDOM_HPP
#define MDGP_RANDOM_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

#include "mdgp/linalg.hpp"

namespace mdgp {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tuple of keys.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = splitmix64(base);
  for (std::uint64_t k : keys) s = splitmix64(s ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return s;
}

using Rng = std::mt19937_64;

/// rows x cols standard normals from a fresh generator seeded with `seed`.
inline Mat standard_normals(std::uint64_t seed, Index rows, Index cols) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  return out;
}

}  // namespace mdgp

#endif  // MDGP_RANDOM_HPP
