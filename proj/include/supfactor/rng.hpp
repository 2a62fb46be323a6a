#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace supfactor {

// Stateless 64-bit mixer (splitmix64 finalizer). Used as a counter-based
// generator: the value for (seed, counter) does not depend on call order.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t counter_draw(std::uint64_t seed, std::uint64_t counter) noexcept {
  return mix64(mix64(seed) ^ counter);
}

// Uniform index in [0, n) for the given counter. The modulo bias is below
// 2^-40 for any n used here.
inline std::size_t counter_index(std::uint64_t seed, std::uint64_t counter, std::size_t n) {
  return static_cast<std::size_t>(counter_draw(seed, counter) % n);
}

using Rng = std::mt19937_64;

inline Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

}  // namespace supfactor
