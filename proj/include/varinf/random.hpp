#pragma once

#include <cstdint>
#include <random>

#include <Eigen/QR>

#include "varinf/autodiff.hpp"

namespace varinf {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent substream seed for `stream` under a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

inline Vector<double> standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector<double> z(n);
  for (Index i = 0; i < n; ++i) z[i] = normal(rng);
  return z;
}

inline Matrix<double> standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> z(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) z(r, c) = normal(rng);
  }
  return z;
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
inline Matrix<double> haar_orthogonal(Index k, Rng& rng) {
  const Matrix<double> g = standard_normal(k, k, rng);
  Eigen::HouseholderQR<Matrix<double>> qr(g);
  Matrix<double> q = qr.householderQ() * Matrix<double>::Identity(k, k);
  const Matrix<double> r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Index j = 0; j < k; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

inline double uniform(double lo, double hi, Rng& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace varinf
