#include "ospd/numerics.hpp"

#include <algorithm>

namespace ospd {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a) + " x " + shape_string(b));
  }
  // Rank-1 updates over blocks of rows: each row of b is streamed once per
  // block, and every output element accumulates over k in order, so a row's
  // result does not depend on how many rows share the call.
  constexpr Eigen::Index kBlock = 8;
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index r0 = 0; r0 < a.rows(); r0 += kBlock) {
    const Eigen::Index rn = std::min(kBlock, a.rows() - r0);
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const auto brow = b.row(k);
      for (Eigen::Index i = r0; i < r0 + rn; ++i) out.row(i) += a(i, k) * brow;
    }
  }
  return out;
}

Matrix seeded_matrix(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols, double scale) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = scale * (2.0 * rng.uniform() - 1.0);
  }
  return m;
}

Vector softmax(const Vector& logits) { return stable_softmax_stats(logits).weights; }

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

}  // namespace ospd
