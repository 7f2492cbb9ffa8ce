#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "ospd/errors.hpp"

namespace ospd {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// SplitMix64, used to expand a single seed into generator state.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// xoshiro256** (Blackman & Vigna), seeded via SplitMix64.
///
/// Every stochastic component of the library draws from this generator so a
/// seed reproduces identical streams on every platform. The helpers below do
/// their own reductions rather than relying on <random> distributions, whose
/// output is implementation-defined.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& word : s_) word = sm.next();
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound) by rejection; bound must be positive.
  std::uint64_t index(std::uint64_t bound) {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % bound;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

/// Softmax of one score vector kept in shifted form: weights = exp(s - m) / gamma.
template <typename Scalar>
struct SoftmaxStats {
  VectorX<Scalar> weights;
  Scalar gamma{0};
  Scalar m{-std::numeric_limits<Scalar>::infinity()};
};

template <typename Derived>
SoftmaxStats<typename Derived::Scalar> stable_softmax_stats(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  if (scores.size() == 0) throw EmptyPartitionError("softmax over an empty score vector");
  SoftmaxStats<Scalar> stats;
  stats.m = scores.maxCoeff();
  stats.weights = (scores.derived().array() - stats.m).exp().matrix();
  stats.gamma = stats.weights.sum();
  stats.weights /= stats.gamma;
  return stats;
}

/// Dense product with shape checking.
Matrix matmul(const Matrix& a, const Matrix& b);

/// rows x cols matrix with entries scale * (2u - 1), u drawn from Rng(seed).
/// Entries are generated in row-major order.
Matrix seeded_matrix(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols, double scale);

/// Probabilities from logits, max-shifted.
Vector softmax(const Vector& logits);

bool all_finite(const Matrix& m);

std::string shape_string(const Matrix& m);

}  // namespace ospd
