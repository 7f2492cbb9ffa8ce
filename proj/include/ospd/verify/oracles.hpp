#pragma once

// Reference implementations that share no code path with the library
// kernels: plain loops, long double, brute-force enumeration.

#include <cstdint>
#include <vector>

#include "ospd/langmodel.hpp"

namespace ospd::oracle {

using LMatrix = std::vector<std::vector<long double>>;

/// softmax(K q) V for one query in long double, max-shifted.
std::vector<long double> attention(const std::vector<long double>& q, const LMatrix& keys, const LMatrix& values);

/// sum_k a[i][k] b[k][j], k ascending, in double.
std::vector<std::vector<double>> triple_loop(const std::vector<std::vector<double>>& a,
                                             const std::vector<std::vector<double>>& b);

/// Every length-n sequence over the vocabulary whose t-th token log-probability
/// (given context and the sequence so far) falls in the same width eps/n bin as
/// the authentic token's, for every t. Ranked authentic first, then by
/// |ln LM(seq) - ln LM(authentic)|, then lexicographically. No pruning.
std::vector<TokenSeq> exhaustive_gqs(const ProbOracle& lm, const TokenSeq& context, const TokenSeq& authentic,
                                     double epsilon);

/// ln of the product of conditional probabilities, summed left to right.
double logprob(const ProbOracle& lm, const TokenSeq& context, const TokenSeq& seq);

/// Random strictly positive bigram table over the vocabulary; `spread` controls
/// how far log-probabilities range within a row.
class RandomBigram final : public ProbOracle {
 public:
  RandomBigram(int vocab_size, std::uint64_t seed, double spread = 3.0);
  int vocab_size() const override { return static_cast<int>(rows_.size()); }
  std::vector<double> next_dist(std::span<const Token> context) const override;

 private:
  std::vector<std::vector<double>> rows_;  // rows_[prev]; the first token uses rows_[0]
};

}  // namespace ospd::oracle
