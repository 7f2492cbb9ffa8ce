#include "ospd/verify/oracles.hpp"

#include <algorithm>
#include <cmath>

#include "ospd/numerics.hpp"

namespace ospd::oracle {

std::vector<long double> attention(const std::vector<long double>& q, const LMatrix& keys, const LMatrix& values) {
  std::vector<long double> scores;
  for (const auto& k : keys) {
    long double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
    scores.push_back(s);
  }
  const long double top = *std::max_element(scores.begin(), scores.end());
  long double total = 0;
  std::vector<long double> out(values.front().size(), 0.0L);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    const long double w = std::exp(scores[r] - top);
    total += w;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * values[r][j];
  }
  for (auto& x : out) x /= total;
  return out;
}

std::vector<std::vector<double>> triple_loop(const std::vector<std::vector<double>>& a,
                                             const std::vector<std::vector<double>>& b) {
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.front().size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  }
  return out;
}

double logprob(const ProbOracle& lm, const TokenSeq& context, const TokenSeq& seq) {
  TokenSeq ctx = context;
  double total = 0.0;
  for (Token t : seq) {
    total += std::log(lm.next_dist(ctx)[t]);
    ctx.push_back(t);
  }
  return total;
}

std::vector<TokenSeq> exhaustive_gqs(const ProbOracle& lm, const TokenSeq& context, const TokenSeq& authentic,
                                     double epsilon) {
  const std::size_t n = authentic.size();
  const double width = epsilon / static_cast<double>(n);
  const auto v = static_cast<std::size_t>(lm.vocab_size());

  std::vector<long> bins;
  {
    TokenSeq ctx = context;
    for (Token t : authentic) {
      bins.push_back(static_cast<long>(std::floor(std::log(lm.next_dist(ctx)[t]) / width)));
      ctx.push_back(t);
    }
  }

  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= v;
  struct Hit {
    TokenSeq seq;
    double logp;
  };
  std::vector<Hit> hits;
  for (std::size_t code = 0; code < total; ++code) {
    TokenSeq seq(n);
    std::size_t c = code;
    for (std::size_t i = n; i-- > 0;) {
      seq[i] = static_cast<Token>(c % v);
      c /= v;
    }
    TokenSeq ctx = context;
    double lp = 0.0;
    bool ok = true;
    for (std::size_t t = 0; t < n && ok; ++t) {
      const double l = std::log(lm.next_dist(ctx)[seq[t]]);
      ok = static_cast<long>(std::floor(l / width)) == bins[t];
      lp += l;
      ctx.push_back(seq[t]);
    }
    if (ok) hits.push_back({std::move(seq), lp});
  }

  const double base = logprob(lm, context, authentic);
  std::sort(hits.begin(), hits.end(), [&](const Hit& a, const Hit& b) {
    const bool aa = a.seq == authentic, ba = b.seq == authentic;
    if (aa != ba) return aa;
    const double da = std::abs(a.logp - base), db = std::abs(b.logp - base);
    if (da != db) return da < db;
    return a.seq < b.seq;
  });
  std::vector<TokenSeq> out;
  for (auto& h : hits) out.push_back(std::move(h.seq));
  return out;
}

RandomBigram::RandomBigram(int vocab_size, std::uint64_t seed, double spread) {
  Rng rng(seed);
  rows_.resize(static_cast<std::size_t>(vocab_size));
  for (auto& row : rows_) {
    double total = 0.0;
    for (int i = 0; i < vocab_size; ++i) {
      row.push_back(std::exp(spread * (rng.uniform() - 0.5)));
      total += row.back();
    }
    for (auto& p : row) p /= total;
  }
}

std::vector<double> RandomBigram::next_dist(std::span<const Token> context) const {
  return rows_.at(context.empty() ? 0 : context.back());
}

}  // namespace ospd::oracle
