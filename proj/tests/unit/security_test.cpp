#include "ospd/security.hpp"

#include <gtest/gtest.h>

namespace ospd {
namespace {

VirtualPromptSet single_token_prompts(std::vector<Token> tokens, std::size_t idx) {
  VirtualPromptSet set;
  for (Token t : tokens) set.prompts.push_back({t});
  set.idx = idx;
  set.lambda = tokens.size() - 1;
  return set;
}

TEST(Authenticity, EquiprobablePromptsGiveOne) {
  const TableOracle uniform(1, std::vector<double>(4, 0.25));
  const auto r = authenticity_C(uniform, single_token_prompts({0, 1, 2, 3}, 2));
  EXPECT_DOUBLE_EQ(r.C, 1.0);
  EXPECT_EQ(r.log_ratios.size(), 4u);
}

TEST(Authenticity, DoubleProbabilityGivesTwo) {
  const TableOracle p(1, {0.25, 0.5, 0.25});
  const auto r = authenticity_C(p, single_token_prompts({0, 1, 2}, 0));
  EXPECT_NEAR(r.C, 2.0, 1e-12);
  EXPECT_NEAR(r.max_log_ratio(), std::log(2.0), 1e-12);
}

TEST(Delta, ZeroForIdenticalModels) {
  const TableOracle lm(1, {0.1, 0.2, 0.3, 0.4});
  const TaggedPrompt prompt{{0, 1, 2}, {{1, 1, "x"}}};
  const auto set = span_fillings(prompt, 4);
  EXPECT_EQ(set.size(), 4u);
  EXPECT_EQ(estimate_delta(lm, lm, set), 0.0);
}

TEST(Delta, RecoversKnownPerturbation) {
  const TableOracle lm(1, {0.1, 0.2, 0.3, 0.4});
  const TaggedPrompt prompt{{0, 1, 2}, {{1, 1, "x"}}};
  const auto set = span_fillings(prompt, 4);
  const PerturbedOracle p(lm, TokenSeq{0}, 3, 0.1);
  const std::vector<TokenSeq> one{{0, 3, 2}};
  EXPECT_NEAR(estimate_delta(p, lm, one), 0.1, 1e-12);
  EXPECT_GE(estimate_delta(p, lm, set), 0.1);
  double prev = 0.0;
  for (double f : {0.05, 0.1, 0.2, 0.4}) {
    const PerturbedOracle q(lm, TokenSeq{0}, 3, f);
    const double df = estimate_delta(q, lm, set);
    EXPECT_GE(df, prev);
    prev = df;
  }
}

TEST(SpanFillings, CountsAndKeepsFixedTokens) {
  const TaggedPrompt prompt{{7, 1, 2, 8}, {{1, 2, "x"}}};
  const auto set = span_fillings(prompt, 3);
  ASSERT_EQ(set.size(), 9u);
  for (const auto& s : set) {
    EXPECT_EQ(s.front(), 7u);
    EXPECT_EQ(s.back(), 8u);
  }
}

TEST(SuccessBounds, SingleDrawIsChance) {
  const auto b = success_bounds(1, 7, 0.3, 0.1);
  EXPECT_DOUBLE_EQ(b.lower, 1.0 / 8);
  EXPECT_DOUBLE_EQ(b.upper, 1.0 / 8);
}

TEST(SuccessBounds, PerfectIndistinguishability) {
  const auto b = success_bounds(8, 7, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(b.lower, 1.0 / 8);
  EXPECT_DOUBLE_EQ(b.upper, 1.0 / 8);
}

TEST(SuccessBounds, ClosedFormCase) {
  const auto b = success_bounds(2, 1, std::log(2.0), 0.0);
  EXPECT_NEAR(b.lower, 1.0 / 3, 1e-15);
  EXPECT_NEAR(b.upper, 2.0 / 3, 1e-15);
}

TEST(SuccessBounds, NonIncreasingInLambda) {
  for (int eta : {1, 2, 4}) {
    double prev_lo = 2.0, prev_hi = 2.0;
    for (int lambda = eta - 1; lambda < 64; ++lambda) {
      const auto b = success_bounds(eta, lambda, 0.2, 0.05);
      EXPECT_LE(b.lower, prev_lo);
      EXPECT_LE(b.upper, prev_hi);
      EXPECT_LE(b.lower, b.upper);
      prev_lo = b.lower;
      prev_hi = b.upper;
    }
  }
}

TEST(SuccessBounds, EtaOutOfRangeThrows) {
  EXPECT_THROW(success_bounds(0, 3, 0.1, 0.0), ConfigError);
  EXPECT_THROW(success_bounds(5, 3, 0.1, 0.0), ConfigError);
}

TEST(MonteCarlo, DeterministicGivenSeed) {
  const TableOracle p(1, {0.2, 0.25, 0.3, 0.25});
  const auto set = single_token_prompts({0, 1, 2, 3}, 1);
  const auto a = monte_carlo_success(p, set, 2, 20000, 5, 0.5, 0.0);
  const auto b = monte_carlo_success(p, set, 2, 20000, 5, 0.5, 0.0);
  EXPECT_EQ(a.successes, b.successes);
  const auto c = monte_carlo_success(p, set, 2, 20000, 6, 0.5, 0.0);
  EXPECT_NE(a.successes, c.successes);
}

TEST(MonteCarlo, UniformPromptsHitChance) {
  const TableOracle uniform(1, std::vector<double>(8, 0.125));
  const auto set = single_token_prompts({0, 1, 2, 3, 4, 5, 6, 7}, 3);
  const auto r = monte_carlo_success(uniform, set, 4, 40000, 1, 1e-12, 0.0);
  EXPECT_TRUE(r.within_bounds());
  EXPECT_NEAR(r.rate, 1.0 / 8, 0.01);
  EXPECT_LE(r.ci_lo, r.rate);
  EXPECT_GE(r.ci_hi, r.rate);
}

TEST(Wilson, ContainsEstimate) {
  const auto [lo, hi] = wilson_interval(30, 100, 3.0);
  EXPECT_LT(lo, 0.3);
  EXPECT_GT(hi, 0.3);
  const auto [z0, z1] = wilson_interval(0, 50, 3.0);
  EXPECT_EQ(z0, 0.0);
  EXPECT_GT(z1, 0.0);
}

}  // namespace
}  // namespace ospd
