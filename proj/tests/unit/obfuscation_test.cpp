#include "ospd/obfuscation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ospd/verify/oracles.hpp"

namespace ospd {
namespace {

struct DatePrompt {
  Vocab vocab;
  TagRules rules = TagRules::parse("month\t/(jan|feb|mar)/\nday\t/[0-9]+/\n");
};

TEST(TagSensitive, NoMatchGivesNoSpans) {
  DatePrompt d;
  tokenize_corpus("the cat sat jan 14", d.vocab);
  const auto t = tag_sensitive(d.vocab.encode("the cat sat"), d.rules, d.vocab);
  EXPECT_TRUE(t.spans.empty());
  EXPECT_EQ(t.tokens.size(), 3u);
}

TEST(TagSensitive, SingleHit) {
  DatePrompt d;
  tokenize_corpus("seen on mar today", d.vocab);
  const auto t = tag_sensitive(d.vocab.encode("seen on mar today"), d.rules, d.vocab);
  ASSERT_EQ(t.spans.size(), 1u);
  EXPECT_EQ(t.spans[0].start, 2u);
  EXPECT_EQ(t.spans[0].length, 1u);
  EXPECT_EQ(t.spans[0].category, "month");
}

TEST(TagSensitive, AdjacentHitsStaySeparate) {
  DatePrompt d;
  tokenize_corpus("seen on mar 14 .", d.vocab);
  const auto t = tag_sensitive(d.vocab.encode("seen on mar 14 ."), d.rules, d.vocab);
  ASSERT_EQ(t.spans.size(), 2u);
  EXPECT_EQ(t.spans[0].category, "month");
  EXPECT_EQ(t.spans[1].category, "day");
  EXPECT_EQ(t.spans[1].start, 3u);
  EXPECT_NO_THROW(t.validate());
}

TEST(TagSensitive, LiteralRulePrefersLongestMatch) {
  Vocab vocab;
  tokenize_corpus("new york city", vocab);
  const auto rules = TagRules::parse("city\tnew york\ncity\tnew york city\n");
  const auto t = tag_sensitive(vocab.encode("new york city"), rules, vocab);
  ASSERT_EQ(t.spans.size(), 1u);
  EXPECT_EQ(t.spans[0].length, 3u);
}

TEST(TaggedPrompt, InvalidSpansRejected) {
  TaggedPrompt p{{1, 2, 3}, {{1, 2, "x"}, {2, 1, "y"}}};
  EXPECT_THROW(p.validate(), ConfigError);
  p.spans = {{2, 2, "x"}};
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Gqs, UniformOracleKeepsWholeVocabulary) {
  const TableOracle uniform(1, std::vector<double>(4, 0.25));
  const TaggedPrompt p{{0, 2}, {{1, 1, "x"}}};
  const auto set = gqs(p, 0, {0.1, 16}, uniform);
  EXPECT_EQ(set.candidates.size(), 4u);
  EXPECT_EQ(set.candidates.front(), TokenSeq{2});
  EXPECT_EQ(set.fake_count(), 3u);
}

TEST(Gqs, KeepsOnlyTokensInTheAuthenticBin) {
  const TableOracle lm(1, {0.5, 0.45, 0.04, 0.01});
  const TaggedPrompt p{{0}, {{0, 1, "x"}}};
  const auto set = gqs(p, 0, {0.5, 16}, lm);
  const std::vector<TokenSeq> want{{0}, {1}};
  EXPECT_EQ(set.candidates, want);
  for (const auto& c : set.candidates) EXPECT_TRUE(verify_bound(p.segment(0), c, {}, 0.5, lm));
}

TEST(Gqs, RespectsLambdaMax) {
  const TableOracle uniform(1, std::vector<double>(10, 0.1));
  const TaggedPrompt p{{3, 4}, {{0, 2, "x"}}};
  const auto set = gqs(p, 0, {0.1, 5}, uniform);
  EXPECT_EQ(set.candidates.size(), 6u);
  EXPECT_EQ(set.candidates.front(), (TokenSeq{3, 4}));
}

TEST(Gqs, MatchesExhaustiveEnumeration) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const oracle::RandomBigram lm(3, seed, 1.0);
    const TaggedPrompt p{{1, 2, 0}, {{1, 2, "x"}}};
    const auto set = gqs(p, 0, {0.8, 1000}, lm);
    const auto want = oracle::exhaustive_gqs(lm, {1}, {2, 0}, 0.8);
    EXPECT_EQ(set.candidates, want) << "seed " << seed;
    for (const auto& c : set.candidates) EXPECT_TRUE(verify_bound(p.segment(0), c, p.left_context(0), 0.8, lm));
  }
}

TEST(VerifyBound, IdentityAndOutOfBin) {
  const TableOracle lm(1, {0.5, 0.45, 0.04, 0.01});
  const TokenSeq a{0}, c{2};
  EXPECT_TRUE(verify_bound(a, a, {}, 1e-9, lm));
  EXPECT_FALSE(verify_bound(a, c, {}, 0.5, lm));
  EXPECT_THROW(verify_bound(a, TokenSeq{0, 1}, {}, 0.5, lm), DimensionError);
}

TEST(MultiSegment, SingleSegmentEqualsGqs) {
  const oracle::RandomBigram lm(6, 3, 1.0);
  const TaggedPrompt p{{1, 2, 3, 4}, {{1, 2, "x"}}};
  const ObfuscationConfig cfg{0.6, 50};
  const auto multi = multi_segment_gqs(p, cfg, lm);
  ASSERT_EQ(multi.size(), 1u);
  EXPECT_EQ(multi[0].candidates, gqs(p, 0, cfg, lm).candidates);
}

TEST(MultiSegment, SplitsEpsilonAcrossSegments) {
  const oracle::RandomBigram lm(6, 4, 1.0);
  const TaggedPrompt p{{1, 2, 3, 4, 5}, {{1, 1, "x"}, {3, 1, "y"}}};
  const ObfuscationConfig cfg{0.2, 50};
  const auto multi = multi_segment_gqs(p, cfg, lm);
  ASSERT_EQ(multi.size(), 2u);
  ObfuscationConfig half = cfg;
  half.epsilon = 0.1;
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(multi[s].candidates, gqs(p, s, half, lm).candidates);
    for (const auto& c : multi[s].candidates) {
      EXPECT_TRUE(verify_bound(p.segment(s), c, p.left_context(s), 0.1, lm));
    }
  }
  const auto set = build_virtual_prompts(p, multi, cfg, 9);
  for (const auto& prompt : set.prompts) EXPECT_LE(combined_log_gap(p, prompt, lm), 0.2);
}

TEST(PrfIndex, ZeroLambdaAndDeterminism) {
  EXPECT_EQ(prf_index("k", 1, 0), 0u);
  for (std::uint64_t s = 0; s < 50; ++s) {
    EXPECT_EQ(prf_index("k", s, 7), prf_index("k", s, 7));
    EXPECT_LE(prf_index("k", s, 7), 7u);
  }
}

TEST(PrfIndex, UniformOverSessions) {
  constexpr int kSessions = 100000;
  constexpr std::size_t kLambda = 7;
  std::vector<int> counts(kLambda + 1, 0);
  for (int s = 0; s < kSessions; ++s) ++counts[prf_index("uniformity", static_cast<std::uint64_t>(s), kLambda)];
  const double p = 1.0 / (kLambda + 1);
  const double mean = kSessions * p;
  const double sigma = std::sqrt(kSessions * p * (1 - p));
  for (int c : counts) EXPECT_LE(std::abs(c - mean), 3 * sigma);
}

TEST(Winnow, WrongKeyGuessesAtChance) {
  constexpr int kSessions = 40000;
  constexpr std::size_t kLambda = 7;
  int hits = 0;
  for (int s = 0; s < kSessions; ++s) {
    hits += prf_index("right", static_cast<std::uint64_t>(s), kLambda) ==
            prf_index("wrong", static_cast<std::uint64_t>(s), kLambda);
  }
  const double p = 1.0 / (kLambda + 1);
  EXPECT_LE(std::abs(hits - kSessions * p), 3 * std::sqrt(kSessions * p * (1 - p)));
}

TEST(Winnow, SelectsAndChecksRange) {
  const std::vector<TokenSeq> r{{1}, {2}, {3}};
  EXPECT_EQ(winnow(r, 1), TokenSeq{2});
  EXPECT_THROW(winnow(r, 3), std::out_of_range);
  EXPECT_THROW(winnow(std::vector<TokenSeq>{}, 0), std::out_of_range);
}

TEST(VirtualPrompts, BuildsLambdaPlusOneEqualLengthPrompts) {
  const TableOracle uniform(1, std::vector<double>(12, 1.0 / 12));
  const TaggedPrompt p{{0, 5, 6, 1}, {{1, 2, "x"}}};
  const ObfuscationConfig cfg{0.1, 7};
  const auto fakes = multi_segment_gqs(p, cfg, uniform);
  const auto set = build_virtual_prompts(p, fakes, cfg, 42);
  EXPECT_EQ(set.lambda, 7u);
  ASSERT_EQ(set.prompts.size(), 8u);
  EXPECT_EQ(set.authentic(), p.tokens);
  EXPECT_EQ(std::count(set.prompts.begin(), set.prompts.end(), p.tokens), 1);
  EXPECT_EQ(set.idx, prf_index(cfg.prf_key, 42, 7));
  std::set<TokenSeq> distinct(set.prompts.begin(), set.prompts.end());
  EXPECT_EQ(distinct.size(), 8u);
  for (const auto& q : set.prompts) {
    ASSERT_EQ(q.size(), p.tokens.size());
    EXPECT_EQ(q.front(), 0u);
    EXPECT_EQ(q.back(), 1u);
  }
}

TEST(VirtualPrompts, AbortsBelowLambdaMin) {
  const TableOracle lm(1, {0.5, 0.45, 0.04, 0.01});
  const TaggedPrompt p{{0, 2}, {{0, 1, "x"}}};
  ObfuscationConfig cfg{0.5, 16};
  cfg.lambda_min = 4;
  const auto fakes = multi_segment_gqs(p, cfg, lm);
  EXPECT_THROW(build_virtual_prompts(p, fakes, cfg, 1), ObfuscationAbort);
  cfg.lambda_min = 1;
  EXPECT_EQ(build_virtual_prompts(p, fakes, cfg, 1).lambda, 1u);
}

TEST(ObfuscationConfig, Validation) {
  ObfuscationConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda_min = c.lambda_max + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace ospd
