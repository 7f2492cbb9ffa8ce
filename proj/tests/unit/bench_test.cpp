#include "ospd/bench.hpp"

#include <gtest/gtest.h>

#include <algorithm>

namespace ospd {
namespace {

BenchConfig tiny(BenchMode mode, int users) {
  BenchConfig c;
  c.mode = mode;
  c.users = users;
  c.in_tokens = 5;
  c.out_tokens = 4;
  c.repetitions = 3;
  return c;
}

TEST(Bench, SingleUserModesAgree) {
  const auto a = run_mode(tiny(BenchMode::no_protection, 1));
  const auto b = run_mode(tiny(BenchMode::full_isolation, 1));
  const auto c = run_mode(tiny(BenchMode::spd, 1));
  ASSERT_TRUE(a.error.empty());
  EXPECT_EQ(a.outputs, b.outputs);
  EXPECT_EQ(a.outputs, c.outputs);
}

TEST(Bench, ManyUsersModesAgree) {
  const auto a = run_mode(tiny(BenchMode::no_protection, 3));
  const auto b = run_mode(tiny(BenchMode::full_isolation, 3));
  const auto c = run_mode(tiny(BenchMode::spd, 3));
  EXPECT_EQ(a.outputs.size(), 3u);
  EXPECT_EQ(a.outputs, b.outputs);
  EXPECT_EQ(a.outputs, c.outputs);
}

TEST(Bench, WeightCopies) {
  EXPECT_EQ(run_mode(tiny(BenchMode::no_protection, 4)).weight_copies, 1);
  EXPECT_EQ(run_mode(tiny(BenchMode::full_isolation, 4)).weight_copies, 4);
  EXPECT_EQ(run_mode(tiny(BenchMode::spd, 4)).weight_copies, 1);
}

TEST(Bench, ObfuscatedRunStillProducesAuthenticOutput) {
  BenchConfig c = tiny(BenchMode::spd, 2);
  const auto plain = run_mode(c);
  c.lambda = 3;
  const auto obf = run_mode(c);
  EXPECT_EQ(obf.outputs, plain.outputs);
  EXPECT_GT(obf.bytes_per_token, plain.bytes_per_token);
}

TEST(Bench, PromptsAvoidEos) {
  BenchConfig c = tiny(BenchMode::spd, 8);
  const auto prompts = bench_prompts(c);
  ASSERT_EQ(prompts.size(), 8u);
  for (const auto& p : prompts) {
    EXPECT_EQ(p.size(), 5u);
    for (Token t : p) EXPECT_LT(t, c.model.eos());
  }
  EXPECT_EQ(prompts, bench_prompts(c));
}

TEST(Bench, SweepSortedAndRepeatable) {
  BenchConfig base = tiny(BenchMode::spd, 1);
  auto configs = default_sweep(base);
  EXPECT_GE(configs.size(), 12u);
  std::reverse(configs.begin(), configs.end());
  const auto a = sweep(configs);
  const auto b = sweep(configs);
  ASSERT_EQ(a.size(), configs.size());
  for (std::size_t i = 1; i < a.size(); ++i) {
    const auto key = [](const BenchRecord& r) { return std::tuple(r.mode, r.users, r.lambda); };
    EXPECT_LT(key(a[i - 1]), key(a[i]));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].outputs, b[i].outputs);
    EXPECT_EQ(a[i].weight_copies, b[i].weight_copies);
    EXPECT_EQ(a[i].bytes_per_token, b[i].bytes_per_token);
  }
  const std::string csv = bench_csv(a);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(a.size()) + 1);
  EXPECT_EQ(csv.rfind("mode,users,lambda", 0), 0u);
}

TEST(Bench, ConfigValidation) {
  BenchConfig c = tiny(BenchMode::spd, 0);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_mode("gpu_magic"), ConfigError);
  EXPECT_EQ(parse_mode("full_isolation"), BenchMode::full_isolation);
}

TEST(Bench, LatencySlopeOfLine) {
  std::vector<BenchRecord> rs;
  for (int m : {1, 2, 4}) {
    BenchRecord r;
    r.mode = BenchMode::spd;
    r.users = m;
    r.ms_per_token_med = 2.0 + 0.5 * m;
    rs.push_back(r);
  }
  EXPECT_NEAR(latency_slope(rs, BenchMode::spd), 0.5, 1e-12);
}

}  // namespace
}  // namespace ospd
