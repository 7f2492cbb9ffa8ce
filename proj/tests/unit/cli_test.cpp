#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "run_config.hpp"

namespace ospd::cli {
namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

TEST(Config, AppliesKnownKeys) {
  RunConfig c;
  apply_config_text(c, R"({"model": {"d_model": 32, "head_dim": 16}, "obfuscation": {"epsilon": 0.3},
                           "bench": {"users": [1, 3], "transport": "tcp"}})");
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_EQ(c.obfuscation.epsilon, 0.3);
  EXPECT_EQ(c.bench.users, (std::vector<int>{1, 3}));
  EXPECT_EQ(c.bench.base.transport, Transport::tcp);
}

TEST(Config, UnknownKeyRejected) {
  RunConfig c;
  EXPECT_THROW(apply_config_text(c, R"({"model": {"depth": 3}})"), ConfigError);
  EXPECT_THROW(apply_config_text(c, R"({"extras": {}})"), ConfigError);
  EXPECT_THROW(apply_config_text(c, R"({"model": {"d_model": "wide"}})"), ConfigError);
  EXPECT_THROW(apply_config_text(c, R"({"bench": {"modes": ["fast"]}})"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "{not json"), ConfigError);
}

TEST(Config, SweepConfigsCoverModesAndLambdas) {
  RunConfig c;
  const auto configs = sweep_configs(c);
  EXPECT_EQ(configs.size(), 14u);
  EXPECT_EQ(configs.back().lambda, 15);
  EXPECT_EQ(configs.back().users, 2);
}

TEST(Demo, RunsAndMatchesMonolithic) {
  RunConfig c;
  c.demo.max_tokens = 6;
  std::ostringstream out;
  EXPECT_EQ(cmd_demo(c, out), kPass);
  EXPECT_NE(out.str().find("match"), std::string::npos);
  EXPECT_EQ(out.str().find("MISMATCH"), std::string::npos);
}

TEST(Demo, UnreachableLambdaMinAborts) {
  RunConfig c;
  c.obfuscation.lambda_max = 512;
  c.obfuscation.lambda_min = 400;
  c.demo.max_tokens = 2;
  std::ostringstream out;
  EXPECT_EQ(cmd_demo(c, out), kObfuscationAbort);
  EXPECT_NE(out.str().find("aborted"), std::string::npos);
}

TEST(Demo, SameSeedSameTranscript) {
  const auto dir = std::filesystem::temp_directory_path();
  std::string dumps[2];
  for (int i = 0; i < 2; ++i) {
    RunConfig c;
    c.seed = 5;
    c.seed_set = true;
    c.demo.max_tokens = 4;
    c.out = dir / ("ospd_demo_" + std::to_string(i) + ".txt");
    std::ostringstream out;
    ASSERT_EQ(cmd_demo(c, out), kPass);
    dumps[i] = slurp(c.out);
    std::filesystem::remove(c.out);
  }
  EXPECT_FALSE(dumps[0].empty());
  EXPECT_EQ(dumps[0], dumps[1]);
}

TEST(Verify, SuiteWritesSummary) {
  RunConfig c;
  c.out = std::filesystem::temp_directory_path() / "ospd_verify.json";
  std::ostringstream out;
  EXPECT_EQ(cmd_verify(c, "theorem1", out), kPass);
  EXPECT_NE(slurp(c.out).find("\"passed\": true"), std::string::npos);
  std::filesystem::remove(c.out);
}

}  // namespace
}  // namespace ospd::cli
