#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ospd/bench.hpp"

namespace ospd::cli {

enum ExitCode : int { kPass = 0, kInvariantFailure = 2, kObfuscationAbort = 3, kProtocolViolation = 4 };

struct DemoConfig {
  std::string prompt = "patient seen on mar 14 for checkup .";
  int max_tokens = 16;
  std::string tag_rules;  // path; empty uses the built-in month/day rules
};

struct BenchSweep {
  std::vector<std::string> modes{"no_protection", "full_isolation", "spd"};
  std::vector<int> users{1, 2, 4, 8};
  std::vector<int> lambdas{7, 15};  // extra spd rows at lambda_users
  int lambda_users = 2;
  BenchConfig base;
};

struct RunConfig {
  std::string subcommand;
  std::filesystem::path config_path;
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::filesystem::path out;
  int verbosity = 0;

  ModelConfig model;
  bool model_vocab_set = false;
  ObfuscationConfig obfuscation{0.1, 7};  // demo default: 7 virtual prompts besides the authentic one
  DemoConfig demo;
  BenchSweep bench;
};

/// Applies a JSON document with optional sections model, obfuscation, bench
/// and demo. Unknown keys and wrong types throw ConfigError.
void apply_config_text(RunConfig& config, const std::string& json_text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// The sweep as bench configs, sorted rows follow from bench::sweep.
std::vector<BenchConfig> sweep_configs(const RunConfig& config);

int cmd_demo(const RunConfig& config, std::ostream& out);
int cmd_verify(const RunConfig& config, const std::string& suite, std::ostream& out);
int cmd_bench(const RunConfig& config, std::ostream& out);

}  // namespace ospd::cli
