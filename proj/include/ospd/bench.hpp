#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ospd/protocol.hpp"

namespace ospd {

enum class BenchMode { no_protection, full_isolation, spd };

const char* mode_name(BenchMode mode);
/// Throws ConfigError on an unknown name.
BenchMode parse_mode(const std::string& name);

struct BenchConfig {
  BenchMode mode = BenchMode::spd;
  int users = 1;
  int in_tokens = 16;
  int out_tokens = 16;
  int lambda = 0;
  ModelConfig model;
  int repetitions = 3;
  std::uint64_t seed = 1;
  Transport transport = Transport::in_process;

  void validate() const;
};

struct BenchRecord {
  BenchMode mode = BenchMode::spd;
  int users = 0;
  int lambda = 0;
  int in_tokens = 0;
  int out_tokens = 0;
  double ms_per_token_med = 0.0;  // median over repetitions of the per-repetition median step time
  double ms_per_token_p95 = 0.0;  // over every step of every repetition
  std::vector<double> rep_median_ms;
  long weight_copies = 0;         // peak resident Weights objects during the run
  double bytes_per_token = 0.0;   // protocol bytes per generated user token
  std::vector<TokenSeq> outputs;  // per user, first token included
  std::string error;              // resource failure, reported rather than thrown
};

/// Deterministic user prompts: tokens drawn from [0, vocab-1), avoiding EOS.
std::vector<TokenSeq> bench_prompts(const BenchConfig& config);

/// no_protection: one weight copy, batched monolithic decode.
/// full_isolation: one weight copy per user, users step on a shared accelerator.
/// spd: the protocol with batched public attention; lambda > 0 obfuscates the
/// last two prompt tokens under a uniform oracle.
BenchRecord run_mode(const BenchConfig& config);

/// 3 modes x m in {1,2,4,8} at lambda 0, plus spd at lambda 7 and 15 for m = 2.
std::vector<BenchConfig> default_sweep(const BenchConfig& base);

/// One record per config, sorted by mode, users, lambda, in, out.
std::vector<BenchRecord> sweep(std::span<const BenchConfig> configs);

/// mode,users,lambda,in_tokens,out_tokens,ms_per_token_med,ms_per_token_p95,weight_copies,bytes_per_token
std::string bench_csv(std::span<const BenchRecord> records);

/// Least-squares slope of ms_per_token_med against users for one mode at lambda 0.
double latency_slope(std::span<const BenchRecord> records, BenchMode mode);

}  // namespace ospd
