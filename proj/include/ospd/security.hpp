#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ospd/obfuscation.hpp"

namespace ospd {

struct AuthenticityReport {
  double C = 1.0;
  /// ln P(S_i) - ln P(S_authentic), one per virtual prompt.
  std::vector<double> log_ratios;
  double max_log_ratio() const;
};

/// Minimal C >= 1 with 1/C <= P(S_i)/P(S_0) <= C. Throws Error on a
/// zero-probability prompt.
AuthenticityReport authenticity_C(const ProbOracle& p, const VirtualPromptSet& prompts);

/// max over the set of |ln P(S) - ln LM(S)|.
double estimate_delta(const ProbOracle& p, const ProbOracle& lm, std::span<const TokenSeq> prompts);

/// Every way to fill the tagged spans of a prompt with vocabulary tokens, the
/// rest held fixed. This is the enumerable evaluation set for delta.
std::vector<TokenSeq> span_fillings(const TaggedPrompt& prompt, int vocab_size);

struct SuccessBounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// eta/(lambda+1) * 1/(1+(eta-1)e^{+-(eps+2 delta)}). Throws ConfigError unless
/// 1 <= eta <= lambda+1.
SuccessBounds success_bounds(int eta, int lambda, double epsilon, double delta);

/// One attack: eta of the lambda+1 prompts drawn uniformly without
/// replacement, then a guess proportional to P among them.
bool adversary_trial(std::span<const double> log_p, std::size_t authentic, int eta, Rng& rng);
bool adversary_trial(const ProbOracle& p, const VirtualPromptSet& prompts, int eta, Rng& rng);

struct AdversaryResult {
  int eta = 0;
  int lambda = 0;
  double epsilon = 0.0;
  double delta = 0.0;
  long trials = 0;
  long successes = 0;
  double rate = 0.0;
  double ci_lo = 0.0;  // Wilson interval at z
  double ci_hi = 0.0;
  double z = 3.0;
  SuccessBounds bounds;

  /// lower - z sigma <= rate <= upper + z sigma, sigma from the binomial at each bound.
  bool within_bounds() const;
};

/// Wilson score interval for k successes in n trials.
std::pair<double, double> wilson_interval(long k, long n, double z);

/// Trials split over fixed seeded chunks, so results depend only on the seed.
AdversaryResult monte_carlo_success(const ProbOracle& p, const VirtualPromptSet& prompts, int eta, long trials,
                                    std::uint64_t seed, double epsilon, double delta, double z = 3.0);

/// eta,lambda,epsilon,delta,rate,ci_lo,ci_hi,bound_lo,bound_hi
std::string adversary_csv(std::span<const AdversaryResult> results);

}  // namespace ospd
