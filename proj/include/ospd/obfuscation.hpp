#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "ospd/langmodel.hpp"

namespace ospd {

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
  std::string category;

  std::size_t end() const { return start + length; }
};

struct TaggedPrompt {
  TokenSeq tokens;
  std::vector<Span> spans;  // sorted, non-overlapping, in bounds

  /// Throws ConfigError if the span invariants do not hold.
  void validate() const;
  TokenSeq segment(std::size_t i) const;
  /// Tokens left of span i (the conditioning context for GQS).
  TokenSeq left_context(std::size_t i) const;
};

struct ObfuscationConfig {
  double epsilon = 0.1;
  int lambda_max = 512;
  int lambda_min = 0;
  double temperature = 1.0;
  std::string prf_key = "ospd-default-key";

  void validate() const;
};

/// `category<TAB>pattern` rules. A pattern wrapped in slashes is a regex matched
/// against single tokens; anything else is a literal whitespace-separated word
/// sequence.
class TagRules {
 public:
  struct Rule {
    std::string category;
    std::vector<std::string> literal;
    std::optional<std::regex> pattern;
  };

  void add_literal(std::string category, const std::string& words);
  void add_regex(std::string category, const std::string& regex);
  const std::vector<Rule>& rules() const { return rules_; }
  bool empty() const { return rules_.empty(); }

  static TagRules parse(const std::string& text);
  static TagRules load(const std::filesystem::path& path);

 private:
  std::vector<Rule> rules_;
};

/// Leftmost-longest matching of the rules over the prompt words.
TaggedPrompt tag_sensitive(std::span<const Token> tokens, const TagRules& rules, const Vocab& vocab);

/// Index of the width-wide bin holding logp: floor(logp / width).
long quantized_bin(double logp, double width);

struct FakeNgramSet {
  std::size_t segment = 0;
  Span span;
  TokenSeq authentic;
  /// Ranked candidates; the authentic n-gram is always first.
  std::vector<TokenSeq> candidates;
  bool includes_authentic = true;

  std::size_t fake_count() const { return candidates.size() - (includes_authentic ? 1 : 0); }
};

/// Greedy Quantized Sampling over one tagged segment. The oracle is tempered
/// by config.temperature before binning. Keeps the authentic n-gram plus at
/// most lambda_max fakes per round, ranked by closeness of their cumulative
/// log-probability to the authentic prefix, ties broken by token ids.
FakeNgramSet gqs(const TaggedPrompt& prompt, std::size_t segment, const ObfuscationConfig& config,
                 const ProbOracle& oracle);

/// |ln LM(fake | ctx) - ln LM(original | ctx)| <= epsilon, by direct evaluation.
bool verify_bound(std::span<const Token> original, std::span<const Token> fake, std::span<const Token> context,
                  double epsilon, const ProbOracle& oracle);

/// GQS on every span with epsilon / k each, segments sampled concurrently.
std::vector<FakeNgramSet> multi_segment_gqs(const TaggedPrompt& prompt, const ObfuscationConfig& config,
                                            const ProbOracle& oracle);

/// Sum over segments of the per-segment log-probability gap between a
/// replacement prompt and the original, each segment under its own left context.
double combined_log_gap(const TaggedPrompt& original, std::span<const Token> replaced, const ProbOracle& oracle);

/// Keyed HMAC-SHA256 of the session id reduced to [0, lambda] by rejection.
std::size_t prf_index(const std::string& key, std::uint64_t session_id, std::size_t lambda);

struct VirtualPromptSet {
  std::vector<TokenSeq> prompts;  // lambda + 1, equal lengths
  std::size_t idx = 0;            // authentic position
  std::size_t lambda = 0;

  const TokenSeq& authentic() const { return prompts.at(idx); }
};

/// Builds lambda = min(lambda_max, available fakes) virtual prompts around the
/// authentic one. Throws ObfuscationAbort when lambda < lambda_min.
VirtualPromptSet build_virtual_prompts(const TaggedPrompt& prompt, std::span<const FakeNgramSet> fake_sets,
                                       const ObfuscationConfig& config, std::uint64_t session_id);

/// The single-stream set used when obfuscation is off.
VirtualPromptSet plain_prompt_set(const TokenSeq& prompt);

/// responses[idx]; throws std::out_of_range on a bad index or count.
TokenSeq winnow(std::span<const TokenSeq> responses, std::size_t idx);

/// Debug listing of a virtual prompt set. Never leaves the user side.
std::string dump_virtual_prompts(const VirtualPromptSet& set, const Vocab* vocab = nullptr);

}  // namespace ospd
