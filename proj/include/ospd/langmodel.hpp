#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ospd/model.hpp"

namespace ospd {

using TokenSeq = std::vector<Token>;

/// Next-token probability source. Implementations must return a strictly
/// positive distribution summing to one for every context.
class ProbOracle {
 public:
  virtual ~ProbOracle() = default;
  virtual int vocab_size() const = 0;
  virtual std::vector<double> next_dist(std::span<const Token> context) const = 0;
};

/// Sum of ln next_dist over tokens, each conditioned on context plus the preceding tokens.
double seq_logprob(const ProbOracle& oracle, std::span<const Token> tokens, std::span<const Token> context = {});

/// p_i^(1/tau), renormalized.
std::vector<double> apply_temperature(std::span<const double> dist, double tau);

/// Largest |ln A(S) - ln B(S)| over an explicit set of sequences.
double max_log_gap(const ProbOracle& a, const ProbOracle& b, std::span<const TokenSeq> sequences);

class TemperedOracle final : public ProbOracle {
 public:
  TemperedOracle(const ProbOracle& base, double tau);
  int vocab_size() const override { return base_.vocab_size(); }
  std::vector<double> next_dist(std::span<const Token> context) const override;

 private:
  const ProbOracle& base_;
  double tau_;
};

/// Order-k model with additive smoothing: (count + s) / (total + s V).
/// Contexts are the last k-1 tokens, shorter at sequence starts.
class NgramModel final : public ProbOracle {
 public:
  NgramModel(int order, double smoothing, int vocab_size);

  int vocab_size() const override { return vocab_size_; }
  std::vector<double> next_dist(std::span<const Token> context) const override;

  int order() const { return order_; }
  double smoothing() const { return smoothing_; }
  /// Count of `next` after `context` (context already truncated to k-1).
  std::uint64_t count(const TokenSeq& context, Token next) const;

 private:
  friend NgramModel train_ngram(std::span<const TokenSeq>, int, double, int);
  struct Row {
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;
  };
  int order_;
  double smoothing_;
  int vocab_size_;
  std::map<TokenSeq, Row> table_;
};

/// vocab_size 0 infers max token id + 1 from the corpus.
NgramModel train_ngram(std::span<const TokenSeq> corpus, int order, double smoothing = 0.01, int vocab_size = 0);

/// Explicit per-context distributions keyed by the last `context_width` tokens;
/// contexts without an entry fall back to the default distribution.
class TableOracle final : public ProbOracle {
 public:
  TableOracle(int context_width, std::vector<double> fallback);
  void set(TokenSeq context_tail, std::vector<double> dist);
  int vocab_size() const override { return static_cast<int>(fallback_.size()); }
  std::vector<double> next_dist(std::span<const Token> context) const override;

 private:
  int context_width_;
  std::vector<double> fallback_;
  std::map<TokenSeq, std::vector<double>> table_;
};

/// Base oracle with one token's probability scaled by exp(log_factor) after a
/// given context tail; the remaining mass is rescaled uniformly.
class PerturbedOracle final : public ProbOracle {
 public:
  PerturbedOracle(const ProbOracle& base, TokenSeq context_tail, Token token, double log_factor);
  int vocab_size() const override { return base_.vocab_size(); }
  std::vector<double> next_dist(std::span<const Token> context) const override;

 private:
  const ProbOracle& base_;
  TokenSeq tail_;
  Token token_;
  double log_factor_;
};

/// The toy transformer as an oracle: softmax of forward_full over bos + context.
class TransformerOracle final : public ProbOracle {
 public:
  TransformerOracle(std::shared_ptr<const Weights> weights, Token bos = 0);
  int vocab_size() const override { return weights_->config.vocab_size; }
  std::vector<double> next_dist(std::span<const Token> context) const override;

 private:
  std::shared_ptr<const Weights> weights_;
  Token bos_;
};

/// Whitespace-token vocabulary; ids assigned in first-seen order.
class Vocab {
 public:
  Token add(const std::string& word);
  /// Throws CorpusError for unknown words.
  Token id(const std::string& word) const;
  bool contains(const std::string& word) const { return ids_.contains(word); }
  const std::string& word(Token id) const { return words_.at(id); }
  int size() const { return static_cast<int>(words_.size()); }

  TokenSeq encode(const std::string& text) const;
  std::string decode(std::span<const Token> tokens) const;

  /// One `token<TAB>id` line per entry.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, Token> ids_;
};

/// One sequence per non-empty line, whitespace tokenized, growing the vocab.
std::vector<TokenSeq> tokenize_corpus(const std::string& text, Vocab& vocab);
std::vector<TokenSeq> read_corpus(const std::filesystem::path& path, Vocab& vocab);

}  // namespace ospd
