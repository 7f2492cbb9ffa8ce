#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "ospd/numerics.hpp"

namespace ospd {

using Token = std::uint32_t;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 16;
  int head_dim = 8;
  int vocab_size = 64;
  int max_seq = 128;
  std::uint32_t seed = 7;

  /// Throws ConfigError. head_dim must be even for the rotary pairs.
  void validate() const;
  int ffn_dim() const { return 4 * d_model; }
  Token eos() const { return static_cast<Token>(vocab_size - 1); }
};

/// Process-wide count of live Weights objects. Every Weights construction
/// (including copies) is one resident model-weight copy.
class WeightCopyCounter {
 public:
  static long live() { return live_.load(); }
  static long peak() { return peak_.load(); }
  /// Restarts peak tracking from the current live count.
  static void reset_peak() { peak_.store(live_.load()); }

 private:
  friend class WeightCopyToken;
  static void acquire();
  static void release() { --live_; }
  static inline std::atomic<long> live_{0};
  static inline std::atomic<long> peak_{0};
};

/// Owned by each Weights object. Copies count as new resident copies; a move
/// hands the existing copy over.
class WeightCopyToken {
 public:
  WeightCopyToken() { WeightCopyCounter::acquire(); }
  WeightCopyToken(const WeightCopyToken&) { WeightCopyCounter::acquire(); }
  WeightCopyToken(WeightCopyToken&& other) noexcept : owns_(std::exchange(other.owns_, false)) {}
  WeightCopyToken& operator=(const WeightCopyToken&) {
    if (!owns_) WeightCopyCounter::acquire();
    owns_ = true;
    return *this;
  }
  WeightCopyToken& operator=(WeightCopyToken&& other) noexcept {
    if (this != &other) {
      if (owns_) WeightCopyCounter::release();
      owns_ = std::exchange(other.owns_, false);
    }
    return *this;
  }
  ~WeightCopyToken() {
    if (owns_) WeightCopyCounter::release();
  }

 private:
  bool owns_ = true;
};

struct LayerWeights {
  Vector attn_norm;
  Matrix wq, wk, wv, wo;
  Vector mlp_norm;
  Matrix w_gate, w_up, w_down;
};

struct Weights {
  ModelConfig config;
  Matrix embedding;    // vocab x d_model
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix unembedding;  // d_model x vocab

  std::size_t matrix_count() const { return 3 + 9 * layers.size(); }
  bool operator==(const Weights& other) const;

 private:
  WeightCopyToken copy_token_;
};

Weights init_model(const ModelConfig& config);

/// Binary weight file: "OSPDW1", seven int32 LE config fields, then every
/// matrix in declared order as row-major float64 LE.
void save_weights(const Weights& weights, std::ostream& out);
void save_weights(const Weights& weights, const std::filesystem::path& path);
Weights load_weights(std::istream& in);
Weights load_weights(const std::filesystem::path& path);

/// Append-only key/value rows of one head.
class KvRows {
 public:
  using ConstMap = Eigen::Map<const Matrix>;

  explicit KvRows(int head_dim = 0) : head_dim_(head_dim) {}

  template <typename K, typename V>
  void append(const Eigen::MatrixBase<K>& key, const Eigen::MatrixBase<V>& value) {
    if (key.size() != head_dim_ || value.size() != head_dim_) {
      throw DimensionError("KvRows::append: row width does not match head_dim");
    }
    for (Eigen::Index i = 0; i < head_dim_; ++i) keys_.push_back(key(i));
    for (Eigen::Index i = 0; i < head_dim_; ++i) values_.push_back(value(i));
  }

  Eigen::Index size() const { return head_dim_ == 0 ? 0 : static_cast<Eigen::Index>(keys_.size()) / head_dim_; }
  bool empty() const { return keys_.empty(); }
  int head_dim() const { return head_dim_; }
  ConstMap keys() const { return {keys_.data(), size(), head_dim_}; }
  ConstMap values() const { return {values_.data(), size(), head_dim_}; }

 private:
  int head_dim_;
  std::vector<double> keys_;
  std::vector<double> values_;
};

/// [layer][head] grid of KvRows.
class KvStore {
 public:
  KvStore() = default;
  KvStore(int n_layers, int n_heads, int head_dim);

  KvRows& at(int layer, int head) { return grid_.at(index(layer, head)); }
  const KvRows& at(int layer, int head) const { return grid_.at(index(layer, head)); }
  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  Eigen::Index length() const { return grid_.empty() ? 0 : grid_.front().size(); }

 private:
  std::size_t index(int layer, int head) const { return static_cast<std::size_t>(layer * n_heads_ + head); }
  int n_layers_ = 0;
  int n_heads_ = 0;
  std::vector<KvRows> grid_;
};

struct KvCache {
  KvStore store;
  int max_seq = 0;
  Eigen::Index length() const { return store.length(); }
};

/// Rotary embedding applied in place to every head of each row, row r at positions[r].
void apply_rotary(Matrix& x, int n_heads, int head_dim, std::span<const int> positions);

Vector rms_norm(const Eigen::Ref<const RowVector>& x, const Vector& gain);

struct Projection {
  Matrix q;  // rotary applied, pre-scaled by 1/sqrt(head_dim)
  Matrix k;  // rotary applied
  Matrix v;
};

/// Embedding rows for tokens.
Matrix embed(const Weights& weights, std::span<const Token> tokens);
Projection project_qkv(const Weights& weights, int layer, const Matrix& hidden, std::span<const int> positions);
/// Output projection of concatenated head outputs plus residual and MLP, in place on hidden.
void finish_layer(const Weights& weights, int layer, Matrix& hidden, const Matrix& attention);
/// rows x vocab logits.
Matrix final_logits(const Weights& weights, const Matrix& hidden);

/// Softmax attention sigma(Q K^T) V. With more than one query row a causal mask
/// aligns the last query with the last key.
template <typename Scalar>
MatrixX<Scalar> attention_reference(const MatrixX<Scalar>& q, const MatrixX<Scalar>& k, const MatrixX<Scalar>& v) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.rows() == 0) {
    throw DimensionError("attention_reference: incompatible Q/K/V shapes");
  }
  if (q.rows() > k.rows()) throw DimensionError("attention_reference: more queries than keys");
  const Eigen::Index offset = k.rows() - q.rows();
  MatrixX<Scalar> out(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const Eigen::Index visible = q.rows() == 1 ? k.rows() : offset + i + 1;
    const VectorX<Scalar> scores = k.topRows(visible) * q.row(i).transpose();
    const auto stats = stable_softmax_stats(scores);
    out.row(i) = stats.weights.transpose() * v.topRows(visible);
  }
  return out;
}

/// Runs one decode step for a batch of sequences. `attend(layer, projection)`
/// must return the concatenated per-head attention outputs (rows x d_model);
/// it is where the caller keeps its KV state.
template <typename Attend>
Matrix decode_batch(const Weights& weights, std::span<const Token> tokens, std::span<const int> positions,
                    Attend&& attend) {
  Matrix hidden = embed(weights, tokens);
  for (int layer = 0; layer < weights.config.n_layers; ++layer) {
    const Projection proj = project_qkv(weights, layer, hidden, positions);
    const Matrix attention = attend(layer, proj);
    finish_layer(weights, layer, hidden, attention);
  }
  return final_logits(weights, hidden);
}

struct PrefillResult {
  KvCache cache;
  Vector logits;
};

PrefillResult prefill(const Weights& weights, std::span<const Token> tokens);

/// Prefill of several prompts stacked into one pass over the weights.
std::vector<PrefillResult> prefill_batch(const Weights& weights, std::span<const std::vector<Token>> prompts);

/// Appends the token's K/V and returns next-token logits.
Vector decode_step_monolithic(const Weights& weights, KvCache& cache, Token token);

/// Batched monolithic step over independent caches.
Matrix decode_step_batch(const Weights& weights, std::span<KvCache* const> caches, std::span<const Token> tokens);

/// Next-token logits of the last position, recomputing every position without a cache.
Vector forward_full(const Weights& weights, std::span<const Token> tokens);

struct SamplingStrategy {
  enum class Kind { greedy, temperature };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static SamplingStrategy greedy() { return {}; }
  static SamplingStrategy tempered(double temperature, std::uint64_t seed) {
    return {Kind::temperature, temperature, seed};
  }
};

class Sampler {
 public:
  explicit Sampler(SamplingStrategy strategy) : strategy_(strategy), rng_(strategy.seed) {}
  Token next(const Vector& logits);
  const SamplingStrategy& strategy() const { return strategy_; }

 private:
  SamplingStrategy strategy_;
  Rng rng_;
};

/// Greedy takes the lowest index among maximal logits.
Token argmax_token(const Vector& logits);
Token sample_token(const Vector& logits, const SamplingStrategy& strategy);

/// Prefill then greedy-decode up to max_new tokens after the first, stopping at EOS.
/// The returned stream starts with the prefill token.
std::vector<Token> generate_monolithic(const Weights& weights, std::span<const Token> prompt, int max_new);

}  // namespace ospd
