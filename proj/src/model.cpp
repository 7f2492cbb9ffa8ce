#include "ospd/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ospd {

namespace {

constexpr char kWeightMagic[6] = {'O', 'S', 'P', 'D', 'W', '1'};
constexpr double kRotaryBase = 10000.0;
constexpr double kNormEps = 1e-6;

Vector gain_vector(std::uint64_t seed, int n) {
  Matrix noise = seeded_matrix(seed, 1, n, 0.1);
  return (noise.row(0).array() + 1.0).matrix().transpose();
}

template <typename F>
void for_each_matrix(const Weights& w, F&& f) {
  f(w.embedding);
  for (const auto& layer : w.layers) {
    f(Matrix(layer.attn_norm.transpose()));
    f(layer.wq);
    f(layer.wk);
    f(layer.wv);
    f(layer.wo);
    f(Matrix(layer.mlp_norm.transpose()));
    f(layer.w_gate);
    f(layer.w_up);
    f(layer.w_down);
  }
  f(Matrix(w.final_norm.transpose()));
  f(w.unembedding);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw ConfigError("weight file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(m.data()[i]);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

void read_matrix(std::istream& in, Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw ConfigError("weight file truncated");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    m.data()[i] = std::bit_cast<double>(bits);
  }
}

void read_vector(std::istream& in, Vector& v) {
  Matrix row(1, v.size());
  read_matrix(in, row);
  v = row.row(0).transpose();
}

void check_tokens(const ModelConfig& config, std::span<const Token> tokens) {
  for (Token t : tokens) {
    if (t >= static_cast<Token>(config.vocab_size)) throw ConfigError("token id outside vocabulary");
  }
}

}  // namespace

void WeightCopyCounter::acquire() {
  const long now = ++live_;
  long prev = peak_.load();
  while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
  }
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || head_dim < 1) throw ConfigError("layers, heads and head_dim must be positive");
  if (d_model != n_heads * head_dim) throw ConfigError("d_model must equal n_heads * head_dim");
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even (rotary pairs)");
  if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4");
  if (max_seq < 2) throw ConfigError("max_seq must be at least 2");
}

bool Weights::operator==(const Weights& other) const {
  if (config.n_layers != other.config.n_layers || config.n_heads != other.config.n_heads ||
      config.d_model != other.config.d_model || config.head_dim != other.config.head_dim ||
      config.vocab_size != other.config.vocab_size || config.max_seq != other.config.max_seq ||
      config.seed != other.config.seed || layers.size() != other.layers.size()) {
    return false;
  }
  std::vector<Matrix> lhs;
  std::vector<Matrix> rhs;
  for_each_matrix(*this, [&](const Matrix& m) { lhs.push_back(m); });
  for_each_matrix(other, [&](const Matrix& m) { rhs.push_back(m); });
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (lhs[i].rows() != rhs[i].rows() || lhs[i].cols() != rhs[i].cols()) return false;
    if (std::memcmp(lhs[i].data(), rhs[i].data(), sizeof(double) * lhs[i].size()) != 0) return false;
  }
  return true;
}

Weights init_model(const ModelConfig& config) {
  config.validate();
  SplitMix64 seeds(config.seed);
  const int d = config.d_model;
  const int ff = config.ffn_dim();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sff = 1.0 / std::sqrt(static_cast<double>(ff));

  Weights w;
  w.config = config;
  w.embedding = seeded_matrix(seeds.next(), config.vocab_size, d, 1.0);
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : w.layers) {
    layer.attn_norm = gain_vector(seeds.next(), d);
    layer.wq = seeded_matrix(seeds.next(), d, d, sd);
    layer.wk = seeded_matrix(seeds.next(), d, d, sd);
    layer.wv = seeded_matrix(seeds.next(), d, d, sd);
    layer.wo = seeded_matrix(seeds.next(), d, d, sd);
    layer.mlp_norm = gain_vector(seeds.next(), d);
    layer.w_gate = seeded_matrix(seeds.next(), d, ff, sd);
    layer.w_up = seeded_matrix(seeds.next(), d, ff, sd);
    layer.w_down = seeded_matrix(seeds.next(), ff, d, sff);
  }
  w.final_norm = gain_vector(seeds.next(), d);
  w.unembedding = seeded_matrix(seeds.next(), d, config.vocab_size, 3.0 * sd);
  return w;
}

void save_weights(const Weights& weights, std::ostream& out) {
  const auto& c = weights.config;
  out.write(kWeightMagic, sizeof(kWeightMagic));
  for (std::uint32_t v : {static_cast<std::uint32_t>(c.n_layers), static_cast<std::uint32_t>(c.n_heads),
                          static_cast<std::uint32_t>(c.d_model), static_cast<std::uint32_t>(c.head_dim),
                          static_cast<std::uint32_t>(c.vocab_size), static_cast<std::uint32_t>(c.max_seq), c.seed}) {
    write_u32(out, v);
  }
  for_each_matrix(weights, [&](const Matrix& m) { write_matrix(out, m); });
  if (!out) throw ConfigError("failed writing weights");
}

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path.string());
  save_weights(weights, out);
}

Weights load_weights(std::istream& in) {
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kWeightMagic, 6) != 0) throw ConfigError("bad weight file magic");
  ModelConfig c;
  c.n_layers = static_cast<int>(read_u32(in));
  c.n_heads = static_cast<int>(read_u32(in));
  c.d_model = static_cast<int>(read_u32(in));
  c.head_dim = static_cast<int>(read_u32(in));
  c.vocab_size = static_cast<int>(read_u32(in));
  c.max_seq = static_cast<int>(read_u32(in));
  c.seed = read_u32(in);
  c.validate();

  const int d = c.d_model;
  const int ff = c.ffn_dim();
  Weights w;
  w.config = c;
  w.embedding.resize(c.vocab_size, d);
  read_matrix(in, w.embedding);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& layer : w.layers) {
    layer.attn_norm.resize(d);
    read_vector(in, layer.attn_norm);
    for (Matrix* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
      m->resize(d, d);
      read_matrix(in, *m);
    }
    layer.mlp_norm.resize(d);
    read_vector(in, layer.mlp_norm);
    layer.w_gate.resize(d, ff);
    read_matrix(in, layer.w_gate);
    layer.w_up.resize(d, ff);
    read_matrix(in, layer.w_up);
    layer.w_down.resize(ff, d);
    read_matrix(in, layer.w_down);
  }
  w.final_norm.resize(d);
  read_vector(in, w.final_norm);
  w.unembedding.resize(d, c.vocab_size);
  read_matrix(in, w.unembedding);
  return w;
}

Weights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return load_weights(in);
}

KvStore::KvStore(int n_layers, int n_heads, int head_dim)
    : n_layers_(n_layers), n_heads_(n_heads), grid_(static_cast<std::size_t>(n_layers * n_heads), KvRows(head_dim)) {}

void apply_rotary(Matrix& x, int n_heads, int head_dim, std::span<const int> positions) {
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) throw DimensionError("apply_rotary: positions/rows");
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    for (int pair = 0; pair < head_dim / 2; ++pair) {
      const double theta = pos * std::pow(kRotaryBase, -2.0 * pair / head_dim);
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      for (int h = 0; h < n_heads; ++h) {
        const Eigen::Index i = h * head_dim + 2 * pair;
        const double a = x(r, i);
        const double b = x(r, i + 1);
        x(r, i) = a * c - b * s;
        x(r, i + 1) = a * s + b * c;
      }
    }
  }
}

Vector rms_norm(const Eigen::Ref<const RowVector>& x, const Vector& gain) {
  const double ms = x.squaredNorm() / static_cast<double>(x.size());
  return (x.transpose().array() / std::sqrt(ms + kNormEps) * gain.array()).matrix();
}

Matrix embed(const Weights& weights, std::span<const Token> tokens) {
  check_tokens(weights.config, tokens);
  Matrix hidden(static_cast<Eigen::Index>(tokens.size()), weights.config.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    hidden.row(static_cast<Eigen::Index>(i)) = weights.embedding.row(tokens[i]);
  }
  return hidden;
}

Projection project_qkv(const Weights& weights, int layer, const Matrix& hidden, std::span<const int> positions) {
  const auto& c = weights.config;
  const auto& lw = weights.layers.at(static_cast<std::size_t>(layer));
  Matrix normed(hidden.rows(), hidden.cols());
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) normed.row(r) = rms_norm(hidden.row(r), lw.attn_norm).transpose();
  Projection p{matmul(normed, lw.wq), matmul(normed, lw.wk), matmul(normed, lw.wv)};
  apply_rotary(p.q, c.n_heads, c.head_dim, positions);
  apply_rotary(p.k, c.n_heads, c.head_dim, positions);
  p.q *= 1.0 / std::sqrt(static_cast<double>(c.head_dim));
  return p;
}

void finish_layer(const Weights& weights, int layer, Matrix& hidden, const Matrix& attention) {
  const auto& lw = weights.layers.at(static_cast<std::size_t>(layer));
  hidden += matmul(attention, lw.wo);
  Matrix normed(hidden.rows(), hidden.cols());
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) normed.row(r) = rms_norm(hidden.row(r), lw.mlp_norm).transpose();
  const Matrix gate = matmul(normed, lw.w_gate);
  const Matrix up = matmul(normed, lw.w_up);
  // SwiGLU
  const Matrix act = (gate.array() / (1.0 + (-gate.array()).exp()) * up.array()).matrix();
  hidden += matmul(act, lw.w_down);
}

Matrix final_logits(const Weights& weights, const Matrix& hidden) {
  Matrix normed(hidden.rows(), hidden.cols());
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    normed.row(r) = rms_norm(hidden.row(r), weights.final_norm).transpose();
  }
  return matmul(normed, weights.unembedding);
}

std::vector<PrefillResult> prefill_batch(const Weights& weights, std::span<const std::vector<Token>> prompts) {
  const auto& c = weights.config;
  std::vector<Token> stacked;
  std::vector<int> positions;
  std::vector<Eigen::Index> offsets{0};
  for (const auto& p : prompts) {
    if (p.empty()) throw CacheError("prefill: empty prompt");
    if (static_cast<int>(p.size()) > c.max_seq) throw CacheError("prefill: prompt longer than max_seq");
    stacked.insert(stacked.end(), p.begin(), p.end());
    for (std::size_t i = 0; i < p.size(); ++i) positions.push_back(static_cast<int>(i));
    offsets.push_back(offsets.back() + static_cast<Eigen::Index>(p.size()));
  }

  std::vector<PrefillResult> results;
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    results.push_back({KvCache{KvStore(c.n_layers, c.n_heads, c.head_dim), c.max_seq}, Vector()});
  }

  Matrix hidden = embed(weights, stacked);
  for (int layer = 0; layer < c.n_layers; ++layer) {
    const Projection p = project_qkv(weights, layer, hidden, positions);
    Matrix attention(hidden.rows(), c.d_model);
    for (std::size_t b = 0; b < prompts.size(); ++b) {
      const Eigen::Index start = offsets[b];
      const Eigen::Index len = offsets[b + 1] - start;
      for (int h = 0; h < c.n_heads; ++h) {
        const Eigen::Index col = h * c.head_dim;
        const Matrix qh = p.q.block(start, col, len, c.head_dim);
        const Matrix kh = p.k.block(start, col, len, c.head_dim);
        const Matrix vh = p.v.block(start, col, len, c.head_dim);
        auto& rows = results[b].cache.store.at(layer, h);
        for (Eigen::Index r = 0; r < len; ++r) rows.append(kh.row(r), vh.row(r));
        attention.block(start, col, len, c.head_dim) = attention_reference<double>(qh, kh, vh);
      }
    }
    finish_layer(weights, layer, hidden, attention);
  }
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    results[b].logits = final_logits(weights, hidden.middleRows(offsets[b + 1] - 1, 1)).row(0).transpose();
  }
  return results;
}

PrefillResult prefill(const Weights& weights, std::span<const Token> tokens) {
  if (tokens.empty()) throw CacheError("prefill: empty prompt");
  const std::vector<Token> one(tokens.begin(), tokens.end());
  return std::move(prefill_batch(weights, std::span(&one, 1)).front());
}

Matrix decode_step_batch(const Weights& weights, std::span<KvCache* const> caches, std::span<const Token> tokens) {
  const auto& c = weights.config;
  if (caches.size() != tokens.size()) throw DimensionError("decode_step_batch: caches/tokens size");
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < caches.size(); ++i) {
    const auto len = caches[i]->length();
    if (len == 0) throw CacheError("decode on an empty cache");
    if (len >= caches[i]->max_seq) throw CacheError("decode on a full cache");
    positions[i] = static_cast<int>(len);
  }
  return decode_batch(weights, tokens, positions, [&](int layer, const Projection& p) {
    Matrix attention(p.q.rows(), c.d_model);
    for (std::size_t i = 0; i < caches.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (int h = 0; h < c.n_heads; ++h) {
        const Eigen::Index col = h * c.head_dim;
        auto& rows = caches[i]->store.at(layer, h);
        rows.append(p.k.row(r).segment(col, c.head_dim), p.v.row(r).segment(col, c.head_dim));
        const Matrix q = p.q.row(r).segment(col, c.head_dim);
        attention.row(r).segment(col, c.head_dim) =
            attention_reference<double>(q, Matrix(rows.keys()), Matrix(rows.values())).row(0);
      }
    }
    return attention;
  });
}

Vector decode_step_monolithic(const Weights& weights, KvCache& cache, Token token) {
  KvCache* caches[] = {&cache};
  const Token tokens[] = {token};
  return decode_step_batch(weights, caches, tokens).row(0).transpose();
}

Vector forward_full(const Weights& weights, std::span<const Token> tokens) {
  return prefill(weights, tokens).logits;
}

Token argmax_token(const Vector& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return static_cast<Token>(best);
}

Token Sampler::next(const Vector& logits) {
  if (strategy_.kind == SamplingStrategy::Kind::greedy) return argmax_token(logits);
  if (strategy_.temperature <= 0.0) throw ConfigError("sampling temperature must be positive");
  const Vector probs = softmax(logits / strategy_.temperature);
  const double u = rng_.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(probs.size() - 1);
}

Token sample_token(const Vector& logits, const SamplingStrategy& strategy) { return Sampler(strategy).next(logits); }

std::vector<Token> generate_monolithic(const Weights& weights, std::span<const Token> prompt, int max_new) {
  auto pre = prefill(weights, prompt);
  std::vector<Token> out{argmax_token(pre.logits)};
  const Token eos = weights.config.eos();
  for (int step = 0; step < max_new && out.back() != eos; ++step) {
    out.push_back(argmax_token(decode_step_monolithic(weights, pre.cache, out.back())));
  }
  return out;
}

}  // namespace ospd
