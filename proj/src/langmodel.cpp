#include "ospd/langmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ospd {

namespace {

TokenSeq tail_of(std::span<const Token> context, std::size_t width) {
  const std::size_t take = std::min(width, context.size());
  return TokenSeq(context.end() - static_cast<std::ptrdiff_t>(take), context.end());
}

bool ends_with(std::span<const Token> context, const TokenSeq& tail) {
  if (tail.size() > context.size()) return false;
  return std::equal(tail.begin(), tail.end(), context.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

}  // namespace

double seq_logprob(const ProbOracle& oracle, std::span<const Token> tokens, std::span<const Token> context) {
  TokenSeq history(context.begin(), context.end());
  double total = 0.0;
  for (Token t : tokens) {
    const auto dist = oracle.next_dist(history);
    total += std::log(dist.at(t));
    history.push_back(t);
  }
  return total;
}

std::vector<double> apply_temperature(std::span<const double> dist, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  // In log space so large tau does not underflow.
  std::vector<double> logp(dist.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < dist.size(); ++i) {
    logp[i] = std::log(dist[i]) / tau;
    top = std::max(top, logp[i]);
  }
  double z = 0.0;
  for (auto& v : logp) z += (v = std::exp(v - top));
  for (auto& v : logp) v /= z;
  return logp;
}

double max_log_gap(const ProbOracle& a, const ProbOracle& b, std::span<const TokenSeq> sequences) {
  double gap = 0.0;
  for (const auto& s : sequences) gap = std::max(gap, std::abs(seq_logprob(a, s) - seq_logprob(b, s)));
  return gap;
}

TemperedOracle::TemperedOracle(const ProbOracle& base, double tau) : base_(base), tau_(tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
}

std::vector<double> TemperedOracle::next_dist(std::span<const Token> context) const {
  auto dist = base_.next_dist(context);
  if (tau_ == 1.0) return dist;
  return apply_temperature(dist, tau_);
}

NgramModel::NgramModel(int order, double smoothing, int vocab_size)
    : order_(order), smoothing_(smoothing), vocab_size_(vocab_size) {
  if (order < 1) throw ConfigError("n-gram order must be at least 1");
  if (!(smoothing > 0.0)) throw ConfigError("smoothing must be positive");
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
}

std::vector<double> NgramModel::next_dist(std::span<const Token> context) const {
  const auto v = static_cast<double>(vocab_size_);
  std::vector<double> dist(static_cast<std::size_t>(vocab_size_), 1.0 / v);
  const auto it = table_.find(tail_of(context, static_cast<std::size_t>(order_ - 1)));
  if (it == table_.end()) return dist;
  const double denom = static_cast<double>(it->second.total) + smoothing_ * v;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    dist[i] = (static_cast<double>(it->second.counts[i]) + smoothing_) / denom;
  }
  return dist;
}

std::uint64_t NgramModel::count(const TokenSeq& context, Token next) const {
  const auto it = table_.find(context);
  return it == table_.end() ? 0 : it->second.counts.at(next);
}

NgramModel train_ngram(std::span<const TokenSeq> corpus, int order, double smoothing, int vocab_size) {
  if (corpus.empty()) throw CorpusError("empty corpus");
  if (vocab_size == 0) {
    Token top = 0;
    bool any = false;
    for (const auto& seq : corpus) {
      for (Token t : seq) {
        top = std::max(top, t);
        any = true;
      }
    }
    if (!any) throw CorpusError("corpus has no tokens");
    vocab_size = static_cast<int>(top) + 1;
  }
  NgramModel model(order, smoothing, vocab_size);
  const auto width = static_cast<std::size_t>(order - 1);
  for (const auto& seq : corpus) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] >= static_cast<Token>(vocab_size)) throw CorpusError("token id outside vocabulary");
      const std::size_t start = i >= width ? i - width : 0;
      TokenSeq ctx(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.begin() + static_cast<std::ptrdiff_t>(i));
      auto& row = model.table_[ctx];
      if (row.counts.empty()) row.counts.assign(static_cast<std::size_t>(vocab_size), 0);
      ++row.counts[seq[i]];
      ++row.total;
    }
  }
  return model;
}

TableOracle::TableOracle(int context_width, std::vector<double> fallback)
    : context_width_(context_width), fallback_(std::move(fallback)) {}

void TableOracle::set(TokenSeq context_tail, std::vector<double> dist) {
  if (dist.size() != fallback_.size()) throw DimensionError("TableOracle: distribution size");
  table_[std::move(context_tail)] = std::move(dist);
}

std::vector<double> TableOracle::next_dist(std::span<const Token> context) const {
  const auto it = table_.find(tail_of(context, static_cast<std::size_t>(context_width_)));
  return it == table_.end() ? fallback_ : it->second;
}

PerturbedOracle::PerturbedOracle(const ProbOracle& base, TokenSeq context_tail, Token token, double log_factor)
    : base_(base), tail_(std::move(context_tail)), token_(token), log_factor_(log_factor) {}

std::vector<double> PerturbedOracle::next_dist(std::span<const Token> context) const {
  auto dist = base_.next_dist(context);
  if (!ends_with(context, tail_)) return dist;
  const double p = dist.at(token_);
  const double q = p * std::exp(log_factor_);
  if (!(q < 1.0)) throw ConfigError("PerturbedOracle: perturbed probability reaches 1");
  const double rest = (1.0 - q) / (1.0 - p);
  for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = i == token_ ? q : dist[i] * rest;
  return dist;
}

TransformerOracle::TransformerOracle(std::shared_ptr<const Weights> weights, Token bos)
    : weights_(std::move(weights)), bos_(bos) {}

std::vector<double> TransformerOracle::next_dist(std::span<const Token> context) const {
  TokenSeq input{bos_};
  input.insert(input.end(), context.begin(), context.end());
  const Vector probs = softmax(forward_full(*weights_, input));
  return {probs.data(), probs.data() + probs.size()};
}

Token Vocab::add(const std::string& word) {
  const auto [it, inserted] = ids_.try_emplace(word, static_cast<Token>(words_.size()));
  if (inserted) words_.push_back(word);
  return it->second;
}

Token Vocab::id(const std::string& word) const {
  const auto it = ids_.find(word);
  if (it == ids_.end()) throw CorpusError("unknown token '" + word + "'");
  return it->second;
}

TokenSeq Vocab::encode(const std::string& text) const {
  std::istringstream in(text);
  TokenSeq out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (!out.empty()) out += ' ';
    out += t < words_.size() ? words_[t] : "<" + std::to_string(t) + ">";
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (std::size_t i = 0; i < words_.size(); ++i) out << words_[i] << '\t' << i << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read " + path.string());
  std::vector<std::pair<Token, std::string>> entries;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw CorpusError("vocab line without tab: " + line);
    entries.emplace_back(static_cast<Token>(std::stoul(line.substr(tab + 1))), line.substr(0, tab));
  }
  std::sort(entries.begin(), entries.end());
  Vocab v;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != i) throw CorpusError("vocab ids are not contiguous from 0");
    v.add(entries[i].second);
  }
  return v;
}

std::vector<TokenSeq> tokenize_corpus(const std::string& text, Vocab& vocab) {
  std::vector<TokenSeq> out;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    std::istringstream words(line);
    TokenSeq seq;
    for (std::string w; words >> w;) seq.push_back(vocab.add(w));
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

std::vector<TokenSeq> read_corpus(const std::filesystem::path& path, Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return tokenize_corpus(buf.str(), vocab);
}

}  // namespace ospd
