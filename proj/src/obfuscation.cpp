#include "ospd/obfuscation.hpp"

#include <sodium.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ospd {

namespace {

std::uint64_t hmac_u64(const std::string& key, const std::string& label, std::uint64_t session, std::uint32_t counter) {
  static const int init = sodium_init();
  (void)init;
  unsigned char message[64];
  std::size_t len = 0;
  for (char c : label.substr(0, 48)) message[len++] = static_cast<unsigned char>(c);
  for (int i = 0; i < 8; ++i) message[len++] = static_cast<unsigned char>(session >> (8 * i));
  for (int i = 0; i < 4; ++i) message[len++] = static_cast<unsigned char>(counter >> (8 * i));

  crypto_auth_hmacsha256_state state;
  crypto_auth_hmacsha256_init(&state, reinterpret_cast<const unsigned char*>(key.data()), key.size());
  crypto_auth_hmacsha256_update(&state, message, len);
  unsigned char mac[crypto_auth_hmacsha256_BYTES];
  crypto_auth_hmacsha256_final(&state, mac);
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= static_cast<std::uint64_t>(mac[i]) << (8 * i);
  return out;
}

struct Candidate {
  TokenSeq seq;
  double logp = 0.0;
  bool authentic = false;
};

TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

FakeNgramSet run_gqs(const TaggedPrompt& prompt, std::size_t segment, double epsilon, int lambda_max,
                     const ProbOracle& tempered) {
  const Span& span = prompt.spans.at(segment);
  const std::size_t n = span.length;
  if (n == 0) throw ConfigError("gqs: empty segment");
  if (!(epsilon > 0.0)) throw ConfigError("gqs: epsilon must be positive");

  const TokenSeq context = prompt.left_context(segment);
  const TokenSeq tag = prompt.segment(segment);
  const double width = epsilon / static_cast<double>(n);
  const auto vocab = static_cast<Token>(tempered.vocab_size());

  std::vector<Candidate> frontier{{TokenSeq{}, 0.0, true}};
  double authentic_logp = 0.0;
  for (std::size_t len = 1; len <= n; ++len) {
    const TokenSeq ref_prefix(tag.begin(), tag.begin() + static_cast<std::ptrdiff_t>(len - 1));
    const auto ref_dist = tempered.next_dist(concat(context, ref_prefix));
    const double log_rho = std::log(ref_dist.at(tag[len - 1]));
    long bin = quantized_bin(log_rho, width);
    // floor() of a rounded quotient can land one bin off; the authentic token
    // must sit inside [lo, hi) as evaluated below.
    if (!(static_cast<double>(bin) * width <= log_rho)) --bin;
    if (!(log_rho < static_cast<double>(bin + 1) * width)) ++bin;
    const double lo = static_cast<double>(bin) * width;
    const double hi = static_cast<double>(bin + 1) * width;
    authentic_logp += log_rho;

    std::vector<Candidate> next;
    for (const auto& cand : frontier) {
      const auto dist = cand.authentic ? ref_dist : tempered.next_dist(concat(context, cand.seq));
      for (Token x = 0; x < vocab; ++x) {
        const double lp = std::log(dist[x]);
        if (lo <= lp && lp < hi) {
          Candidate c{cand.seq, cand.logp + lp, cand.authentic && x == tag[len - 1]};
          c.seq.push_back(x);
          next.push_back(std::move(c));
        }
      }
    }

    std::sort(next.begin(), next.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.authentic != b.authentic) return a.authentic;
      const double da = std::abs(a.logp - authentic_logp);
      const double db = std::abs(b.logp - authentic_logp);
      if (da != db) return da < db;
      return a.seq < b.seq;
    });
    const std::size_t keep = static_cast<std::size_t>(lambda_max) + 1;
    if (next.size() > keep) next.resize(keep);
    frontier = std::move(next);
  }

  FakeNgramSet out;
  out.segment = segment;
  out.span = span;
  out.authentic = tag;
  out.includes_authentic = !frontier.empty() && frontier.front().authentic;
  for (auto& c : frontier) out.candidates.push_back(std::move(c.seq));
  return out;
}

}  // namespace

void TaggedPrompt::validate() const {
  std::size_t prev_end = 0;
  for (const auto& s : spans) {
    if (s.length == 0) throw ConfigError("span of length zero");
    if (s.start < prev_end) throw ConfigError("spans overlap or are unsorted");
    if (s.end() > tokens.size()) throw ConfigError("span out of bounds");
    prev_end = s.end();
  }
}

TokenSeq TaggedPrompt::segment(std::size_t i) const {
  const Span& s = spans.at(i);
  return TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(s.start),
                  tokens.begin() + static_cast<std::ptrdiff_t>(s.end()));
}

TokenSeq TaggedPrompt::left_context(std::size_t i) const {
  return TokenSeq(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(spans.at(i).start));
}

void ObfuscationConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (lambda_max < 0 || lambda_min < 0) throw ConfigError("lambda bounds must be non-negative");
  if (lambda_min > lambda_max) throw ConfigError("lambda_min exceeds lambda_max");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (prf_key.empty()) throw ConfigError("prf_key must not be empty");
}

void TagRules::add_literal(std::string category, const std::string& words) {
  Rule r{std::move(category), {}, std::nullopt};
  std::istringstream in(words);
  for (std::string w; in >> w;) r.literal.push_back(w);
  if (r.literal.empty()) throw ConfigError("empty literal tag rule");
  rules_.push_back(std::move(r));
}

void TagRules::add_regex(std::string category, const std::string& regex) {
  rules_.push_back(Rule{std::move(category), {}, std::regex(regex)});
}

TagRules TagRules::parse(const std::string& text) {
  TagRules rules;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("tag rule without tab: " + line);
    std::string category = line.substr(0, tab);
    std::string pattern = line.substr(tab + 1);
    if (pattern.size() >= 2 && pattern.front() == '/' && pattern.back() == '/') {
      rules.add_regex(std::move(category), pattern.substr(1, pattern.size() - 2));
    } else {
      rules.add_literal(std::move(category), pattern);
    }
  }
  return rules;
}

TagRules TagRules::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

TaggedPrompt tag_sensitive(std::span<const Token> tokens, const TagRules& rules, const Vocab& vocab) {
  if (rules.empty()) throw ConfigError("tag_sensitive: no rules");
  TaggedPrompt out{TokenSeq(tokens.begin(), tokens.end()), {}};
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t best_len = 0;
    const TagRules::Rule* best = nullptr;
    for (const auto& rule : rules.rules()) {
      std::size_t len = 0;
      if (rule.pattern) {
        if (std::regex_match(vocab.word(tokens[i]), *rule.pattern)) len = 1;
      } else if (i + rule.literal.size() <= tokens.size()) {
        bool hit = true;
        for (std::size_t j = 0; j < rule.literal.size() && hit; ++j) {
          hit = vocab.word(tokens[i + j]) == rule.literal[j];
        }
        if (hit) len = rule.literal.size();
      }
      if (len > best_len) {
        best_len = len;
        best = &rule;
      }
    }
    if (best) {
      out.spans.push_back({i, best_len, best->category});
      i += best_len;
    } else {
      ++i;
    }
  }
  return out;
}

long quantized_bin(double logp, double width) { return static_cast<long>(std::floor(logp / width)); }

FakeNgramSet gqs(const TaggedPrompt& prompt, std::size_t segment, const ObfuscationConfig& config,
                 const ProbOracle& oracle) {
  prompt.validate();
  const TemperedOracle tempered(oracle, config.temperature);
  return run_gqs(prompt, segment, config.epsilon, config.lambda_max, tempered);
}

bool verify_bound(std::span<const Token> original, std::span<const Token> fake, std::span<const Token> context,
                  double epsilon, const ProbOracle& oracle) {
  if (original.size() != fake.size()) throw DimensionError("verify_bound: segment lengths differ");
  return std::abs(seq_logprob(oracle, fake, context) - seq_logprob(oracle, original, context)) <= epsilon;
}

std::vector<FakeNgramSet> multi_segment_gqs(const TaggedPrompt& prompt, const ObfuscationConfig& config,
                                            const ProbOracle& oracle) {
  prompt.validate();
  if (prompt.spans.empty()) throw ConfigError("multi_segment_gqs: no tagged segments");
  const double per_segment = config.epsilon / static_cast<double>(prompt.spans.size());
  const TemperedOracle tempered(oracle, config.temperature);
  std::vector<std::future<FakeNgramSet>> jobs;
  for (std::size_t s = 0; s < prompt.spans.size(); ++s) {
    jobs.push_back(std::async(std::launch::async, [&, s] {
      return run_gqs(prompt, s, per_segment, config.lambda_max, tempered);
    }));
  }
  std::vector<FakeNgramSet> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

double combined_log_gap(const TaggedPrompt& original, std::span<const Token> replaced, const ProbOracle& oracle) {
  if (replaced.size() != original.tokens.size()) throw DimensionError("combined_log_gap: prompt lengths differ");
  double total = 0.0;
  for (std::size_t s = 0; s < original.spans.size(); ++s) {
    const Span& span = original.spans[s];
    const auto ctx = original.left_context(s);
    const auto fake = replaced.subspan(span.start, span.length);
    total += std::abs(seq_logprob(oracle, fake, ctx) - seq_logprob(oracle, original.segment(s), ctx));
  }
  return total;
}

std::size_t prf_index(const std::string& key, std::uint64_t session_id, std::size_t lambda) {
  const std::uint64_t range = static_cast<std::uint64_t>(lambda) + 1;
  if (range == 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  for (std::uint32_t counter = 0;; ++counter) {
    const std::uint64_t x = hmac_u64(key, "ospd.prf.index", session_id, counter);
    if (x < limit) return static_cast<std::size_t>(x % range);
  }
}

VirtualPromptSet build_virtual_prompts(const TaggedPrompt& prompt, std::span<const FakeNgramSet> fake_sets,
                                       const ObfuscationConfig& config, std::uint64_t session_id) {
  config.validate();
  if (fake_sets.empty()) return plain_prompt_set(prompt.tokens);
  for (const auto& set : fake_sets) {
    if (!set.includes_authentic || set.candidates.empty() || set.candidates.front() != set.authentic) {
      throw ConfigError("fake set does not lead with the authentic n-gram");
    }
  }

  // Mixed-radix combination space; digit 0 of every segment is authentic.
  constexpr std::uint64_t kCap = std::uint64_t{1} << 62;
  std::uint64_t total = 1;
  for (const auto& set : fake_sets) {
    total = total > kCap / set.candidates.size() ? kCap : total * set.candidates.size();
  }
  const std::uint64_t available = total - 1;
  const auto lambda = static_cast<std::size_t>(std::min<std::uint64_t>(available, static_cast<std::uint64_t>(config.lambda_max)));
  if (lambda < static_cast<std::size_t>(config.lambda_min)) {
    throw ObfuscationAbort("only " + std::to_string(lambda) + " virtual prompts available, lambda_min is " +
                           std::to_string(config.lambda_min) + ": potential information leak");
  }

  std::vector<std::vector<std::size_t>> choices;
  if (available <= static_cast<std::uint64_t>(config.lambda_max)) {
    for (std::uint64_t code = 1; code < total; ++code) {
      std::vector<std::size_t> digits(fake_sets.size());
      std::uint64_t rest = code;
      for (std::size_t s = fake_sets.size(); s-- > 0;) {
        digits[s] = static_cast<std::size_t>(rest % fake_sets[s].candidates.size());
        rest /= fake_sets[s].candidates.size();
      }
      choices.push_back(std::move(digits));
    }
  } else {
    Rng rng(hmac_u64(config.prf_key, "ospd.chaff", session_id, 0));
    std::set<std::vector<std::size_t>> seen{std::vector<std::size_t>(fake_sets.size(), 0)};
    while (choices.size() < lambda) {
      std::vector<std::size_t> digits(fake_sets.size());
      for (std::size_t s = 0; s < fake_sets.size(); ++s) digits[s] = rng.index(fake_sets[s].candidates.size());
      if (seen.insert(digits).second) choices.push_back(std::move(digits));
    }
  }

  VirtualPromptSet out;
  out.lambda = lambda;
  out.idx = prf_index(config.prf_key, session_id, lambda);
  for (const auto& digits : choices) {
    TokenSeq p = prompt.tokens;
    for (std::size_t s = 0; s < fake_sets.size(); ++s) {
      const auto& cand = fake_sets[s].candidates[digits[s]];
      std::copy(cand.begin(), cand.end(), p.begin() + static_cast<std::ptrdiff_t>(fake_sets[s].span.start));
    }
    out.prompts.push_back(std::move(p));
  }
  out.prompts.insert(out.prompts.begin() + static_cast<std::ptrdiff_t>(out.idx), prompt.tokens);
  return out;
}

VirtualPromptSet plain_prompt_set(const TokenSeq& prompt) { return {{prompt}, 0, 0}; }

TokenSeq winnow(std::span<const TokenSeq> responses, std::size_t idx) {
  if (responses.empty()) throw std::out_of_range("winnow: no responses");
  if (idx >= responses.size()) throw std::out_of_range("winnow: index beyond lambda");
  return responses[idx];
}

std::string dump_virtual_prompts(const VirtualPromptSet& set, const Vocab* vocab) {
  std::ostringstream out;
  out << "lambda " << set.lambda << "\nidx " << set.idx << '\n';
  for (std::size_t i = 0; i < set.prompts.size(); ++i) {
    out << "prompt " << i << ':';
    if (vocab) {
      out << ' ' << vocab->decode(set.prompts[i]);
    } else {
      for (Token t : set.prompts[i]) out << ' ' << t;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace ospd
