#include "ospd/bench.hpp"

#include <algorithm>
#include <barrier>
#include <chrono>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace ospd {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct RepResult {
  std::vector<double> step_ms;
  std::vector<TokenSeq> outputs;
  double bytes = 0.0;
  long tokens = 0;
};

RepResult run_no_protection(const BenchConfig& config, const std::vector<TokenSeq>& prompts) {
  const Weights weights = init_model(config.model);
  RepResult rep;
  auto prefilled = prefill_batch(weights, prompts);
  std::vector<KvCache> caches;
  std::vector<Token> next;
  for (auto& p : prefilled) {
    caches.push_back(std::move(p.cache));
    next.push_back(argmax_token(p.logits));
    rep.outputs.push_back({next.back()});
  }
  const Token eos = config.model.eos();
  for (int step = 0; step < config.out_tokens; ++step) {
    std::vector<std::size_t> live;
    for (std::size_t u = 0; u < caches.size(); ++u) {
      if (rep.outputs[u].back() != eos) live.push_back(u);
    }
    if (live.empty()) break;
    std::vector<KvCache*> batch;
    std::vector<Token> tokens;
    for (auto u : live) {
      batch.push_back(&caches[u]);
      tokens.push_back(next[u]);
    }
    const auto t0 = Clock::now();
    const Matrix logits = decode_step_batch(weights, batch, tokens);
    rep.step_ms.push_back(ms_since(t0));
    for (std::size_t i = 0; i < live.size(); ++i) {
      next[live[i]] = argmax_token(logits.row(static_cast<Eigen::Index>(i)).transpose());
      rep.outputs[live[i]].push_back(next[live[i]]);
    }
  }
  return rep;
}

RepResult run_full_isolation(const BenchConfig& config, const std::vector<TokenSeq>& prompts) {
  const auto m = prompts.size();
  // One private model instance per user process.
  std::vector<Weights> instances;
  instances.reserve(m);
  for (std::size_t u = 0; u < m; ++u) instances.push_back(init_model(config.model));

  RepResult rep;
  rep.outputs.resize(m);
  std::mutex accelerator;
  std::vector<Clock::time_point> marks;
  marks.reserve(static_cast<std::size_t>(config.out_tokens) + 2);
  std::barrier sync(static_cast<std::ptrdiff_t>(m), [&]() noexcept { marks.push_back(Clock::now()); });
  const Token eos = config.model.eos();

  std::vector<std::thread> users;
  for (std::size_t u = 0; u < m; ++u) {
    users.emplace_back([&, u] {
      auto& out = rep.outputs[u];
      KvCache cache;
      {
        std::lock_guard lock(accelerator);
        auto p = prefill(instances[u], prompts[u]);
        cache = std::move(p.cache);
        out.push_back(argmax_token(p.logits));
      }
      sync.arrive_and_wait();
      for (int step = 0; step < config.out_tokens; ++step) {
        if (out.back() != eos) {
          std::lock_guard lock(accelerator);
          out.push_back(argmax_token(decode_step_monolithic(instances[u], cache, out.back())));
        }
        sync.arrive_and_wait();
      }
    });
  }
  for (auto& t : users) t.join();
  for (std::size_t i = 1; i < marks.size(); ++i) {
    rep.step_ms.push_back(std::chrono::duration<double, std::milli>(marks[i] - marks[i - 1]).count());
  }
  // Rounds after every user hit EOS do no work.
  long rounds = 0;
  for (const auto& o : rep.outputs) rounds = std::max(rounds, static_cast<long>(o.size()) - 1);
  rep.step_ms.resize(static_cast<std::size_t>(rounds));
  return rep;
}

RepResult run_spd(const BenchConfig& config, const std::vector<TokenSeq>& prompts, std::uint64_t rep_seed) {
  auto weights = std::make_shared<const Weights>(init_model(config.model));
  const int vocab = config.model.vocab_size;
  TableOracle uniform(0, std::vector<double>(static_cast<std::size_t>(vocab), 1.0 / vocab));
  ObfuscationConfig obf;
  obf.epsilon = 1.0;
  obf.lambda_max = config.lambda;
  obf.lambda_min = config.lambda;

  std::vector<std::unique_ptr<UserParty>> parties;
  std::uint32_t next_id = 0;
  for (std::size_t u = 0; u < prompts.size(); ++u) {
    UserParty::Options opts;
    opts.max_tokens = config.out_tokens;
    parties.push_back(std::make_unique<UserParty>(next_id, rep_seed * 1000 + u, WeightsHandle(weights), opts));
    TaggedPrompt prompt{prompts[u], {}};
    if (config.lambda > 0) prompt.spans.push_back({prompts[u].size() - 2, 2, "bench"});
    parties.back()->prefill(prompt, config.lambda > 0 ? &obf : nullptr, &uniform);
    next_id += static_cast<std::uint32_t>(parties.back()->stream_ids().size());
  }

  std::vector<UserParty*> users;
  for (auto& p : parties) users.push_back(p.get());
  Controller controller;
  SessionOptions options;
  options.transport = config.transport;
  const Transcript transcript = run_sessions(users, weights, controller, options);
  if (!transcript.killed.empty()) throw ProtocolError("bench session killed by controller");

  RepResult rep;
  rep.step_ms = transcript.step_ms;
  for (auto* u : users) {
    rep.outputs.push_back(authentic_response(*u, transcript));
    rep.tokens += static_cast<long>(rep.outputs.back().size()) - 1;
  }
  const CommReport comm = comm_accounting(transcript);
  rep.bytes = static_cast<double>(comm.bytes_to_user + comm.bytes_to_model);
  return rep;
}

}  // namespace

const char* mode_name(BenchMode mode) {
  switch (mode) {
    case BenchMode::no_protection: return "no_protection";
    case BenchMode::full_isolation: return "full_isolation";
    case BenchMode::spd: return "spd";
  }
  return "?";
}

BenchMode parse_mode(const std::string& name) {
  for (auto m : {BenchMode::no_protection, BenchMode::full_isolation, BenchMode::spd}) {
    if (name == mode_name(m)) return m;
  }
  throw ConfigError("unknown bench mode: " + name);
}

void BenchConfig::validate() const {
  model.validate();
  if (users < 1) throw ConfigError("bench: users must be >= 1");
  if (repetitions < 3) throw ConfigError("bench: repetitions must be >= 3");
  if (in_tokens < 2 || out_tokens < 1) throw ConfigError("bench: need in_tokens >= 2 and out_tokens >= 1");
  if (lambda < 0) throw ConfigError("bench: lambda must be >= 0");
  if (lambda > 0 && mode != BenchMode::spd) throw ConfigError("bench: lambda applies to spd only");
  if (in_tokens + out_tokens + 1 > model.max_seq) throw ConfigError("bench: in_tokens + out_tokens exceeds max_seq");
}

std::vector<TokenSeq> bench_prompts(const BenchConfig& config) {
  Rng rng(config.seed);
  std::vector<TokenSeq> prompts(static_cast<std::size_t>(config.users));
  for (auto& p : prompts) {
    for (int i = 0; i < config.in_tokens; ++i) {
      p.push_back(static_cast<Token>(rng.index(static_cast<std::uint64_t>(config.model.vocab_size - 1))));
    }
  }
  return prompts;
}

BenchRecord run_mode(const BenchConfig& config) {
  config.validate();
  BenchRecord record;
  record.mode = config.mode;
  record.users = config.users;
  record.lambda = config.lambda;
  record.in_tokens = config.in_tokens;
  record.out_tokens = config.out_tokens;
  const auto prompts = bench_prompts(config);

  std::vector<double> all_steps;
  double bytes = 0.0;
  long tokens = 0;
  const long baseline = WeightCopyCounter::live();
  WeightCopyCounter::reset_peak();
  try {
    for (int r = 0; r < config.repetitions; ++r) {
      RepResult rep;
      switch (config.mode) {
        case BenchMode::no_protection: rep = run_no_protection(config, prompts); break;
        case BenchMode::full_isolation: rep = run_full_isolation(config, prompts); break;
        case BenchMode::spd: rep = run_spd(config, prompts, config.seed + static_cast<std::uint64_t>(r)); break;
      }
      if (r == 0) {
        record.outputs = rep.outputs;
      } else if (rep.outputs != record.outputs) {
        throw Error("bench: outputs differ between repetitions");
      }
      record.rep_median_ms.push_back(quantile(rep.step_ms, 0.5));
      all_steps.insert(all_steps.end(), rep.step_ms.begin(), rep.step_ms.end());
      bytes += rep.bytes;
      tokens += rep.tokens;
    }
  } catch (const std::bad_alloc&) {
    record.error = "out of memory";
  } catch (const CacheError& e) {
    record.error = e.what();
  }
  record.weight_copies = WeightCopyCounter::peak() - baseline;
  record.ms_per_token_med = quantile(record.rep_median_ms, 0.5);
  record.ms_per_token_p95 = quantile(all_steps, 0.95);
  record.bytes_per_token = tokens > 0 ? bytes / static_cast<double>(tokens) : 0.0;
  return record;
}

std::vector<BenchConfig> default_sweep(const BenchConfig& base) {
  std::vector<BenchConfig> out;
  for (auto mode : {BenchMode::no_protection, BenchMode::full_isolation, BenchMode::spd}) {
    for (int m : {1, 2, 4, 8}) {
      BenchConfig c = base;
      c.mode = mode;
      c.users = m;
      c.lambda = 0;
      out.push_back(c);
    }
  }
  for (int lambda : {7, 15}) {
    BenchConfig c = base;
    c.mode = BenchMode::spd;
    c.users = 2;
    c.lambda = lambda;
    out.push_back(c);
  }
  return out;
}

std::vector<BenchRecord> sweep(std::span<const BenchConfig> configs) {
  if (configs.empty()) throw ConfigError("sweep: no configs");
  std::vector<BenchRecord> records;
  for (const auto& c : configs) records.push_back(run_mode(c));
  std::stable_sort(records.begin(), records.end(), [](const BenchRecord& a, const BenchRecord& b) {
    return std::tie(a.mode, a.users, a.lambda, a.in_tokens, a.out_tokens) <
           std::tie(b.mode, b.users, b.lambda, b.in_tokens, b.out_tokens);
  });
  return records;
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::ostringstream out;
  out << "mode,users,lambda,in_tokens,out_tokens,ms_per_token_med,ms_per_token_p95,weight_copies,bytes_per_token\n";
  out << std::fixed;
  for (const auto& r : records) {
    out << mode_name(r.mode) << ',' << r.users << ',' << r.lambda << ',' << r.in_tokens << ',' << r.out_tokens << ','
        << std::setprecision(4) << r.ms_per_token_med << ',' << r.ms_per_token_p95 << ',' << r.weight_copies << ','
        << std::setprecision(1) << r.bytes_per_token << '\n';
  }
  return out.str();
}

double latency_slope(std::span<const BenchRecord> records, BenchMode mode) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : records) {
    if (r.mode != mode || r.lambda != 0) continue;
    n += 1;
    sx += r.users;
    sy += r.ms_per_token_med;
    sxx += static_cast<double>(r.users) * r.users;
    sxy += r.users * r.ms_per_token_med;
  }
  const double den = n * sxx - sx * sx;
  if (n < 2 || den == 0) throw ConfigError("latency_slope: need at least two user counts");
  return (n * sxy - sx * sy) / den;
}

}  // namespace ospd
