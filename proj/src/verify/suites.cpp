#include "ospd/verify/suites.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "ospd/bench.hpp"
#include "ospd/corpus.hpp"
#include "ospd/security.hpp"
#include "ospd/verify/oracles.hpp"

namespace ospd::verify {

namespace {

using Clock = std::chrono::steady_clock;

CheckResult timed(int criterion, std::string name, const std::function<bool(std::ostringstream&)>& body) {
  CheckResult r;
  r.criterion = criterion;
  r.name = std::move(name);
  std::ostringstream detail;
  const auto t0 = Clock::now();
  try {
    r.passed = body(detail);
  } catch (const std::exception& e) {
    detail << " exception: " << e.what();
    r.passed = false;
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  r.detail = detail.str();
  return r;
}

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * rng.uniform() - 1.0);
  return m;
}

oracle::LMatrix to_long(const Matrix& m, Eigen::Index r0, Eigen::Index rows) {
  oracle::LMatrix out;
  for (Eigen::Index r = r0; r < r0 + rows; ++r) {
    std::vector<long double> row;
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

KvRows rows_of(const Matrix& k, const Matrix& v, Eigen::Index r0, Eigen::Index rows) {
  KvRows out(static_cast<int>(k.cols()));
  for (Eigen::Index r = r0; r < r0 + rows; ++r) out.append(k.row(r), v.row(r));
  return out;
}

struct MergeStats {
  double max_abs_ref = 0.0;     // vs attention_reference
  double max_abs_oracle = 0.0;  // vs long double oracle
  double max_rel_oracle = 0.0;  // inf-norm relative to the oracle
  long nonfinite = 0;
  long heads = 0;
};

MergeStats merge_instances(std::uint64_t seed, int instances, double q_scale) {
  Rng rng(seed);
  MergeStats st;
  for (int inst = 0; inst < instances; ++inst) {
    const auto n = static_cast<Eigen::Index>(1 + rng.index(64));
    const auto hd = static_cast<Eigen::Index>(1 + rng.index(32));
    const int heads = 1 + static_cast<int>(rng.index(4));
    const auto split = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n) + 1));
    for (int h = 0; h < heads; ++h) {
      ++st.heads;
      const Matrix k = random_matrix(rng, n, hd, 1.0);
      const Matrix v = random_matrix(rng, n, hd, 1.0);
      const Vector q = random_matrix(rng, hd, 1, q_scale);

      const KvRows pvt = rows_of(k, v, 0, split);
      const KvRows pub = rows_of(k, v, split, n - split);
      const Vector merged = merge_partials(partial_attention(q, pvt), partial_attention(q, pub));
      if (!merged.allFinite()) ++st.nonfinite;

      const Matrix ref = attention_reference<double>(q.transpose(), k, v);
      std::vector<long double> ql(q.data(), q.data() + q.size());
      const auto orc = oracle::attention(ql, to_long(k, 0, n), to_long(v, 0, n));
      long double norm = 0, diff = 0;
      for (Eigen::Index j = 0; j < hd; ++j) {
        st.max_abs_ref = std::max(st.max_abs_ref, std::abs(merged(j) - ref(0, j)));
        const long double d = std::abs(static_cast<long double>(merged(j)) - orc[j]);
        st.max_abs_oracle = std::max(st.max_abs_oracle, static_cast<double>(d));
        diff = std::max(diff, d);
        norm = std::max(norm, std::abs(orc[j]));
      }
      st.max_rel_oracle = std::max(st.max_rel_oracle, static_cast<double>(diff / std::max(norm, 1e-300L)));
    }
  }
  return st;
}

TokenSeq random_tokens(Rng& rng, std::size_t n, int vocab) {
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<Token>(rng.index(static_cast<std::uint64_t>(vocab))));
  return out;
}

/// Prompt tokens avoiding EOS (the last id).
TokenSeq random_prompt(Rng& rng, std::size_t n, int vocab) { return random_tokens(rng, n, vocab - 1); }

struct SessionRun {
  std::vector<TokenSeq> spd;
  std::vector<TokenSeq> mono;
  Transcript transcript;
};

SessionRun run_spd_users(std::shared_ptr<const Weights> w, const std::vector<TokenSeq>& prompts, int max_tokens,
                         const SessionOptions& options, const ObfuscationConfig* obf = nullptr) {
  const int vocab = w->config.vocab_size;
  TableOracle uniform(0, std::vector<double>(static_cast<std::size_t>(vocab), 1.0 / vocab));
  std::vector<std::unique_ptr<UserParty>> parties;
  std::uint32_t next_id = 1;
  for (std::size_t u = 0; u < prompts.size(); ++u) {
    UserParty::Options opts;
    opts.max_tokens = max_tokens;
    parties.push_back(std::make_unique<UserParty>(next_id, 100 + u, WeightsHandle(w), opts));
    TaggedPrompt tp{prompts[u], {}};
    if (obf) tp.spans.push_back({prompts[u].size() - 2, 2, "x"});
    parties.back()->prefill(tp, obf, &uniform);
    next_id += static_cast<std::uint32_t>(parties.back()->stream_ids().size());
  }
  std::vector<UserParty*> users;
  for (auto& p : parties) users.push_back(p.get());
  Controller controller;
  SessionRun run;
  run.transcript = run_sessions(users, w, controller, options);
  for (std::size_t u = 0; u < prompts.size(); ++u) {
    run.spd.push_back(authentic_response(*users[u], run.transcript));
    run.mono.push_back(generate_monolithic(*w, prompts[u], max_tokens));
  }
  return run;
}

}  // namespace

CheckResult check_theorem1_exactness(const SuiteOptions& options) {
  return timed(1, "theorem1 exactness", [&](std::ostringstream& d) {
    const auto st = merge_instances(options.seed, 1000, 1.0);
    d << st.heads << " heads from 1000 instances, max |merge - reference| = " << st.max_abs_ref
      << ", vs long double oracle = " << st.max_abs_oracle << ", tol 1e-9";
    return st.nonfinite == 0 && st.max_abs_ref <= 1e-9 && st.max_abs_oracle <= 1e-9;
  });
}

CheckResult check_numerical_stability(const SuiteOptions& options) {
  return timed(2, "numerical stability x50", [&](std::ostringstream& d) {
    const auto st = merge_instances(options.seed + 1, 1000, 50.0);
    d << st.heads << " heads, scores x50, non-finite = " << st.nonfinite
      << ", max relative error vs long double oracle = " << st.max_rel_oracle << ", tol 1e-6";
    return st.nonfinite == 0 && st.max_rel_oracle <= 1e-6;
  });
}

CheckResult check_output_invariance(const SuiteOptions& options) {
  return timed(3, "output invariance", [&](std::ostringstream& d) {
    bool ok = true;
    long tokens = 0, full_length = 0, streams = 0;
    Rng rng(options.seed);
    for (std::uint32_t s = 0; s < 8; ++s) {
      ModelConfig mc;
      mc.seed = s + 1;
      auto w = std::make_shared<const Weights>(init_model(mc));
      std::vector<TokenSeq> prompts;
      for (int p = 0; p < 4; ++p) prompts.push_back(random_prompt(rng, 4 + rng.index(8), mc.vocab_size));
      SessionOptions so;
      if (s == 1) so.transport = Transport::tcp;
      if (s == 2) so.model.batch = false;
      const auto run = run_spd_users(w, prompts, 64, so);
      for (std::size_t u = 0; u < prompts.size(); ++u) {
        ok = ok && run.spd[u] == run.mono[u];
        tokens += static_cast<long>(run.mono[u].size());
        full_length += run.mono[u].size() == 65 ? 1 : 0;
        ++streams;
      }
    }
    d << streams << " streams over 8 model seeds, " << tokens << " tokens identical to monolithic ("
      << full_length << " ran all 64 steps, the rest stopped at EOS identically)";

    // Obfuscated streams: every virtual prompt decodes like its own monolithic run.
    {
      ModelConfig mc;
      mc.seed = 99;
      auto w = std::make_shared<const Weights>(init_model(mc));
      ObfuscationConfig obf;
      obf.epsilon = 1.0;
      obf.lambda_max = 3;
      obf.lambda_min = 3;
      std::vector<TokenSeq> prompts{random_prompt(rng, 6, mc.vocab_size), random_prompt(rng, 9, mc.vocab_size)};
      const auto run = run_spd_users(w, prompts, 32, {}, &obf);
      for (std::size_t u = 0; u < prompts.size(); ++u) ok = ok && run.spd[u] == run.mono[u];
      d << "; obfuscated lambda=3 sessions match";
    }

    BenchConfig bc;
    bc.users = 4;
    bc.in_tokens = 8;
    bc.out_tokens = 24;
    bc.seed = options.seed;
    std::vector<std::vector<TokenSeq>> outs;
    for (auto mode : {BenchMode::no_protection, BenchMode::full_isolation, BenchMode::spd}) {
      bc.mode = mode;
      outs.push_back(run_mode(bc).outputs);
    }
    const bool modes_equal = outs[0] == outs[1] && outs[1] == outs[2];
    const auto prompts = bench_prompts(bc);
    const Weights w = init_model(bc.model);
    bool mono_equal = true;
    for (std::size_t u = 0; u < prompts.size(); ++u) {
      mono_equal = mono_equal && outs[0][u] == generate_monolithic(w, prompts[u], bc.out_tokens);
    }
    d << "; bench modes identical: " << (modes_equal && mono_equal ? "yes" : "NO");
    return ok && modes_equal && mono_equal;
  });
}

CheckResult check_gqs_soundness(const SuiteOptions& options) {
  return timed(4, "gqs soundness", [&](std::ostringstream& d) {
    const double eps_list[] = {0.05, 0.1, 0.5, 1.0};
    const double taus[] = {1.0, 0.7, 1.5};
    Rng rng(options.seed);
    long candidates = 0, violations = 0, exhaustive_cases = 0, exhaustive_mismatch = 0;
    for (int c = 0; c < 200; ++c) {
      const double eps = eps_list[c % 4];
      const bool small = (c / 4) % 2 == 0;
      const int vocab = small ? 4 + static_cast<int>(rng.index(13)) : 4 + static_cast<int>(rng.index(61));
      const std::size_t n = small ? 1 + rng.index(2) : 1 + rng.index(4);
      const double tau = small ? 1.0 : taus[rng.index(3)];
      const oracle::RandomBigram lm(vocab, rng(), 1.0 + 3.0 * rng.uniform());

      TaggedPrompt prompt;
      prompt.tokens = random_tokens(rng, 1 + rng.index(3), vocab);
      const TokenSeq seg = random_tokens(rng, n, vocab);
      prompt.spans.push_back({prompt.tokens.size(), n, "s"});
      prompt.tokens.insert(prompt.tokens.end(), seg.begin(), seg.end());
      const TokenSeq tail = random_tokens(rng, rng.index(3), vocab);
      prompt.tokens.insert(prompt.tokens.end(), tail.begin(), tail.end());

      ObfuscationConfig cfg;
      cfg.epsilon = eps;
      cfg.temperature = tau;
      cfg.lambda_max = 512;
      const FakeNgramSet f = gqs(prompt, 0, cfg, lm);
      const TemperedOracle tempered(lm, tau);
      for (const auto& cand : f.candidates) {
        ++candidates;
        if (!verify_bound(f.authentic, cand, prompt.left_context(0), eps, tempered)) ++violations;
      }
      if (n <= 2 && vocab <= 16) {
        ++exhaustive_cases;
        if (oracle::exhaustive_gqs(tempered, prompt.left_context(0), seg, eps) != f.candidates) ++exhaustive_mismatch;
      }
    }
    d << "200 cases, " << candidates << " candidates, bound violations = " << violations << "; " << exhaustive_cases
      << " cases vs exhaustive enumeration, mismatches = " << exhaustive_mismatch;
    return violations == 0 && exhaustive_mismatch == 0 && exhaustive_cases > 0;
  });
}

CheckResult check_lambda_curve(const SuiteOptions& options) {
  return timed(5, "lambda curve", [&](std::ostringstream& d) {
    (void)options;
    const auto corpus = synthetic_corpus();
    const auto lm = train_ngram(corpus.sentences, 2, 0.01, corpus.model_vocab());
    const double eps_grid[] = {0.025, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6};
    const double tau_grid[] = {0.5, 1.0, 2.0, 4.0};
    bool monotone = true;
    for (const auto& cat : corpus.categories) {
      for (std::size_t member : {std::size_t{0}, std::size_t{3}, cat.members.size() / 2}) {
        const auto prompt = cat.prompt(member);
        std::size_t prev = 0;
        d << cat.name << '[' << member << "] eps:";
        for (double eps : eps_grid) {
          ObfuscationConfig cfg;
          cfg.epsilon = eps;
          const auto count = gqs(prompt, 0, cfg, lm).fake_count();
          monotone = monotone && count >= prev;
          prev = count;
          d << ' ' << count;
        }
        prev = 0;
        d << " tau:";
        for (double tau : tau_grid) {
          ObfuscationConfig cfg;
          cfg.temperature = tau;
          const auto count = gqs(prompt, 0, cfg, lm).fake_count();
          monotone = monotone && count >= prev;
          prev = count;
          d << ' ' << count;
        }
        d << "; ";
      }
    }
    bool date_ok = true;
    const auto& date = corpus.category("date");
    for (std::size_t member : {std::size_t{0}, std::size_t{77}, std::size_t{359}}) {
      ObfuscationConfig cfg;
      cfg.epsilon = 0.1;
      const auto prompt = date.prompt(member);
      const std::vector<FakeNgramSet> fakes{gqs(prompt, 0, cfg, lm)};
      const auto set = build_virtual_prompts(prompt, fakes, cfg, member);
      date_ok = date_ok && set.lambda >= 324 && set.lambda <= 396;
      d << "date[" << member << "] lambda at eps 0.1 = " << set.lambda << "; ";
    }
    return monotone && date_ok;
  });
}

namespace {

struct BoundsSetup {
  VirtualPromptSet set;
  std::unique_ptr<oracle::RandomBigram> lm;
  std::unique_ptr<PerturbedOracle> p;
  double epsilon = 0.0;
  double delta = 0.0;
};

/// A gqs-built prompt set of exactly lambda+1 prompts over a small vocabulary,
/// with P a perturbation of the sampling model and delta measured exactly.
BoundsSetup bounds_setup(int lambda, std::uint64_t seed, double log_factor) {
  constexpr int kVocab = 8;
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed + 7919 * attempt);
    BoundsSetup s;
    s.lm = std::make_unique<oracle::RandomBigram>(kVocab, rng(), 1.0);
    TaggedPrompt prompt;
    prompt.tokens = random_tokens(rng, 3, kVocab);
    const TokenSeq seg = random_tokens(rng, 2, kVocab);
    prompt.spans.push_back({prompt.tokens.size(), 2, "s"});
    prompt.tokens.insert(prompt.tokens.end(), seg.begin(), seg.end());
    ObfuscationConfig cfg;
    cfg.epsilon = 0.5;
    cfg.lambda_max = lambda;
    cfg.lambda_min = lambda;
    try {
      const std::vector<FakeNgramSet> fakes{gqs(prompt, 0, cfg, *s.lm)};
      s.set = build_virtual_prompts(prompt, fakes, cfg, seed);
    } catch (const ObfuscationAbort&) {
      continue;
    }
    s.p = std::make_unique<PerturbedOracle>(*s.lm, TokenSeq{prompt.tokens[2]}, seg[0], log_factor);
    s.epsilon = cfg.epsilon;
    s.delta = estimate_delta(*s.p, *s.lm, span_fillings(prompt, kVocab));
    return s;
  }
}

}  // namespace

CheckResult check_adversary_bounds(const SuiteOptions& options) {
  return timed(6, "adversary bounds", [&](std::ostringstream& d) {
    bool ok = true;
    std::vector<AdversaryResult> results;
    for (int lambda : {1, 3, 7}) {
      const auto s = bounds_setup(lambda, options.seed + static_cast<std::uint64_t>(lambda), 0.3);
      const int half = (lambda + 2) / 2;  // ceil((lambda+1)/2)
      std::vector<int> etas{1, 2, half, lambda + 1};
      std::sort(etas.begin(), etas.end());
      etas.erase(std::unique(etas.begin(), etas.end()), etas.end());
      for (int eta : etas) {
        const auto r = monte_carlo_success(*s.p, s.set, eta, 100000, options.seed + 31 * eta + lambda, s.epsilon, s.delta);
        ok = ok && r.within_bounds();
        if (eta == 1) {
          const double target = 1.0 / (lambda + 1);
          const bool contains = r.ci_lo <= target && target <= r.ci_hi;
          ok = ok && contains && r.bounds.lower == target && r.bounds.upper == target;
        }
        results.push_back(r);
      }
    }
    for (const auto& r : results) {
      d << "eta=" << r.eta << " lambda=" << r.lambda << " rate=" << r.rate << " in [" << r.bounds.lower << ", "
        << r.bounds.upper << "] delta=" << r.delta << (r.within_bounds() ? "" : " OUT") << "; ";
    }
    d << "eta=1 CIs (z=3) contain 1/(lambda+1)";
    return ok;
  });
}

CheckResult check_authenticity_chain(const SuiteOptions& options) {
  return timed(7, "authenticity chain", [&](std::ostringstream& d) {
    Rng rng(options.seed);
    const double eps_list[] = {0.05, 0.1, 0.5, 1.0};
    long cases = 0, prompts = 0, violations = 0;
    double worst_slack = std::numeric_limits<double>::infinity();
    for (int c = 0; c < 120; ++c) {
      const int vocab = 4 + static_cast<int>(rng.index(13));
      const std::size_t n = 1 + rng.index(2);
      const double eps = eps_list[c % 4];
      const oracle::RandomBigram lm(vocab, rng(), 0.5 + 2.0 * rng.uniform());
      TaggedPrompt prompt;
      prompt.tokens = random_tokens(rng, 1 + rng.index(3), vocab);
      const TokenSeq seg = random_tokens(rng, n, vocab);
      prompt.spans.push_back({prompt.tokens.size(), n, "s"});
      prompt.tokens.insert(prompt.tokens.end(), seg.begin(), seg.end());

      ObfuscationConfig cfg;
      cfg.epsilon = eps;
      cfg.lambda_max = 512;
      const std::vector<FakeNgramSet> fakes{gqs(prompt, 0, cfg, lm)};
      if (fakes[0].fake_count() == 0) continue;
      const auto set = build_virtual_prompts(prompt, fakes, cfg, static_cast<std::uint64_t>(c));

      // Perturb a context the segment actually passes through.
      const std::size_t at = rng.index(n);
      const TokenSeq ctx_tail{prompt.tokens[prompt.spans[0].start + at - 1]};
      const PerturbedOracle p(lm, ctx_tail, static_cast<Token>(rng.index(static_cast<std::uint64_t>(vocab))),
                              rng.uniform() - 0.5);
      const double delta = estimate_delta(p, lm, span_fillings(prompt, vocab));
      const auto report = authenticity_C(p, set);
      ++cases;
      prompts += static_cast<long>(set.prompts.size());
      const double slack = eps + 2 * delta - report.max_log_ratio();
      worst_slack = std::min(worst_slack, slack);
      if (slack < -1e-12) ++violations;
    }
    d << cases << " gqs-built sets, " << prompts << " prompts, violations of max log-ratio <= eps + 2 delta: "
      << violations << ", tightest slack " << worst_slack;
    return violations == 0 && cases >= 50;
  });
}

CheckResult check_comm_constancy(const SuiteOptions& options) {
  return timed(8, "communication constancy", [&](std::ostringstream& d) {
    bool ok = true;
    Rng rng(options.seed);
    ModelConfig configs[2];
    configs[1].n_layers = 3;
    configs[1].n_heads = 4;
    configs[1].head_dim = 4;
    for (const auto& mc : configs) {
      auto w = std::make_shared<const Weights>(init_model(mc));
      std::vector<TokenSeq> prompts{random_prompt(rng, 5, mc.vocab_size), random_prompt(rng, 11, mc.vocab_size)};
      const auto run = run_spd_users(w, prompts, 24, {});
      const auto report = comm_accounting(run.transcript);
      const bool match = report.constant_per_round && report.round_scalars == predicted_round_scalars(mc);
      ok = ok && match && !report.steps.empty();
      d << "L=" << mc.n_layers << " H=" << mc.n_heads << " hd=" << mc.head_dim << ": " << report.round_scalars
        << " scalars/round over " << report.steps.size() << " stream-rounds, predicted "
        << predicted_round_scalars(mc) << "; ";
      if (&mc == &configs[0] && options.verbose) d << '\n' << report.summary(mc);
    }
    d << "per head the partial carries m as well as a and gamma: 2*head_dim+2 instead of 2*head_dim+1";
    return ok;
  });
}

CheckResult check_controller(const SuiteOptions& options) {
  return timed(9, "controller soundness", [&](std::ostringstream& d) {
    Rng rng(options.seed);
    Controller fuzz_ctl(std::chrono::milliseconds(0));
    for (std::uint32_t s = 0; s < 4; ++s) {
      for (int i = 0; i < 100; ++i) fuzz_ctl.expect(s, static_cast<Token>(rng.index(64)));
    }
    long passed = 0;
    for (int i = 0; i < 10000; ++i) {
      Bytes frame;
      switch (i % 4) {
        case 0: {  // garbage
          const auto len = rng.index(48);
          for (std::uint64_t b = 0; b < len; ++b) frame.push_back(static_cast<std::uint8_t>(rng.index(256)));
          break;
        }
        case 1: {  // well-formed, non-TOKEN tag
          const Tag tags[] = {Tag::query, Tag::partial, Tag::final_y, Tag::control, Tag::abort};
          ProtocolMessage msg{tags[rng.index(5)], static_cast<std::uint32_t>(rng.index(4)),
                              static_cast<std::uint16_t>(rng.index(4)), 0, {}};
          const auto len = rng.index(40);
          for (std::uint64_t b = 0; b < len; ++b) msg.payload.push_back(static_cast<std::uint8_t>(rng.index(256)));
          frame = serialize(msg);
          break;
        }
        case 2: {  // TOKEN header with a malformed payload
          ProtocolMessage msg{Tag::token, static_cast<std::uint32_t>(rng.index(4)), 0, 0, {}};
          auto len = rng.index(9);
          if (len == 4) len = 5;
          for (std::uint64_t b = 0; b < len; ++b) msg.payload.push_back(static_cast<std::uint8_t>(rng.index(256)));
          frame = serialize(msg);
          break;
        }
        default: {  // valid TOKEN frame damaged in transit
          frame = serialize(make_token(static_cast<std::uint32_t>(rng.index(4)), static_cast<Token>(rng.index(64))));
          if (rng.index(2) == 0) {
            frame.resize(rng.index(frame.size()));
          } else {
            frame[4] = static_cast<std::uint8_t>(7 + rng.index(249));
          }
          break;
        }
      }
      if (fuzz_ctl.gate_frame(frame) == Controller::Verdict::pass) ++passed;
    }
    d << "10000 fuzzed non-TOKEN or malformed frames, passed = " << passed << ", blocked = "
      << fuzz_ctl.blocked_count();
    bool ok = passed == 0 && fuzz_ctl.blocked_count() == 10000;

    // Honest session, one flipped outbound token at step 3.
    ModelConfig mc;
    auto w = std::make_shared<const Weights>(init_model(mc));
    const TokenSeq prompt = random_prompt(rng, 6, mc.vocab_size);
    const TokenSeq mono = generate_monolithic(*w, prompt, 12);
    UserParty::Options opts;
    opts.max_tokens = 12;
    UserParty user(5, 77, WeightsHandle(w), opts);
    user.prefill({prompt, {}}, nullptr, nullptr);
    user.set_outbound_tamper([&](std::uint32_t, int step, Token t) {
      return step == 3 ? static_cast<Token>((t + 1) % static_cast<Token>(mc.vocab_size)) : t;
    });
    Controller ctl;
    const auto tr = run_decode_session(user, w, ctl);
    const TokenSeq delivered = ctl.delivered(5);
    const bool killed = ctl.killed(5) && tr.killed == std::vector<std::uint32_t>{5};
    const bool prefix = mono.size() > 4 && delivered == TokenSeq(mono.begin(), mono.begin() + 3);
    d << "; flipped token at step 3: " << (killed ? "session killed" : "NOT killed") << " ("
      << ctl.kill_reason(5) << "), delivered " << delivered.size() << " honest tokens";
    ok = ok && killed && prefix;

    // The same session without tampering passes untouched.
    UserParty honest(5, 77, WeightsHandle(w), opts);
    honest.prefill({prompt, {}}, nullptr, nullptr);
    Controller ctl2;
    const auto tr2 = run_decode_session(honest, w, ctl2);
    ok = ok && tr2.killed.empty() && ctl2.delivered(5) == mono;
    return ok;
  });
}

CheckResult check_memory_multiplicity(const SuiteOptions& options) {
  return timed(10, "memory multiplicity", [&](std::ostringstream& d) {
    bool ok = true;
    BenchConfig bc;
    bc.in_tokens = 6;
    bc.out_tokens = 4;
    bc.seed = options.seed;
    for (int m : {1, 4, 8}) {
      bc.users = m;
      bc.mode = BenchMode::full_isolation;
      const long fi = run_mode(bc).weight_copies;
      bc.mode = BenchMode::spd;
      const long spd = run_mode(bc).weight_copies;
      ok = ok && fi == m && spd == 1;
      d << "m=" << m << ": full_isolation " << fi << ", spd " << spd << "; ";
    }
    auto w = std::make_shared<const Weights>(init_model(bc.model));
    const long before = WeightCopyCounter::live();
    UserParty user(0, 1, WeightsHandle(w), {});
    Rng rng(options.seed);
    user.prefill({random_prompt(rng, 8, bc.model.vocab_size), {}}, nullptr, nullptr);
    const bool released = user.weights_handle().released() && user.resident_weight_matrices() == 0;
    ok = ok && released && WeightCopyCounter::live() == before && w.use_count() == 1;
    d << "user party after prefill: " << user.resident_weight_matrices() << " weight matrices, handle "
      << (released ? "released" : "STILL HELD");
    return ok;
  });
}

CheckResult check_scaling_trend(const SuiteOptions& options) {
  return timed(11, "scaling trend", [&](std::ostringstream& d) {
    BenchConfig base;
    base.model.d_model = 512;
    base.model.n_heads = 4;
    base.model.head_dim = 128;
    base.model.n_layers = 2;
    base.in_tokens = 8;
    base.out_tokens = 8;
    base.repetitions = 3;
    base.seed = options.seed;
    std::vector<BenchConfig> configs;
    for (auto mode : {BenchMode::full_isolation, BenchMode::spd}) {
      for (int m : {1, 2, 4, 8}) {
        BenchConfig c = base;
        c.mode = mode;
        c.users = m;
        configs.push_back(c);
      }
    }
    const auto records = sweep(configs);
    const double fi = latency_slope(records, BenchMode::full_isolation);
    const double spd = latency_slope(records, BenchMode::spd);
    d << "d_model 512, median of 3 repetitions; ms/token by m:";
    for (const auto& r : records) d << ' ' << mode_name(r.mode) << '@' << r.users << '=' << r.ms_per_token_med;
    d << "; slope full_isolation " << fi << " ms/user, spd " << spd << " ms/user";
    return fi >= spd;
  });
}

std::vector<CheckResult> run_suite(const std::string& suite, const SuiteOptions& options) {
  using Check = CheckResult (*)(const SuiteOptions&);
  std::vector<Check> checks;
  if (suite == "theorem1") {
    checks = {check_theorem1_exactness, check_numerical_stability};
  } else if (suite == "gqs") {
    checks = {check_gqs_soundness, check_lambda_curve};
  } else if (suite == "bounds") {
    checks = {check_adversary_bounds, check_authenticity_chain};
  } else if (suite == "protocol") {
    checks = {check_output_invariance, check_comm_constancy, check_controller, check_memory_multiplicity};
  } else if (suite == "scaling") {
    checks = {check_scaling_trend};
  } else if (suite == "all") {
    checks = {check_theorem1_exactness, check_numerical_stability, check_output_invariance,
              check_gqs_soundness,     check_lambda_curve,         check_adversary_bounds,
              check_authenticity_chain, check_comm_constancy,      check_controller,
              check_memory_multiplicity, check_scaling_trend};
  } else {
    throw std::invalid_argument("unknown suite: " + suite);
  }
  std::vector<CheckResult> out;
  for (auto check : checks) out.push_back(check(options));
  return out;
}

std::string format_result(const CheckResult& r) {
  std::ostringstream out;
  out << "criterion " << r.criterion << ": " << (r.passed ? "PASS" : "FAIL") << ' ' << r.name << " (" << r.detail
      << ") [" << std::fixed;
  out.precision(2);
  out << r.seconds << " s]";
  return out.str();
}

}  // namespace ospd::verify
