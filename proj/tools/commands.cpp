#include <fstream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "ospd/corpus.hpp"
#include "ospd/verify/suites.hpp"
#include "run_config.hpp"

namespace ospd::cli {

namespace {

std::string words(const Vocab& vocab, const TokenSeq& tokens, Token eos) {
  std::string out;
  for (Token t : tokens) {
    if (!out.empty()) out += ' ';
    out += t == eos ? "<eos>" : vocab.decode(std::span<const Token>(&t, 1));
  }
  return out;
}

/// Message counts and bytes per direction and tag. Carries no payloads.
void redacted_summary(const Transcript& transcript, std::ostream& out) {
  std::map<std::pair<std::string, std::string>, std::pair<long, std::size_t>> rows;
  for (const auto& r : transcript.records) {
    auto& row = rows[{direction_name(r.dir), tag_name(r.tag)}];
    ++row.first;
    row.second += r.nbytes;
  }
  out << "transcript (redacted):\n";
  for (const auto& [key, value] : rows) {
    out << "  " << key.first << ' ' << key.second << ": " << value.first << " messages, " << value.second
        << " bytes\n";
  }
}

}  // namespace

int cmd_demo(const RunConfig& config, std::ostream& out) {
  const auto corpus = synthetic_corpus();
  ModelConfig mc = config.model;
  if (!config.model_vocab_set) mc.vocab_size = corpus.model_vocab();
  if (mc.vocab_size < corpus.model_vocab()) {
    throw ConfigError("demo: model.vocab_size must be at least " + std::to_string(corpus.model_vocab()));
  }
  if (config.seed_set) mc.seed = static_cast<std::uint32_t>(config.seed);
  const TagRules rules =
      config.demo.tag_rules.empty() ? TagRules::parse(corpus.rules) : TagRules::load(config.demo.tag_rules);

  const TokenSeq tokens = corpus.vocab.encode(config.demo.prompt);
  const TaggedPrompt tagged = tag_sensitive(tokens, rules, corpus.vocab);
  const NgramModel lm = train_ngram(corpus.sentences, 2, 0.01, mc.vocab_size);
  auto weights = std::make_shared<const Weights>(init_model(mc));
  const Token eos = mc.eos();

  out << "prompt: " << tagged.tokens.size() << " tokens, " << tagged.spans.size() << " tagged segments";
  for (const auto& s : tagged.spans) out << " [" << s.category << " @" << s.start << '+' << s.length << ']';
  out << '\n';

  UserParty::Options opts;
  opts.max_tokens = config.demo.max_tokens;
  UserParty user(1, config.seed, WeightsHandle(weights), opts);
  try {
    user.prefill(tagged, tagged.spans.empty() ? nullptr : &config.obfuscation, &lm);
  } catch (const ObfuscationAbort& e) {
    out << "obfuscation aborted: " << e.what() << '\n';
    return kObfuscationAbort;
  }
  out << "virtual prompts: lambda = " << user.prompts().lambda << ", " << user.stream_ids().size()
      << " streams prefilled in one batch; user party weight matrices after prefill: "
      << user.resident_weight_matrices() << '\n';
  if (config.verbosity > 0) out << dump_virtual_prompts(user.prompts(), &corpus.vocab);

  Controller controller;
  const Transcript transcript = run_decode_session(user, weights, controller);
  if (!transcript.killed.empty()) {
    out << "protocol violation: controller killed " << transcript.killed.size() << " streams ("
        << controller.kill_reason(transcript.killed.front()) << ")\n";
    return kProtocolViolation;
  }

  const TokenSeq response = authentic_response(user, transcript);
  out << "response: " << words(corpus.vocab, response, eos) << '\n';

  bool invariant = true;
  const auto ids = user.stream_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto mono = generate_monolithic(*weights, user.prompts().prompts[i], opts.max_tokens);
    invariant = invariant && transcript.delivered.at(ids[i]) == mono;
  }
  out << "output invariance vs monolithic decode (all " << ids.size() << " streams): "
      << (invariant ? "match" : "MISMATCH") << '\n';

  redacted_summary(transcript, out);
  out << comm_accounting(transcript).summary(mc);
  if (!config.out.empty()) {
    std::ofstream file(config.out, std::ios::binary);
    if (!file) throw ConfigError("cannot write " + config.out.string());
    file << dump_transcript(transcript);
  }
  return invariant ? kPass : kInvariantFailure;
}

int cmd_verify(const RunConfig& config, const std::string& suite, std::ostream& out) {
  verify::SuiteOptions options;
  if (config.seed_set) options.seed = config.seed;
  options.verbose = config.verbosity > 0;
  const auto results = verify::run_suite(suite, options);
  nlohmann::json summary = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    out << verify::format_result(r) << '\n';
    summary.push_back({{"criterion", r.criterion}, {"name", r.name}, {"passed", r.passed}, {"detail", r.detail},
                       {"seconds", r.seconds}});
    all = all && r.passed;
  }
  out << "suite " << suite << ": " << (all ? "PASS" : "FAIL") << '\n';
  if (!config.out.empty()) {
    std::ofstream file(config.out);
    if (!file) throw ConfigError("cannot write " + config.out.string());
    file << nlohmann::json{{"suite", suite}, {"passed", all}, {"results", summary}}.dump(2) << '\n';
  }
  return all ? kPass : kInvariantFailure;
}

int cmd_bench(const RunConfig& config, std::ostream& out) {
  const auto configs = sweep_configs(config);
  const auto records = sweep(configs);
  const std::string csv = bench_csv(records);
  const auto path = config.out.empty() ? std::filesystem::path("bench.csv") : config.out;
  std::ofstream file(path);
  if (!file) throw ConfigError("cannot write " + path.string());
  file << csv;
  out << csv << "wrote " << path.string() << '\n';
  int status = kPass;
  for (const auto& r : records) {
    if (!r.error.empty()) {
      out << "resource failure in " << mode_name(r.mode) << " m=" << r.users << ": " << r.error << '\n';
      status = kInvariantFailure;
    }
  }
  return status;
}

}  // namespace ospd::cli
