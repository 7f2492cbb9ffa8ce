#include "ospd/protocol.hpp"

#include <gtest/gtest.h>

namespace ospd {
namespace {

TokenSeq prompt_of(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq out(n);
  for (auto& t : out) t = static_cast<Token>(rng.index(static_cast<std::uint64_t>(vocab - 1)));
  return out;
}

std::shared_ptr<const Weights> small_weights(int d_model = 16, int head_dim = 8) {
  ModelConfig c;
  c.d_model = d_model;
  c.head_dim = head_dim;
  c.n_heads = d_model / head_dim;
  c.vocab_size = 24;
  return std::make_shared<const Weights>(init_model(c));
}

TEST(WeightsHandle, AccessAfterReleaseThrows) {
  auto w = small_weights();
  WeightsHandle h(w);
  EXPECT_NO_THROW(h.get());
  h.release();
  EXPECT_THROW(h.get(), WeightAccessError);
  EXPECT_EQ(h.accesses_after_release(), 1);
}

TEST(UserParty, ReleasesWeightsAfterPrefill) {
  auto w = small_weights();
  UserParty user(1, 1, WeightsHandle(w), {});
  user.prefill({prompt_of(5, 24, 1), {}}, nullptr, nullptr);
  EXPECT_TRUE(user.weights_handle().released());
  EXPECT_EQ(user.resident_weight_matrices(), 0u);
  EXPECT_EQ(w.use_count(), 1);
}

TEST(Session, PlainStreamMatchesMonolithic) {
  auto w = small_weights();
  const TokenSeq prompt = prompt_of(6, 24, 2);
  UserParty::Options opts;
  opts.max_tokens = 10;
  UserParty user(1, 9, WeightsHandle(w), opts);
  user.prefill({prompt, {}}, nullptr, nullptr);
  Controller ctl;
  const auto tr = run_decode_session(user, w, ctl);
  EXPECT_TRUE(tr.killed.empty());
  EXPECT_EQ(authentic_response(user, tr), generate_monolithic(*w, prompt, 10));
}

TEST(Session, ObfuscatedStreamsAllMatchMonolithic) {
  auto w = small_weights();
  const TokenSeq prompt = prompt_of(6, 24, 3);
  const TableOracle uniform(0, std::vector<double>(24, 1.0 / 24));
  const ObfuscationConfig cfg{0.1, 3};
  UserParty::Options opts;
  opts.max_tokens = 6;
  UserParty user(10, 4, WeightsHandle(w), opts);
  user.prefill({prompt, {{4, 2, "x"}}}, &cfg, &uniform);
  ASSERT_EQ(user.stream_ids().size(), 4u);
  Controller ctl;
  const auto tr = run_decode_session(user, w, ctl);
  EXPECT_TRUE(tr.killed.empty());
  const auto ids = user.stream_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    EXPECT_EQ(tr.delivered.at(ids[i]), generate_monolithic(*w, user.prompts().prompts[i], 6));
  }
  EXPECT_EQ(authentic_response(user, tr), generate_monolithic(*w, prompt, 6));
  EXPECT_EQ(user.authentic_stream(), 10 + user.prompts().idx);
}

TEST(Session, ZeroMaxTokensDeliversOnlyFirstToken) {
  auto w = small_weights();
  const TokenSeq prompt = prompt_of(4, 24, 5);
  UserParty::Options opts;
  opts.max_tokens = 0;
  UserParty user(1, 1, WeightsHandle(w), opts);
  user.prefill({prompt, {}}, nullptr, nullptr);
  Controller ctl;
  const auto tr = run_decode_session(user, w, ctl);
  EXPECT_EQ(authentic_response(user, tr), generate_monolithic(*w, prompt, 0));
  EXPECT_EQ(authentic_response(user, tr).size(), 1u);
}

std::vector<TokenSeq> run_users(std::shared_ptr<const Weights> w, const std::vector<TokenSeq>& prompts,
                                const SessionOptions& options) {
  std::vector<std::unique_ptr<UserParty>> parties;
  std::vector<UserParty*> users;
  UserParty::Options opts;
  opts.max_tokens = 5;
  std::uint32_t id = 1;
  for (const auto& p : prompts) {
    parties.push_back(std::make_unique<UserParty>(id, 50 + id, WeightsHandle(w), opts));
    ++id;
    parties.back()->prefill({p, {}}, nullptr, nullptr);
    users.push_back(parties.back().get());
  }
  Controller ctl;
  const auto tr = run_sessions(users, w, ctl, options);
  std::vector<TokenSeq> out;
  for (auto* u : users) out.push_back(authentic_response(*u, tr));
  return out;
}

TEST(Session, BatchedEqualsSerialWithMixedLengths) {
  auto w = small_weights();
  const std::vector<TokenSeq> prompts{prompt_of(3, 24, 1), prompt_of(9, 24, 2), prompt_of(5, 24, 3)};
  SessionOptions batched, serial;
  serial.model.batch = false;
  const auto a = run_users(w, prompts, batched);
  const auto b = run_users(w, prompts, serial);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < prompts.size(); ++i) EXPECT_EQ(a[i], generate_monolithic(*w, prompts[i], 5));
}

TEST(Session, TcpTransportGivesSameTokens) {
  auto w = small_weights();
  const std::vector<TokenSeq> prompts{prompt_of(4, 24, 7), prompt_of(6, 24, 8)};
  SessionOptions tcp;
  tcp.transport = Transport::tcp;
  EXPECT_EQ(run_users(w, prompts, tcp), run_users(w, prompts, {}));
}

TEST(Controller, BlocksControlFrames) {
  Controller ctl(std::chrono::milliseconds(0));
  EXPECT_EQ(ctl.gate(make_control(1, ControlKind::ready, 1)), Controller::Verdict::block);
  EXPECT_EQ(ctl.gate(make_query(1, 0, 0, Vector::Ones(4))), Controller::Verdict::block);
  EXPECT_EQ(ctl.blocked_count(), 2);
}

TEST(Controller, PassesExpectedTokenAndKillsOnMismatch) {
  Controller ctl(std::chrono::milliseconds(0));
  ctl.expect(3, 11);
  EXPECT_EQ(ctl.gate(make_token(3, 11)), Controller::Verdict::pass);
  ctl.expect(3, 12);
  EXPECT_EQ(ctl.gate(make_token(3, 13)), Controller::Verdict::block);
  EXPECT_TRUE(ctl.killed(3));
  EXPECT_EQ(ctl.delivered(3), TokenSeq{11});
  ctl.expect(3, 14);
  EXPECT_EQ(ctl.gate(make_token(3, 14)), Controller::Verdict::block);
}

TEST(Controller, UnexpectedTokenIsBlocked) {
  Controller ctl(std::chrono::milliseconds(0));
  EXPECT_EQ(ctl.gate(make_token(8, 1)), Controller::Verdict::block);
  Bytes garbage{0, 1, 2};
  EXPECT_EQ(ctl.gate_frame(garbage), Controller::Verdict::block);
}

TEST(Controller, ExpectAnyChecksVocabulary) {
  Controller ctl(std::chrono::milliseconds(0));
  ctl.expect_any(2, 10);
  EXPECT_EQ(ctl.gate(make_token(2, 9)), Controller::Verdict::pass);
  ctl.expect_any(2, 10);
  EXPECT_EQ(ctl.gate(make_token(2, 10)), Controller::Verdict::block);
}

TEST(Session, TamperedTokenKillsSession) {
  auto w = small_weights();
  const TokenSeq prompt = prompt_of(5, 24, 11);
  UserParty::Options opts;
  opts.max_tokens = 8;
  UserParty user(1, 1, WeightsHandle(w), opts);
  user.prefill({prompt, {}}, nullptr, nullptr);
  user.set_outbound_tamper([](std::uint32_t, int step, Token t) { return step == 2 ? (t + 1) % 24 : t; });
  Controller ctl;
  const auto tr = run_decode_session(user, w, ctl);
  EXPECT_EQ(tr.killed, std::vector<std::uint32_t>{1});
  const auto mono = generate_monolithic(*w, prompt, 8);
  if (mono.size() > 2) EXPECT_EQ(ctl.delivered(1), TokenSeq(mono.begin(), mono.begin() + 2));
}

std::size_t query_scalars_per_round(int d_model, int head_dim) {
  auto w = small_weights(d_model, head_dim);
  UserParty::Options opts;
  opts.max_tokens = 4;
  UserParty user(1, 1, WeightsHandle(w), opts);
  user.prefill({prompt_of(4, 24, 1), {}}, nullptr, nullptr);
  Controller ctl;
  const auto report = comm_accounting(run_decode_session(user, w, ctl));
  EXPECT_TRUE(report.constant_per_round);
  EXPECT_EQ(report.round_scalars, predicted_round_scalars(w->config));
  EXPECT_FALSE(report.steps.empty());
  return report.steps.front().query_scalars;
}

TEST(Comm, QueryScalarsScaleWithWidth) {
  const std::size_t narrow = query_scalars_per_round(16, 8);
  const std::size_t wide = query_scalars_per_round(32, 16);
  EXPECT_EQ(wide, 2 * narrow);
}

TEST(Comm, PredictedRoundScalars) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 4;
  c.head_dim = 8;
  c.d_model = 32;
  EXPECT_EQ(predicted_round_scalars(c), 3u * 4u * (2 * 8 + 2));
}

TEST(Transcript, DumpCarriesNoPayloads) {
  auto w = small_weights();
  UserParty user(1, 1, WeightsHandle(w), {});
  user.prefill({prompt_of(4, 24, 2), {}}, nullptr, nullptr);
  Controller ctl;
  const auto tr = run_decode_session(user, w, ctl);
  const std::string dump = dump_transcript(tr);
  EXPECT_NE(dump.find("QUERY"), std::string::npos);
  EXPECT_EQ(dump.find('.'), std::string::npos);
}

}  // namespace
}  // namespace ospd
