#include "ospd/protocol.hpp"

#include <algorithm>
#include <sstream>
#include <thread>

namespace ospd {

const Weights& WeightsHandle::get() {
  if (released_ || !weights_) {
    ++violations_;
    throw WeightAccessError("weights accessed after release");
  }
  ++accesses_;
  return *weights_;
}

const char* direction_name(Direction dir) {
  switch (dir) {
    case Direction::user_to_model: return "u2m";
    case Direction::model_to_user: return "m2u";
    case Direction::outbound: return "out";
  }
  return "?";
}

// Controller

void Controller::expect(std::uint32_t session, Token token) {
  {
    std::lock_guard lock(mu_);
    sessions_[session].expected.push_back({false, token, 0});
  }
  cv_.notify_all();
}

void Controller::expect_any(std::uint32_t session, int vocab_size) {
  {
    std::lock_guard lock(mu_);
    sessions_[session].expected.push_back({true, 0, vocab_size});
  }
  cv_.notify_all();
}

Controller::Verdict Controller::block(SessionState* state, const ProtocolMessage& msg, std::size_t nbytes,
                                      const std::string& why) {
  ++blocked_;
  records_.push_back({Direction::outbound, msg.tag, msg.session, msg.layer, msg.head, nbytes, 0, -1, false});
  if (state && !why.empty() && !state->killed) {
    state->killed = true;
    state->reason = why;
  }
  return Verdict::block;
}

Controller::Verdict Controller::gate(const ProtocolMessage& outbound) {
  const std::size_t nbytes = kFrameOverhead + outbound.payload.size();
  std::unique_lock lock(mu_);
  if (outbound.tag != Tag::token) return block(nullptr, outbound, nbytes, {});
  auto& state = sessions_[outbound.session];
  if (state.killed) return block(nullptr, outbound, nbytes, {});
  Token token = 0;
  try {
    token = decode_token(outbound.payload);
  } catch (const ProtocolError&) {
    return block(&state, outbound, nbytes, "malformed token payload");
  }
  if (!cv_.wait_for(lock, wait_, [&] { return !state.expected.empty() || state.killed; })) {
    return block(&state, outbound, nbytes, "no ground-truth token from the model party");
  }
  if (state.killed) return block(nullptr, outbound, nbytes, {});
  const Expectation exp = state.expected.front();
  state.expected.pop_front();
  const bool ok = exp.any ? token < static_cast<Token>(exp.vocab_size) : token == exp.token;
  if (!ok) return block(&state, outbound, nbytes, "token differs from model ground truth");
  state.delivered.push_back(token);
  records_.push_back({Direction::outbound, Tag::token, outbound.session, 0, 0, nbytes, 0, -1, true});
  return Verdict::pass;
}

Controller::Verdict Controller::gate_frame(std::span<const std::uint8_t> frame) {
  ProtocolMessage msg;
  try {
    msg = deserialize(frame);
  } catch (const ProtocolError&) {
    std::lock_guard lock(mu_);
    ++blocked_;
    return Verdict::block;
  }
  return gate(msg);
}

bool Controller::killed(std::uint32_t session) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session);
  return it != sessions_.end() && it->second.killed;
}

std::string Controller::kill_reason(std::uint32_t session) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session);
  return it == sessions_.end() ? std::string{} : it->second.reason;
}

TokenSeq Controller::delivered(std::uint32_t session) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session);
  return it == sessions_.end() ? TokenSeq{} : it->second.delivered;
}

std::vector<WireRecord> Controller::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

long Controller::blocked_count() const {
  std::lock_guard lock(mu_);
  return blocked_;
}

// UserParty

UserParty::UserParty(std::uint32_t first_stream_id, std::uint64_t session_id, WeightsHandle weights, Options options)
    : first_stream_id_(first_stream_id), session_id_(session_id), weights_(std::move(weights)), options_(options) {}

void UserParty::prefill(const TaggedPrompt& prompt, const ObfuscationConfig* obfuscation, const ProbOracle* oracle) {
  if (!streams_.empty()) throw ProtocolError("prefill called twice");
  std::vector<PrefillResult> results;
  try {
    const Weights& weights = weights_.get();
    config_ = weights.config;
    if (obfuscation && !prompt.spans.empty()) {
      if (!oracle) throw ConfigError("prompt obfuscation needs a language model oracle");
      const auto fakes = multi_segment_gqs(prompt, *obfuscation, *oracle);
      prompts_ = build_virtual_prompts(prompt, fakes, *obfuscation, session_id_);
    } else {
      prompts_ = plain_prompt_set(prompt.tokens);
    }
    results = prefill_batch(weights, prompts_.prompts);
  } catch (...) {
    weights_.release();
    throw;
  }
  weights_.release();

  std::vector<Outgoing> outbound;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto id = first_stream_id_ + static_cast<std::uint32_t>(i);
    SamplingStrategy sampling = options_.sampling;
    sampling.seed += i;
    streams_.push_back(Stream{id, PrivatePartition(std::move(results[i].cache.store)), Sampler(sampling)});
    Stream& s = streams_.back();
    const Token first = s.sampler.next(results[i].logits);
    pending_.push_back({Outgoing::To::model,
                        make_control(id, ControlKind::open, static_cast<std::uint32_t>(prompts_.prompts[i].size()))});
    pending_.push_back({Outgoing::To::model, make_token(id, first)});
    emit_token(outbound, s, first);
    if (first == config_.eos() || options_.max_tokens <= 0) {
      pending_.push_back({Outgoing::To::model, make_control(id, ControlKind::close)});
      s.done = true;
    }
  }
  pending_.push_back({Outgoing::To::model,
                      make_control(first_stream_id_, ControlKind::ready, static_cast<std::uint32_t>(streams_.size()))});
  // The model registers the first token before its outbound copy is gated.
  pending_.insert(pending_.end(), outbound.begin(), outbound.end());
}

std::vector<Outgoing> UserParty::take_pending() { return std::exchange(pending_, {}); }

UserParty::Stream& UserParty::stream(std::uint32_t id) {
  if (id < first_stream_id_ || id - first_stream_id_ >= streams_.size()) {
    throw ProtocolError("message for unknown stream " + std::to_string(id));
  }
  return streams_[id - first_stream_id_];
}

void UserParty::emit_token(std::vector<Outgoing>& out, Stream& s, Token token) {
  const Token sent = tamper_ ? tamper_(s.id, s.generated, token) : token;
  out.push_back({Outgoing::To::outbound, make_token(s.id, sent)});
}

std::vector<Outgoing> UserParty::handle(const ProtocolMessage& in) {
  std::vector<Outgoing> out;
  Stream& s = stream(in.session);
  switch (in.tag) {
    case Tag::query: {
      if (s.done || s.awaiting_final || in.layer != s.next_layer || in.head != s.next_head) {
        throw ProtocolError("out-of-order QUERY");
      }
      const Vector q = decode_reals(in.payload);
      if (q.size() != config_.head_dim) throw ProtocolError("QUERY width does not match head_dim");
      out.push_back({Outgoing::To::model,
                     make_partial(s.id, in.layer, in.head, private_partial(q, s.part, in.layer, in.head))});
      if (++s.next_head == config_.n_heads) {
        s.next_head = 0;
        if (++s.next_layer == config_.n_layers) s.awaiting_final = true;
      }
      break;
    }
    case Tag::final_y: {
      if (s.done || !s.awaiting_final) throw ProtocolError("out-of-order FINAL_Y");
      const Vector logits = decode_reals(in.payload);
      if (logits.size() != config_.vocab_size) throw ProtocolError("FINAL_Y width does not match vocab");
      const Token token = s.sampler.next(logits);
      ++s.generated;
      emit_token(out, s, token);
      if (token == config_.eos() || s.generated >= options_.max_tokens) {
        out.push_back({Outgoing::To::model, make_control(s.id, ControlKind::close)});
        s.done = true;
      } else {
        out.push_back({Outgoing::To::model, make_token(s.id, token)});
      }
      s.next_layer = 0;
      s.next_head = 0;
      s.awaiting_final = false;
      break;
    }
    case Tag::abort:
      s.done = true;
      break;
    default:
      throw ProtocolError(std::string("unexpected ") + tag_name(in.tag) + " at user party");
  }
  return out;
}

std::vector<std::uint32_t> UserParty::stream_ids() const {
  std::vector<std::uint32_t> ids;
  for (const auto& s : streams_) ids.push_back(s.id);
  return ids;
}

bool UserParty::finished() const {
  return std::all_of(streams_.begin(), streams_.end(), [](const Stream& s) { return s.done; });
}

std::size_t UserParty::resident_weight_matrices() const {
  // Private partitions hold K/V rows only; the handle is the sole path to weights.
  return weights_.released() ? 0 : config_.n_layers * 9 + 3;
}

// ModelParty

ModelParty::ModelParty(std::shared_ptr<const Weights> weights, Controller& controller, Options options)
    : weights_(std::move(weights)), controller_(controller), options_(options) {}

std::size_t ModelParty::attach(std::unique_ptr<Channel> link) {
  links_.push_back(std::move(link));
  return links_.size() - 1;
}

void ModelParty::send(std::size_t link, const ProtocolMessage& msg) {
  Bytes frame = serialize(msg);
  records_.push_back({Direction::model_to_user, msg.tag, msg.session, msg.layer, msg.head, frame.size(),
                      payload_scalars(msg), step_, true});
  links_[link]->send_frame(std::move(frame));
}

ProtocolMessage ModelParty::receive(std::size_t link) {
  const Bytes frame = links_[link]->receive_frame();
  ProtocolMessage msg = deserialize(frame);
  records_.push_back({Direction::user_to_model, msg.tag, msg.session, msg.layer, msg.head, frame.size(),
                      payload_scalars(msg), step_, true});
  if (msg.tag == Tag::abort) {
    throw ProtocolError("user aborted stream " + std::to_string(msg.session) + ": " +
                        std::string(msg.payload.begin(), msg.payload.end()));
  }
  return msg;
}

ModelParty::StreamState& ModelParty::stream(std::uint32_t id) {
  const auto it = streams_.find(id);
  if (it == streams_.end()) throw ProtocolError("unknown stream " + std::to_string(id));
  return it->second;
}

void ModelParty::on_stream_message(std::size_t link, const ProtocolMessage& msg) {
  const auto& c = weights_->config;
  if (msg.tag == Tag::control) {
    const Control ctl = decode_control(msg.payload);
    if (ctl.kind == ControlKind::open) {
      if (streams_.contains(msg.session)) throw ProtocolError("stream opened twice");
      streams_.emplace(msg.session, StreamState{msg.session, link, PublicPartition(c.n_layers, c.n_heads, c.head_dim),
                                                static_cast<int>(ctl.value), 0, false});
      return;
    }
    if (ctl.kind == ControlKind::close) {
      stream(msg.session).active = false;
      return;
    }
  } else if (msg.tag == Tag::token) {
    auto& st = stream(msg.session);
    if (st.link != link) throw ProtocolError("stream used from a foreign link");
    st.pending = decode_token(msg.payload);
    st.active = true;
    controller_.expect(st.id, st.pending);
    return;
  }
  throw ProtocolError(std::string("unexpected ") + tag_name(msg.tag) + " while opening streams");
}

void ModelParty::accept_streams() {
  for (std::size_t link = 0; link < links_.size(); ++link) {
    for (;;) {
      const ProtocolMessage msg = receive(link);
      if (msg.tag == Tag::control && decode_control(msg.payload).kind == ControlKind::ready) break;
      on_stream_message(link, msg);
    }
  }
}

bool ModelParty::active() const {
  return std::any_of(streams_.begin(), streams_.end(), [](const auto& kv) { return kv.second.active; });
}

void ModelParty::batch_step() {
  const auto& c = weights_->config;
  std::vector<StreamState*> batch;
  for (auto& [id, st] : streams_) {
    if (!st.active) continue;
    if (controller_.killed(id)) {
      send(st.link, make_abort(id, "session killed by controller"));
      st.active = false;
      continue;
    }
    if (st.position >= c.max_seq) throw CacheError("stream " + std::to_string(id) + " reached max_seq");
    batch.push_back(&st);
  }
  if (batch.empty()) return;
  ++step_;

  std::vector<Token> tokens;
  std::vector<int> positions;
  for (auto* st : batch) {
    tokens.push_back(st->pending);
    positions.push_back(st->position);
  }

  const auto n = batch.size();
  const Matrix logits = decode_batch(*weights_, tokens, positions, [&](int layer, const Projection& proj) {
    // Public K/V of the new token, then one QUERY per head.
    std::vector<std::vector<Vector>> queries(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      for (int h = 0; h < c.n_heads; ++h) {
        const Eigen::Index col = h * c.head_dim;
        batch[i]->pub.at(layer, h).append(proj.k.row(row).segment(col, c.head_dim),
                                          proj.v.row(row).segment(col, c.head_dim));
        queries[i].push_back(proj.q.row(row).segment(col, c.head_dim).transpose());
        send(batch[i]->link, make_query(batch[i]->id, layer, h, queries[i].back()));
      }
    }

    std::vector<std::vector<PartialAttention>> private_parts(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int h = 0; h < c.n_heads; ++h) {
        const ProtocolMessage reply = receive(batch[i]->link);
        if (reply.tag != Tag::partial || reply.session != batch[i]->id || reply.layer != layer || reply.head != h) {
          throw ProtocolError("out-of-order reply: expected PARTIAL");
        }
        PartialAttention part = decode_partial(reply.payload);
        if (part.a.size() != c.head_dim) throw ProtocolError("PARTIAL width does not match head_dim");
        private_parts[i].push_back(std::move(part));
      }
    }

    Matrix attention(static_cast<Eigen::Index>(n), c.d_model);
    for (int h = 0; h < c.n_heads; ++h) {
      std::vector<PartialAttention> public_parts;
      if (options_.batch) {
        std::vector<PublicQuery> items;
        for (std::size_t i = 0; i < n; ++i) items.push_back({queries[i][h], &batch[i]->pub});
        public_parts = batched_public_partials(items, layer, h);
      } else {
        for (std::size_t i = 0; i < n; ++i) public_parts.push_back(public_partial(queries[i][h], batch[i]->pub, layer, h));
      }
      for (std::size_t i = 0; i < n; ++i) {
        attention.row(static_cast<Eigen::Index>(i)).segment(h * c.head_dim, c.head_dim) =
            merge_partials(private_parts[i][h], public_parts[i]).transpose();
      }
    }
    return attention;
  });

  for (std::size_t i = 0; i < n; ++i) {
    const Vector row = logits.row(static_cast<Eigen::Index>(i)).transpose();
    if (options_.greedy_truth) {
      controller_.expect(batch[i]->id, argmax_token(row));
    } else {
      controller_.expect_any(batch[i]->id, c.vocab_size);
    }
    send(batch[i]->link, make_final(batch[i]->id, row));
  }

  for (auto* st : batch) {
    const ProtocolMessage reply = receive(st->link);
    if (reply.session != st->id) throw ProtocolError("reply for the wrong stream");
    ++st->position;
    if (reply.tag == Tag::token) {
      st->pending = decode_token(reply.payload);
    } else if (reply.tag == Tag::control && decode_control(reply.payload).kind == ControlKind::close) {
      st->active = false;
    } else {
      throw ProtocolError("out-of-order reply: expected TOKEN or CLOSE");
    }
  }
}

void ModelParty::shutdown() {
  for (std::size_t link = 0; link < links_.size(); ++link) {
    try {
      send(link, make_control(0, ControlKind::shutdown));
    } catch (const ProtocolError&) {
      // link already gone
    }
  }
}

// Session driver

namespace {

void run_user_endpoint(UserParty& user, Channel& link, Controller& controller) {
  const auto dispatch = [&](const std::vector<Outgoing>& outs) {
    for (const auto& o : outs) {
      if (o.to == Outgoing::To::model) {
        link.send(o.msg);
      } else {
        controller.gate(o.msg);
      }
    }
  };
  try {
    dispatch(user.take_pending());
    for (;;) {
      const ProtocolMessage msg = link.receive();
      if (msg.tag == Tag::control && decode_control(msg.payload).kind == ControlKind::shutdown) return;
      try {
        dispatch(user.handle(msg));
      } catch (const ProtocolError& e) {
        link.send(make_abort(msg.session, e.what()));
      }
    }
  } catch (const ProtocolError&) {
    // link torn down
  }
}

}  // namespace

Transcript run_sessions(std::span<UserParty* const> users, std::shared_ptr<const Weights> weights,
                        Controller& controller, const SessionOptions& options) {
  ModelParty model(weights, controller, options.model);
  std::vector<std::unique_ptr<Channel>> user_links;
  for (std::size_t u = 0; u < users.size(); ++u) {
    auto [model_end, user_end] = make_pipe(options.transport);
    model.attach(std::move(model_end));
    user_links.push_back(std::move(user_end));
  }
  std::vector<std::thread> threads;
  for (std::size_t u = 0; u < users.size(); ++u) {
    threads.emplace_back(run_user_endpoint, std::ref(*users[u]), std::ref(*user_links[u]), std::ref(controller));
  }

  std::vector<double> step_ms;
  try {
    model.accept_streams();
    while (model.active()) {
      const auto t0 = std::chrono::steady_clock::now();
      model.batch_step();
      step_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
  } catch (...) {
    model.shutdown();
    for (auto& t : threads) t.join();
    throw;
  }
  model.shutdown();
  for (auto& t : threads) t.join();

  Transcript transcript;
  transcript.records = model.records();
  transcript.steps = model.steps() + 1;
  transcript.step_ms = std::move(step_ms);
  std::vector<std::uint32_t> ids;
  for (const auto* user : users) {
    for (auto id : user->stream_ids()) ids.push_back(id);
  }
  for (const auto& r : controller.records()) {
    if (std::find(ids.begin(), ids.end(), r.session) != ids.end()) transcript.records.push_back(r);
  }
  for (auto id : ids) {
    transcript.delivered[id] = controller.delivered(id);
    if (controller.killed(id)) transcript.killed.push_back(id);
  }
  return transcript;
}

Transcript run_decode_session(UserParty& user, std::shared_ptr<const Weights> weights, Controller& controller,
                              const SessionOptions& options) {
  UserParty* users[] = {&user};
  return run_sessions(users, std::move(weights), controller, options);
}

TokenSeq authentic_response(const UserParty& user, const Transcript& transcript) {
  std::vector<TokenSeq> responses;
  for (auto id : user.stream_ids()) {
    const auto it = transcript.delivered.find(id);
    responses.push_back(it == transcript.delivered.end() ? TokenSeq{} : it->second);
  }
  return winnow(responses, user.prompts().idx);
}

std::string dump_transcript(const Transcript& transcript) {
  std::ostringstream out;
  for (const auto& r : transcript.records) {
    out << direction_name(r.dir) << ' ' << tag_name(r.tag) << ' ' << r.session << ' ' << r.layer << ' ' << r.head
        << ' ' << r.nbytes << '\n';
  }
  return out.str();
}

CommReport comm_accounting(const Transcript& transcript) {
  CommReport report;
  std::map<std::pair<long, std::uint32_t>, CommStep> grouped;
  for (const auto& r : transcript.records) {
    if (r.dir == Direction::outbound) {
      if (r.passed) report.bytes_outbound += r.nbytes;
      continue;
    }
    (r.dir == Direction::model_to_user ? report.bytes_to_user : report.bytes_to_model) += r.nbytes;
    if (r.step < 0 || r.tag == Tag::control || r.tag == Tag::abort) continue;
    auto& s = grouped[{r.step, r.session}];
    s.step = r.step;
    s.session = r.session;
    ++s.messages;
    (r.dir == Direction::model_to_user ? s.bytes_to_user : s.bytes_to_model) += r.nbytes;
    if (r.tag == Tag::query) s.query_scalars += r.scalars;
    if (r.tag == Tag::partial) s.partial_scalars += r.scalars;
    if (r.tag == Tag::final_y) s.final_scalars += r.scalars;
    if (r.tag == Tag::query || r.tag == Tag::partial) report.layer_scalars[r.layer] += r.scalars;
  }
  for (auto& [key, s] : grouped) report.steps.push_back(s);
  if (!report.steps.empty()) {
    report.round_scalars = report.steps.front().query_scalars + report.steps.front().partial_scalars;
    for (const auto& s : report.steps) {
      if (s.query_scalars + s.partial_scalars != report.round_scalars) report.constant_per_round = false;
    }
  }
  return report;
}

std::size_t predicted_round_scalars(const ModelConfig& config) {
  return static_cast<std::size_t>(config.n_layers) * static_cast<std::size_t>(config.n_heads) *
         (2 * static_cast<std::size_t>(config.head_dim) + 2);
}

std::string CommReport::summary(const ModelConfig& config) const {
  std::ostringstream out;
  out << "stream-rounds measured: " << steps.size() << '\n'
      << "scalars per round (query + partial): " << round_scalars
      << (constant_per_round ? " (constant across rounds)" : " (NOT constant)") << '\n'
      << "predicted n_layers*n_heads*(2*head_dim+2): " << predicted_round_scalars(config) << '\n'
      << "per head: query " << config.head_dim << ", partial " << config.head_dim + 2
      << " (a, gamma and the running max m; without m the exchange would be 2*head_dim+1 scalars, "
         "m is carried so the merge can rescale safely)\n"
      << "bytes model->user " << bytes_to_user << ", user->model " << bytes_to_model << ", outbound "
      << bytes_outbound << '\n';
  return out.str();
}

}  // namespace ospd
