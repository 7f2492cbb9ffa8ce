#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ospd/obfuscation.hpp"
#include "ospd/wire.hpp"

namespace ospd {

/// Read access to shared weights that can be revoked. Every get() is counted;
/// any get() after release() is recorded and throws WeightAccessError.
class WeightsHandle {
 public:
  WeightsHandle() = default;
  explicit WeightsHandle(std::shared_ptr<const Weights> weights) : weights_(std::move(weights)) {}

  const Weights& get();
  void release() { weights_.reset(); released_ = true; }
  bool released() const { return released_; }
  long accesses() const { return accesses_; }
  long accesses_after_release() const { return violations_; }

 private:
  std::shared_ptr<const Weights> weights_;
  bool released_ = false;
  long accesses_ = 0;
  long violations_ = 0;
};

enum class Direction { user_to_model, model_to_user, outbound };

const char* direction_name(Direction dir);

struct WireRecord {
  Direction dir;
  Tag tag;
  std::uint32_t session;
  std::uint16_t layer;
  std::uint16_t head;
  std::size_t nbytes;
  std::size_t scalars;
  long step;     // decode step of the model barrier, -1 outside decode
  bool passed;   // outbound only: whether the controller let it through
};

/// Trusted gate on everything leaving the enclave boundary toward users.
/// The model party registers the ground-truth token of each step; only TOKEN
/// frames matching it pass. A mismatch kills the session.
class Controller {
 public:
  enum class Verdict { pass, block };

  explicit Controller(std::chrono::milliseconds wait = std::chrono::seconds(10)) : wait_(wait) {}

  /// Exact expected token for the next outbound TOKEN of a session.
  void expect(std::uint32_t session, Token token);
  /// Non-greedy sampling: any in-vocabulary token passes.
  void expect_any(std::uint32_t session, int vocab_size);

  Verdict gate(const ProtocolMessage& outbound);
  Verdict gate_frame(std::span<const std::uint8_t> frame);

  bool killed(std::uint32_t session) const;
  std::string kill_reason(std::uint32_t session) const;
  TokenSeq delivered(std::uint32_t session) const;
  std::vector<WireRecord> records() const;
  long blocked_count() const;

 private:
  struct Expectation {
    bool any = false;
    Token token = 0;
    int vocab_size = 0;
  };
  struct SessionState {
    std::deque<Expectation> expected;
    TokenSeq delivered;
    bool killed = false;
    std::string reason;
  };
  Verdict block(SessionState* state, const ProtocolMessage& msg, std::size_t nbytes, const std::string& why);

  std::chrono::milliseconds wait_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint32_t, SessionState> sessions_;
  std::vector<WireRecord> records_;
  long blocked_ = 0;
};

/// A message produced by the user party and where it goes.
struct Outgoing {
  enum class To { model, outbound } to;
  ProtocolMessage msg;
};

/// The per-user process: holds the virtual prompts and their private KV rows.
/// Weights are reachable only until prefill returns.
class UserParty {
 public:
  struct Options {
    int max_tokens = 16;
    SamplingStrategy sampling = SamplingStrategy::greedy();
  };

  UserParty(std::uint32_t first_stream_id, std::uint64_t session_id, WeightsHandle weights, Options options);

  /// Builds the virtual prompt set (a single stream when obfuscation is null),
  /// prefills all prompts as one batch, releases the weights and queues each
  /// stream's OPEN and first TOKEN. ObfuscationAbort propagates.
  void prefill(const TaggedPrompt& prompt, const ObfuscationConfig* obfuscation, const ProbOracle* oracle);

  /// Messages queued by prefill, in order.
  std::vector<Outgoing> take_pending();

  /// Protocol step. Throws ProtocolError on out-of-order input.
  std::vector<Outgoing> handle(const ProtocolMessage& in);

  const VirtualPromptSet& prompts() const { return prompts_; }
  std::vector<std::uint32_t> stream_ids() const;
  std::uint32_t authentic_stream() const { return first_stream_id_ + static_cast<std::uint32_t>(prompts_.idx); }
  bool finished() const;
  std::uint64_t session_id() const { return session_id_; }

  /// Weight matrices still reachable from this party.
  std::size_t resident_weight_matrices() const;
  const WeightsHandle& weights_handle() const { return weights_; }

  /// Adversarial hook: rewrites the outbound copy of a sampled token.
  using Tamper = std::function<Token(std::uint32_t stream, int step, Token token)>;
  void set_outbound_tamper(Tamper tamper) { tamper_ = std::move(tamper); }

 private:
  struct Stream {
    std::uint32_t id;
    PrivatePartition part;
    Sampler sampler;
    int generated = 0;
    int next_layer = 0;
    int next_head = 0;
    bool awaiting_final = false;
    bool done = false;
  };
  Stream& stream(std::uint32_t id);
  void emit_token(std::vector<Outgoing>& out, Stream& s, Token token);

  std::uint32_t first_stream_id_;
  std::uint64_t session_id_;
  WeightsHandle weights_;
  Options options_;
  ModelConfig config_;
  VirtualPromptSet prompts_;
  std::vector<Stream> streams_;
  std::vector<Outgoing> pending_;
  Tamper tamper_;
};

/// The LLM side: shared weights, public KV rows per stream, batched decode.
class ModelParty {
 public:
  struct Options {
    bool batch = true;        // batched public partials across streams
    bool greedy_truth = true; // false: controller checks support only
  };

  ModelParty(std::shared_ptr<const Weights> weights, Controller& controller, Options options);

  /// Registers a user link; returns its index.
  std::size_t attach(std::unique_ptr<Channel> link);

  /// Reads OPEN/TOKEN/CLOSE messages from every link until each sends READY.
  void accept_streams();

  /// One token barrier over every active stream: QUERY/PARTIAL per layer and
  /// head, merge, FINAL_Y, then one TOKEN or CLOSE reply per stream.
  void batch_step();

  bool active() const;
  long steps() const { return step_; }
  /// Private K/V rows held by this party. Always zero.
  std::size_t private_rows() const { return 0; }
  std::vector<WireRecord> records() const { return records_; }
  /// Sends SHUTDOWN on every link.
  void shutdown();

 private:
  struct StreamState {
    std::uint32_t id;
    std::size_t link;
    PublicPartition pub;
    int position = 0;
    Token pending = 0;
    bool active = false;
  };
  void send(std::size_t link, const ProtocolMessage& msg);
  ProtocolMessage receive(std::size_t link);
  void on_stream_message(std::size_t link, const ProtocolMessage& msg);
  StreamState& stream(std::uint32_t id);

  std::shared_ptr<const Weights> weights_;
  Controller& controller_;
  Options options_;
  std::vector<std::unique_ptr<Channel>> links_;
  std::map<std::uint32_t, StreamState> streams_;
  std::vector<WireRecord> records_;
  long step_ = -1;
};

struct Transcript {
  std::vector<WireRecord> records;  // model-side wire records, then outbound records
  std::map<std::uint32_t, TokenSeq> delivered;
  std::vector<std::uint32_t> killed;
  long steps = 0;
  std::vector<double> step_ms;  // wall time of each batched decode step
};

struct SessionOptions {
  Transport transport = Transport::in_process;
  ModelParty::Options model;
};

/// Runs already-prefilled user parties against one model party until every
/// stream closes. Each user runs on its own thread behind its own link.
Transcript run_sessions(std::span<UserParty* const> users, std::shared_ptr<const Weights> weights,
                        Controller& controller, const SessionOptions& options = {});

Transcript run_decode_session(UserParty& user, std::shared_ptr<const Weights> weights, Controller& controller,
                              const SessionOptions& options = {});

/// User-side view: the winnowed authentic response.
TokenSeq authentic_response(const UserParty& user, const Transcript& transcript);

/// `dir tag session layer head nbytes`, one line per message.
std::string dump_transcript(const Transcript& transcript);

struct CommStep {
  long step;
  std::uint32_t session;
  std::size_t query_scalars = 0;
  std::size_t partial_scalars = 0;
  std::size_t final_scalars = 0;
  std::size_t bytes_to_user = 0;
  std::size_t bytes_to_model = 0;
  std::size_t messages = 0;
};

struct CommReport {
  std::vector<CommStep> steps;            // one per (decode step, stream)
  std::map<int, std::size_t> layer_scalars;  // query + partial scalars per layer, summed
  std::size_t bytes_to_user = 0;
  std::size_t bytes_to_model = 0;
  std::size_t bytes_outbound = 0;
  bool constant_per_round = true;
  std::size_t round_scalars = 0;  // query + partial scalars of one stream in one step

  std::string summary(const ModelConfig& config) const;
};

CommReport comm_accounting(const Transcript& transcript);

/// Query plus partial scalars of one decode step: n_layers * n_heads * (2 head_dim + 2).
std::size_t predicted_round_scalars(const ModelConfig& config);

}  // namespace ospd
