#pragma once

#include <concepts>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ospd/partition.hpp"

namespace ospd {

enum class Tag : std::uint8_t {
  query = 0x01,
  partial = 0x02,
  token = 0x03,
  final_y = 0x04,
  control = 0x05,
  abort = 0x06,
};

const char* tag_name(Tag tag);

using Bytes = std::vector<std::uint8_t>;

struct ProtocolMessage {
  Tag tag = Tag::control;
  std::uint32_t session = 0;
  std::uint16_t layer = 0;
  std::uint16_t head = 0;
  Bytes payload;

  bool operator==(const ProtocolMessage&) const = default;
};

/// Frame layout, all little-endian:
///   u32 length of everything after this field
///   u8 tag | u32 session | u16 layer | u16 head | u32 payload length | payload
inline constexpr std::size_t kLengthPrefix = 4;
inline constexpr std::size_t kHeaderBytes = 1 + 4 + 2 + 2 + 4;
inline constexpr std::size_t kFrameOverhead = kLengthPrefix + kHeaderBytes;
inline constexpr std::uint32_t kMaxFrameBody = 1u << 26;

Bytes serialize(const ProtocolMessage& msg);
/// Exactly one frame; throws ProtocolError on truncation, trailing bytes,
/// unknown tags or inconsistent lengths.
ProtocolMessage deserialize(std::span<const std::uint8_t> frame);

// Payload codecs. These overloads are the complete set of values that can
// be put on the wire.
Bytes encode_payload(const Vector& reals);
Bytes encode_payload(const PartialAttention& partial);
Bytes encode_payload(Token token);

template <typename T>
concept WireEncodable = requires(const T& value) {
  { encode_payload(value) } -> std::same_as<Bytes>;
};

Vector decode_reals(std::span<const std::uint8_t> payload);
PartialAttention decode_partial(std::span<const std::uint8_t> payload);
Token decode_token(std::span<const std::uint8_t> payload);

enum class ControlKind : std::uint8_t {
  open = 1,      // value: prompt length of the stream
  close = 2,     // stream finished on the user side
  ready = 3,     // value: number of streams opened by this user
  shutdown = 4,  // model tells a user endpoint to stop
};

struct Control {
  ControlKind kind;
  std::uint32_t value = 0;
};

ProtocolMessage make_query(std::uint32_t session, int layer, int head, const Vector& q);
ProtocolMessage make_partial(std::uint32_t session, int layer, int head, const PartialAttention& partial);
ProtocolMessage make_token(std::uint32_t session, Token token);
ProtocolMessage make_final(std::uint32_t session, const Vector& logits);
ProtocolMessage make_control(std::uint32_t session, ControlKind kind, std::uint32_t value = 0);
ProtocolMessage make_abort(std::uint32_t session, const std::string& reason);
Control decode_control(std::span<const std::uint8_t> payload);

/// Number of 64-bit reals carried by a message's payload.
std::size_t payload_scalars(const ProtocolMessage& msg);

/// One end of a bidirectional framed link.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send_frame(Bytes frame) = 0;
  /// Blocks until a whole frame is available.
  virtual Bytes receive_frame() = 0;

  void send(const ProtocolMessage& msg) { send_frame(serialize(msg)); }
  ProtocolMessage receive() { return deserialize(receive_frame()); }
};

enum class Transport { in_process, tcp };

/// Connected endpoint pair. The tcp variant goes through a localhost socket.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_pipe(Transport transport);

}  // namespace ospd
