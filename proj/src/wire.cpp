#include "ospd/wire.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>

namespace ospd {

namespace {

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(Bytes& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8));
}

double get_f64(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

bool known_tag(std::uint8_t t) { return t >= 0x01 && t <= 0x06; }

class InProcessQueue {
 public:
  void push(Bytes frame) {
    {
      std::lock_guard lock(mu_);
      frames_.push_back(std::move(frame));
    }
    cv_.notify_one();
  }
  Bytes pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !frames_.empty(); });
    Bytes f = std::move(frames_.front());
    frames_.pop_front();
    return f;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Bytes> frames_;
};

class InProcessChannel final : public Channel {
 public:
  InProcessChannel(std::shared_ptr<InProcessQueue> out, std::shared_ptr<InProcessQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  void send_frame(Bytes frame) override { out_->push(std::move(frame)); }
  Bytes receive_frame() override { return in_->pop(); }

 private:
  std::shared_ptr<InProcessQueue> out_;
  std::shared_ptr<InProcessQueue> in_;
};

class SocketChannel final : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~SocketChannel() override { ::close(fd_); }
  SocketChannel(const SocketChannel&) = delete;
  SocketChannel& operator=(const SocketChannel&) = delete;

  void send_frame(Bytes frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw ProtocolError(std::string("socket send failed: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(n);
    }
  }

  Bytes receive_frame() override {
    Bytes frame(kLengthPrefix);
    read_exact(frame.data(), kLengthPrefix);
    const std::uint32_t body = get_u32(frame, 0);
    if (body > kMaxFrameBody) throw ProtocolError("frame length overflow");
    frame.resize(kLengthPrefix + body);
    read_exact(frame.data() + kLengthPrefix, body);
    return frame;
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t len) {
    std::size_t got = 0;
    while (got < len) {
      const ssize_t n = ::recv(fd_, dst + got, len - got, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw ProtocolError("socket closed mid-frame");
      got += static_cast<std::size_t>(n);
    }
  }
  int fd_;
};

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_tcp_pipe() {
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) throw ProtocolError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof(addr);
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(listener, 1) != 0 ||
      ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    ::close(listener);
    throw ProtocolError("cannot listen on localhost");
  }
  const int client = ::socket(AF_INET, SOCK_STREAM, 0);
  if (client < 0 || ::connect(client, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listener);
    if (client >= 0) ::close(client);
    throw ProtocolError("cannot connect to localhost");
  }
  const int server = ::accept(listener, nullptr, nullptr);
  ::close(listener);
  if (server < 0) {
    ::close(client);
    throw ProtocolError("accept() failed");
  }
  return {std::make_unique<SocketChannel>(server), std::make_unique<SocketChannel>(client)};
}

}  // namespace

const char* tag_name(Tag tag) {
  switch (tag) {
    case Tag::query: return "QUERY";
    case Tag::partial: return "PARTIAL";
    case Tag::token: return "TOKEN";
    case Tag::final_y: return "FINAL_Y";
    case Tag::control: return "CONTROL";
    case Tag::abort: return "ABORT";
  }
  return "UNKNOWN";
}

Bytes serialize(const ProtocolMessage& msg) {
  if (msg.payload.size() > kMaxFrameBody - kHeaderBytes) throw ProtocolError("payload too large");
  Bytes out;
  out.reserve(kFrameOverhead + msg.payload.size());
  put_u32(out, static_cast<std::uint32_t>(kHeaderBytes + msg.payload.size()));
  out.push_back(static_cast<std::uint8_t>(msg.tag));
  put_u32(out, msg.session);
  put_u16(out, msg.layer);
  put_u16(out, msg.head);
  put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  return out;
}

ProtocolMessage deserialize(std::span<const std::uint8_t> frame) {
  if (frame.size() < kFrameOverhead) throw ProtocolError("truncated frame");
  const std::uint32_t body = get_u32(frame, 0);
  if (body > kMaxFrameBody) throw ProtocolError("frame length overflow");
  if (frame.size() != kLengthPrefix + body) throw ProtocolError("frame length does not match buffer");
  if (!known_tag(frame[4])) throw ProtocolError("unknown tag");
  const std::uint32_t payload_len = get_u32(frame, 13);
  if (payload_len != body - kHeaderBytes) throw ProtocolError("payload length mismatch");
  ProtocolMessage msg;
  msg.tag = static_cast<Tag>(frame[4]);
  msg.session = get_u32(frame, 5);
  msg.layer = get_u16(frame, 9);
  msg.head = get_u16(frame, 11);
  msg.payload.assign(frame.begin() + kFrameOverhead, frame.end());
  return msg;
}

Bytes encode_payload(const Vector& reals) {
  Bytes out;
  out.reserve(8 * static_cast<std::size_t>(reals.size()));
  for (Eigen::Index i = 0; i < reals.size(); ++i) put_f64(out, reals(i));
  return out;
}

Bytes encode_payload(const PartialAttention& partial) {
  Bytes out = encode_payload(partial.a);
  put_f64(out, partial.gamma);
  put_f64(out, partial.m);
  return out;
}

Bytes encode_payload(Token token) {
  Bytes out;
  put_u32(out, token);
  return out;
}

Vector decode_reals(std::span<const std::uint8_t> payload) {
  if (payload.size() % 8 != 0) throw ProtocolError("real payload not a multiple of 8 bytes");
  Vector v(static_cast<Eigen::Index>(payload.size() / 8));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = get_f64(payload, static_cast<std::size_t>(8 * i));
  return v;
}

PartialAttention decode_partial(std::span<const std::uint8_t> payload) {
  const Vector all = decode_reals(payload);
  if (all.size() < 3) throw ProtocolError("partial payload too short");
  const Eigen::Index d = all.size() - 2;
  return {all.head(d), all(d), all(d + 1)};
}

Token decode_token(std::span<const std::uint8_t> payload) {
  if (payload.size() != 4) throw ProtocolError("token payload must be 4 bytes");
  return get_u32(payload, 0);
}

ProtocolMessage make_query(std::uint32_t session, int layer, int head, const Vector& q) {
  return {Tag::query, session, static_cast<std::uint16_t>(layer), static_cast<std::uint16_t>(head), encode_payload(q)};
}

ProtocolMessage make_partial(std::uint32_t session, int layer, int head, const PartialAttention& partial) {
  return {Tag::partial, session, static_cast<std::uint16_t>(layer), static_cast<std::uint16_t>(head),
          encode_payload(partial)};
}

ProtocolMessage make_token(std::uint32_t session, Token token) {
  return {Tag::token, session, 0, 0, encode_payload(token)};
}

ProtocolMessage make_final(std::uint32_t session, const Vector& logits) {
  return {Tag::final_y, session, 0, 0, encode_payload(logits)};
}

ProtocolMessage make_control(std::uint32_t session, ControlKind kind, std::uint32_t value) {
  Bytes payload{static_cast<std::uint8_t>(kind)};
  put_u32(payload, value);
  return {Tag::control, session, 0, 0, std::move(payload)};
}

ProtocolMessage make_abort(std::uint32_t session, const std::string& reason) {
  return {Tag::abort, session, 0, 0, Bytes(reason.begin(), reason.end())};
}

Control decode_control(std::span<const std::uint8_t> payload) {
  if (payload.size() != 5 || payload[0] < 1 || payload[0] > 4) throw ProtocolError("malformed control payload");
  return {static_cast<ControlKind>(payload[0]), get_u32(payload, 1)};
}

std::size_t payload_scalars(const ProtocolMessage& msg) {
  switch (msg.tag) {
    case Tag::query:
    case Tag::partial:
    case Tag::final_y: return msg.payload.size() / 8;
    default: return 0;
  }
}

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_pipe(Transport transport) {
  if (transport == Transport::tcp) return make_tcp_pipe();
  auto a = std::make_shared<InProcessQueue>();
  auto b = std::make_shared<InProcessQueue>();
  return {std::make_unique<InProcessChannel>(a, b), std::make_unique<InProcessChannel>(b, a)};
}

}  // namespace ospd
