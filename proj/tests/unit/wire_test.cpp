#include "ospd/wire.hpp"

#include <gtest/gtest.h>

#include <thread>

namespace ospd {
namespace {

TEST(Frame, QueryRoundTrip) {
  const Vector q = seeded_matrix(1, 8, 1, 1.0);
  const auto msg = make_query(17, 1, 3, q);
  const Bytes frame = serialize(msg);
  EXPECT_EQ(frame.size(), 81u);
  const auto back = deserialize(frame);
  EXPECT_EQ(back, msg);
  EXPECT_EQ(decode_reals(back.payload), q);
  EXPECT_EQ(payload_scalars(back), 8u);
}

TEST(Frame, PartialRoundTripIsBitExact) {
  const PartialAttention p{seeded_matrix(2, 4, 1, 1.0), 2.5, -0.125};
  const auto back = decode_partial(deserialize(serialize(make_partial(3, 0, 1, p))).payload);
  EXPECT_EQ(back.a, p.a);
  EXPECT_EQ(back.gamma, p.gamma);
  EXPECT_EQ(back.m, p.m);
  EXPECT_EQ(decode_token(make_token(1, 99).payload), 99u);
}

TEST(Frame, EmptyPartialSurvivesInfinity) {
  const auto back = decode_partial(encode_payload(empty_partial(4)));
  EXPECT_TRUE(back.empty());
  EXPECT_TRUE(std::isinf(back.m));
}

TEST(Frame, TruncatedFrameRejected) {
  Bytes frame = serialize(make_token(5, 7));
  frame.pop_back();
  EXPECT_THROW(deserialize(frame), ProtocolError);
  EXPECT_THROW(deserialize(Bytes{1, 2, 3}), ProtocolError);
}

TEST(Frame, UnknownTagRejected) {
  Bytes frame = serialize(make_token(5, 7));
  frame[4] = 0x7f;
  EXPECT_THROW(deserialize(frame), ProtocolError);
}

TEST(Frame, LengthOverflowRejected) {
  Bytes frame = serialize(make_token(5, 7));
  frame[0] = frame[1] = frame[2] = frame[3] = 0xff;
  EXPECT_THROW(deserialize(frame), ProtocolError);
}

TEST(Frame, TrailingBytesRejected) {
  Bytes frame = serialize(make_token(5, 7));
  frame.push_back(0);
  EXPECT_THROW(deserialize(frame), ProtocolError);
}

TEST(Control, RoundTripAndMalformed) {
  const auto c = decode_control(make_control(2, ControlKind::open, 12).payload);
  EXPECT_EQ(c.kind, ControlKind::open);
  EXPECT_EQ(c.value, 12u);
  EXPECT_THROW(decode_control(Bytes{9, 0, 0, 0, 0}), ProtocolError);
}

void exchange(Transport transport) {
  auto [a, b] = make_pipe(transport);
  const Vector q = seeded_matrix(4, 16, 1, 1.0);
  std::thread peer([&b] {
    for (int i = 0; i < 3; ++i) {
      auto msg = b->receive();
      msg.session += 100;
      b->send(msg);
    }
  });
  for (int i = 0; i < 3; ++i) {
    a->send(make_query(i, 0, 0, q));
    const auto reply = a->receive();
    EXPECT_EQ(reply.session, static_cast<std::uint32_t>(100 + i));
    EXPECT_EQ(decode_reals(reply.payload), q);
  }
  peer.join();
}

TEST(Pipe, InProcess) { exchange(Transport::in_process); }
TEST(Pipe, Tcp) { exchange(Transport::tcp); }

}  // namespace
}  // namespace ospd
