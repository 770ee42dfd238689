#include <gtest/gtest.h>

#include <random>

#include "message_gen.hpp"
#include "mtcd/protocol.hpp"

using namespace mtcd;
using mtcd::testing::MessageGen;

namespace {

Message decode_bytes(const Bytes& b) {
  SpanSource src(b);
  return decode(src);
}

}  // namespace

TEST(Protocol, RoundTripAllKindsRandomized) {
  MessageGen gen(20240611);
  constexpr int kMessages = 13 * 800;  // 10400
  for (int i = 0; i < kMessages; ++i) {
    const Message m = gen.message(1 + i % 13);
    const Bytes frame = encode(m);
    ASSERT_EQ(static_cast<int>(frame[4]), 1 + i % 13);
    SpanSource src(frame);
    const Message back = decode(src);
    ASSERT_EQ(back, m) << "kind " << to_string(m.kind()) << " payload " << serialize_payload(m);
    ASSERT_EQ(src.remaining(), 0u);
    // Canonical: re-encoding the decoded message is byte-identical.
    ASSERT_EQ(encode(back), frame);
  }
}

TEST(Protocol, EveryStrictPrefixIsRejected) {
  MessageGen gen(7);
  for (int i = 0; i < 300; ++i) {
    const Bytes frame = encode(gen.any());
    for (std::size_t cut = 0; cut < frame.size(); ++cut) {
      Bytes prefix(frame.begin(), frame.begin() + static_cast<std::ptrdiff_t>(cut));
      EXPECT_THROW(decode_bytes(prefix), ConnectionLost) << "cut at " << cut;
      FrameDecoder dec;
      dec.feed(prefix);
      EXPECT_FALSE(dec.next().has_value());
      EXPECT_EQ(dec.mid_frame(), cut > 0);
    }
  }
}

TEST(Protocol, ConcatenatedFramesDecodeInOrder) {
  MessageGen gen(99);
  for (int i = 0; i < 500; ++i) {
    const Message a = gen.any();
    const Message b = gen.any();
    Bytes both = encode(a);
    encode_into(b, both);
    SpanSource src(both);
    EXPECT_EQ(decode(src), a);
    EXPECT_EQ(decode(src), b);
    EXPECT_EQ(src.remaining(), 0u);
  }
}

TEST(Protocol, IncrementalDecoderHandlesArbitrarySplits) {
  MessageGen gen(3);
  std::vector<Message> sent;
  Bytes stream;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(gen.any());
    encode_into(sent.back(), stream);
  }
  std::mt19937 rng(5);
  FrameDecoder dec;
  std::vector<Message> got;
  for (std::size_t pos = 0; pos < stream.size();) {
    const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % 97);
    dec.feed(std::span(stream).subspan(pos, n));
    pos += n;
    while (auto m = dec.next()) got.push_back(std::move(*m));
  }
  EXPECT_EQ(got, sent);
  EXPECT_FALSE(dec.mid_frame());
}

TEST(Protocol, FrameLayout) {
  const Bytes frame = encode(Heartbeat{"e1"});
  const std::string payload = R"({"executor_id":"e1"})";
  ASSERT_EQ(frame.size(), 4 + 1 + payload.size());
  const std::uint32_t len = (std::to_integer<std::uint32_t>(frame[0]) << 24) |
                            (std::to_integer<std::uint32_t>(frame[1]) << 16) |
                            (std::to_integer<std::uint32_t>(frame[2]) << 8) | std::to_integer<std::uint32_t>(frame[3]);
  EXPECT_EQ(len, 1 + payload.size());
  EXPECT_EQ(std::to_integer<int>(frame[4]), 5);
  EXPECT_EQ(std::string(reinterpret_cast<const char*>(frame.data()) + 5, payload.size()), payload);
}

TEST(Protocol, PayloadKeysAreSorted) {
  const std::string text = serialize_payload(RegisterAck{"e7", 5000});
  EXPECT_LT(text.find("executor_id"), text.find("heartbeat_interval_ms"));
}

TEST(Protocol, RejectsBadTagsAndPayloads) {
  Bytes frame = encode(Heartbeat{"x"});
  frame[4] = std::byte{0};
  EXPECT_THROW(decode_bytes(frame), ProtocolError);
  frame[4] = std::byte{14};
  EXPECT_THROW(decode_bytes(frame), ProtocolError);

  EXPECT_THROW(parse_payload(5, "not json"), ProtocolError);
  EXPECT_THROW(parse_payload(5, "{}"), ProtocolError);

  const Bytes empty{std::byte{0}, std::byte{0}, std::byte{0}, std::byte{0}};
  EXPECT_THROW(decode_bytes(empty), ProtocolError);
}

TEST(Protocol, FrameSizeLimit) {
  EXPECT_NO_THROW(check_payload_size(kMaxPayloadBytes));
  EXPECT_THROW(check_payload_size(kMaxPayloadBytes + 1), FrameTooLarge);
}

TEST(Protocol, ValidateTaskDescriptor) {
  TaskDescriptor t;
  t.task_id = "a";
  t.executable = "/bin/true";
  EXPECT_NO_THROW(validate(t));
  auto bad = t;
  bad.task_id.clear();
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = t;
  bad.wall_time_limit_s = 0;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = t;
  bad.retries_remaining = -1;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = t;
  bad.static_inputs = {{"in", "/x", DataKind::kStatic, {}}, {"in", "/y", DataKind::kStatic, {}}};
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = t;
  bad.outputs = {{"../escape", "/x", DataKind::kDynamic, {}}};
  EXPECT_THROW(validate(bad), std::invalid_argument);
}
