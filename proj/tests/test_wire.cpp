#include <gtest/gtest.h>

#include <random>

#include "sfl/wire.hpp"
#include "support/oracles.hpp"

using namespace sfl;
using sfl::testing::random_message;
using sfl::testing::same_message;

TEST(Wire, EmptyControlIsHeaderOnly) {
  Message m;
  m.text = "";
  auto f = encode_frame(m);
  EXPECT_EQ(f.size(), kFrameHeaderSize);
  EXPECT_EQ(f.size(), 16u);
  EXPECT_TRUE(same_message(decode_message(f), m));
}

TEST(Wire, ActivationFrameSize) {
  Message m;
  m.tag = MessageTag::activation;
  m.tensors.push_back({"s0:0", Tensor::zeros({4, 32, 16, 16})});
  auto f = encode_frame(m);
  const std::size_t tensor_header = 4 + 4 + 1 + 1 + 4 * 4;
  EXPECT_EQ(f.size(), 16 + 4 + tensor_header + 4u * 32 * 16 * 16 * 4);
  EXPECT_EQ(tensor_bytes(m), 131072);
}

TEST(Wire, RandomRoundTrips) {
  std::mt19937_64 rng(123);
  for (int i = 0; i < 1200; ++i) {
    auto m = random_message(rng);
    auto back = decode_message(encode_frame(m));
    ASSERT_TRUE(same_message(m, back)) << "case " << i;
  }
}

TEST(Wire, KibPayloadRoundTrips) {
  std::mt19937_64 rng(5);
  Message m;
  m.tag = MessageTag::control;
  for (int i = 0; i < 1024; ++i) m.text.push_back(static_cast<char>(rng()));
  EXPECT_TRUE(same_message(decode_message(encode_frame(m)), m));
}

TEST(Wire, F64IsBitExact) {
  Message m;
  m.tag = MessageTag::weights_upload;
  m.tensors.push_back({"w", Tensor::from_vector({3}, std::vector<double>{0.1, -1e-300, 3.141592653589793})});
  auto back = decode_message(encode_frame(m));
  EXPECT_EQ(back.tensors[0].tensor.dtype(), DType::f64);
  EXPECT_TRUE(bit_equal(back.tensors[0].tensor, m.tensors[0].tensor));
}

TEST(Wire, WeightsCarryNamedTensors) {
  Message m;
  m.tag = MessageTag::weights_upload;
  for (int k = 0; k < 5; ++k) m.tensors.push_back({"layer" + std::to_string(k) + ".é", Tensor::zeros({2})});
  auto back = decode_message(encode_frame(m));
  ASSERT_EQ(back.tensors.size(), 5u);
  EXPECT_EQ(back.tensors[3].name, "layer3.é");
}

TEST(Wire, MalformedFramesThrow) {
  Message m;
  m.tag = MessageTag::activation;
  m.tensors.push_back({"x", Tensor::zeros({2, 2})});
  const auto good = encode_frame(m);

  auto bad = good;
  bad[0] ^= 0xff;
  EXPECT_THROW(decode_message(bad), ProtocolError);
  bad = good;
  bad[2] = 9;
  EXPECT_THROW(decode_message(bad), ProtocolError);
  bad = good;
  bad[3] = 0;
  EXPECT_THROW(decode_message(bad), ProtocolError);
  bad = good;
  bad[16 + 4 + 4 + 1] = 7;  // dtype code
  EXPECT_THROW(decode_message(bad), ProtocolError);
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(decode_message(bad), ProtocolError);
  bad = good;
  bad[12] += 1;  // length beyond data
  EXPECT_THROW(decode_message(bad), ProtocolError);
}

TEST(Wire, IncrementalDecode) {
  Message a, b;
  a.text = "hello";
  b.tag = MessageTag::output_grad;
  b.tensors.push_back({"g", Tensor::full({3}, 2.0)});
  auto fa = encode_frame(a), fb = encode_frame(b);
  std::vector<std::uint8_t> stream(fa);
  stream.insert(stream.end(), fb.begin(), fb.end());
  for (std::size_t cut = 0; cut < fa.size(); ++cut) {
    auto r = decode_frame(std::span(stream).first(cut));
    EXPECT_EQ(r.status, DecodeResult::Status::need_more_data);
  }
  auto r1 = decode_frame(stream);
  ASSERT_EQ(r1.status, DecodeResult::Status::ok);
  EXPECT_EQ(r1.consumed, fa.size());
  auto r2 = decode_frame(std::span(stream).subspan(r1.consumed));
  ASSERT_EQ(r2.status, DecodeResult::Status::ok);
  EXPECT_TRUE(same_message(r2.message, b));
}

TEST(Wire, PayloadCheck) {
  Message m;
  m.tag = MessageTag::activation;
  m.tensors.push_back({"a", Tensor::zeros({2, 4, 8, 8})});
  const std::string names[] = {"a"};
  const PortShape ok[] = {{PortKind::tensor, 4, 8, 8}};
  const PortShape wrong[] = {{PortKind::tensor, 4, 4, 4}};
  EXPECT_NO_THROW(check_payload(m, names, ok));
  EXPECT_THROW(check_payload(m, names, wrong), ProtocolError);
  const std::string other[] = {"b"};
  EXPECT_THROW(check_payload(m, other, ok), ProtocolError);
}
