#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfl/blocks.hpp"
#include "sfl/module.hpp"

namespace sfl {

enum class MessageTag : std::uint8_t {
  activation = 1,
  server_output = 2,
  output_grad = 3,
  activation_grad = 4,
  weights_upload = 5,
  global_weights = 6,
  control = 7,
};

const char* tag_name(MessageTag tag);

// CONTROL messages carry `text` as their raw payload; every other tag
// carries an ordered list of named, detached tensors.
struct Message {
  MessageTag tag = MessageTag::control;
  std::uint16_t round = 0;
  std::uint16_t client_id = 0;
  std::uint32_t batch_id = 0;
  TensorList tensors;
  std::string text;
};

inline constexpr std::size_t kFrameHeaderSize = 16;
inline constexpr std::uint8_t kWireVersion = 1;

// Sum of numel * element size over the payload tensors.
std::int64_t tensor_bytes(const Message& m);

std::vector<std::uint8_t> encode_frame(const Message& m);

struct DecodeResult {
  enum class Status { ok, need_more_data } status = Status::need_more_data;
  Message message;
  std::size_t consumed = 0;
};

// Decodes one frame from the front of `bytes`. Truncated input yields
// need_more_data; malformed input throws ProtocolError.
DecodeResult decode_frame(std::span<const std::uint8_t> bytes);

// Whole-buffer decode; truncation is a ProtocolError here.
Message decode_message(std::span<const std::uint8_t> bytes);

// Throws ProtocolError unless the payload names and per-sample shapes follow
// `names`/`signature` with a common leading batch extent.
void check_payload(const Message& m, std::span<const std::string> names, std::span<const PortShape> signature);

}  // namespace sfl
