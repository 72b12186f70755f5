#include "sfl/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

namespace sfl {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

const char* tag_name(MessageTag tag) {
  switch (tag) {
    case MessageTag::activation: return "ACTIVATION";
    case MessageTag::server_output: return "SERVER_OUTPUT";
    case MessageTag::output_grad: return "OUTPUT_GRAD";
    case MessageTag::activation_grad: return "ACTIVATION_GRAD";
    case MessageTag::weights_upload: return "WEIGHTS_UPLOAD";
    case MessageTag::global_weights: return "GLOBAL_WEIGHTS";
    case MessageTag::control: return "CONTROL";
  }
  return "?";
}

std::int64_t tensor_bytes(const Message& m) {
  std::int64_t n = 0;
  for (const auto& t : m.tensors) n += static_cast<std::int64_t>(t.tensor.byte_size());
  return n;
}

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto pos = out.size();
  out.resize(pos + sizeof(T));
  std::memcpy(out.data() + pos, &v, sizeof(T));
}

template <class T>
T get(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <class T>
  T take() {
    need(sizeof(T));
    T v = get<T>(b_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* bytes(std::size_t n) {
    need(n);
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining())
      throw ProtocolError("payload overrun: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                          " left");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void encode_payload(const Message& m, std::vector<std::uint8_t>& out) {
  if (m.tag == MessageTag::control) {
    if (!m.tensors.empty()) throw ContractError("CONTROL messages carry text only");
    out.insert(out.end(), m.text.begin(), m.text.end());
    return;
  }
  if (!m.text.empty()) throw ContractError(std::string(tag_name(m.tag)) + " messages carry tensors only");
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.tensors.size()));
  for (const auto& [name, t] : m.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (t.rank() > 255) throw ContractError("tensor rank exceeds wire limit");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
      if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) throw ContractError("tensor extent exceeds u32");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    const auto pos = out.size();
    out.resize(pos + t.byte_size());
    dispatch(t.dtype(), [&]<class T>(T) {
      auto d = t.data<T>();
      if (!d.empty()) std::memcpy(out.data() + pos, d.data(), d.size_bytes());
    });
  }
}

Message decode_payload(Message m, std::span<const std::uint8_t> payload) {
  if (m.tag == MessageTag::control) {
    m.text.assign(payload.begin(), payload.end());
    return m;
  }
  if (payload.empty()) return m;
  Reader r(payload);
  const auto count = r.take<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.take<std::uint32_t>();
    const auto* name = r.bytes(len);
    const auto dt = r.take<std::uint8_t>();
    if (dt > 1) throw ProtocolError("unknown tensor dtype code " + std::to_string(dt));
    const auto ndim = r.take<std::uint8_t>();
    Shape shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto e = r.take<std::uint32_t>();
      shape.push_back(e);
      if (numel != 0 && e > (std::uint64_t{1} << 40) / numel)
        throw ProtocolError("tensor extent overruns the payload");
      numel *= e;
    }
    const DType dtype = static_cast<DType>(dt);
    const std::uint64_t nbytes = numel * dtype_size(dtype);
    if (nbytes > r.remaining()) throw ProtocolError("tensor data overruns the payload");
    const auto* data = r.bytes(static_cast<std::size_t>(nbytes));
    Tensor t = Tensor::zeros(shape, dtype);
    dispatch(dtype, [&]<class T>(T) {
      auto dst = t.data<T>();
      if (!dst.empty()) std::memcpy(dst.data(), data, dst.size_bytes());
    });
    m.tensors.push_back({std::string(reinterpret_cast<const char*>(name), len), t});
  }
  if (r.remaining() != 0)
    throw ProtocolError(std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Message& m) {
  if (static_cast<int>(m.tag) < 1 || static_cast<int>(m.tag) > 7) throw ContractError("encode_frame: invalid tag");
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + static_cast<std::size_t>(tensor_bytes(m)) + 64 * m.tensors.size() + m.text.size());
  out.resize(kFrameHeaderSize);
  encode_payload(m, out);
  const std::size_t payload = out.size() - kFrameHeaderSize;
  if (payload > std::numeric_limits<std::uint32_t>::max()) throw ContractError("encode_frame: payload exceeds 4 GiB");
  out[0] = 0x53;
  out[1] = 0x46;
  out[2] = kWireVersion;
  out[3] = static_cast<std::uint8_t>(m.tag);
  std::memcpy(out.data() + 4, &m.round, 2);
  std::memcpy(out.data() + 6, &m.client_id, 2);
  std::memcpy(out.data() + 8, &m.batch_id, 4);
  const auto len = static_cast<std::uint32_t>(payload);
  std::memcpy(out.data() + 12, &len, 4);
  return out;
}

DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  // Reject a bad prefix as soon as it is visible.
  if (!bytes.empty() && bytes[0] != 0x53) throw ProtocolError("bad frame magic");
  if (bytes.size() > 1 && bytes[1] != 0x46) throw ProtocolError("bad frame magic");
  if (bytes.size() > 2 && bytes[2] != kWireVersion)
    throw ProtocolError("unsupported wire version " + std::to_string(bytes[2]));
  if (bytes.size() > 3 && (bytes[3] < 1 || bytes[3] > 7)) throw ProtocolError("unknown message tag " + std::to_string(bytes[3]));
  if (bytes.size() < kFrameHeaderSize) return r;
  const auto len = get<std::uint32_t>(bytes.data() + 12);
  if (bytes.size() < kFrameHeaderSize + len) return r;
  Message m;
  m.tag = static_cast<MessageTag>(bytes[3]);
  m.round = get<std::uint16_t>(bytes.data() + 4);
  m.client_id = get<std::uint16_t>(bytes.data() + 6);
  m.batch_id = get<std::uint32_t>(bytes.data() + 8);
  r.message = decode_payload(std::move(m), bytes.subspan(kFrameHeaderSize, len));
  r.consumed = kFrameHeaderSize + len;
  r.status = DecodeResult::Status::ok;
  return r;
}

Message decode_message(std::span<const std::uint8_t> bytes) {
  auto r = decode_frame(bytes);
  if (r.status != DecodeResult::Status::ok) throw ProtocolError("truncated frame (" + std::to_string(bytes.size()) + " bytes)");
  if (r.consumed != bytes.size()) throw ProtocolError("length overrun: frame declares fewer bytes than supplied");
  return std::move(r.message);
}

void check_payload(const Message& m, std::span<const std::string> names, std::span<const PortShape> signature) {
  if (m.tensors.size() != signature.size())
    throw ProtocolError(std::string(tag_name(m.tag)) + ": expected " + std::to_string(signature.size()) +
                        " tensors, got " + std::to_string(m.tensors.size()));
  std::int64_t batch = -1;
  for (std::size_t i = 0; i < signature.size(); ++i) {
    const auto& [name, t] = m.tensors[i];
    const auto& s = signature[i];
    if (name != names[i])
      throw ProtocolError(std::string(tag_name(m.tag)) + ": tensor " + std::to_string(i) + " is '" + name +
                          "', expected '" + names[i] + "'");
    if (t.rank() != 4 || t.size(1) != s.channels || t.size(2) != s.height || t.size(3) != s.width ||
        (batch >= 0 && t.size(0) != batch))
      throw ProtocolError(std::string(tag_name(m.tag)) + ": tensor '" + name + "' has shape " + shape_str(t.shape()) +
                          ", cut signature is (N," + std::to_string(s.channels) + "," + std::to_string(s.height) +
                          "," + std::to_string(s.width) + ")");
    batch = t.size(0);
  }
}

}  // namespace sfl
