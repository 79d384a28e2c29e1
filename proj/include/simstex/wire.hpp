#pragma once

// Length-prefixed frames exchanged with the model bridge.
//
//   u32 LE  frame_len    bytes that follow this field
//   u32 LE  header_len   bytes of JSON header
//   u8[header_len]       UTF-8 JSON header
//   f32 LE[...]          payload: tensors concatenated in header order
//
// The header carries "op" and a "tensors" array of {"name", "shape"}; each
// tensor is stored channel-height-width. Other keys (t, prompt, guidance,
// status, error) are op specific.

#include <bit>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "simstex/core.hpp"

namespace simstex::wire {

static_assert(std::endian::native == std::endian::little, "wire codec assumes a little-endian host");

inline constexpr std::uint32_t kMaxFrame = 1u << 30;

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::int64_t d) { return a * static_cast<std::size_t>(d); });
  }
  bool operator==(const Tensor&) const = default;
};

struct Message {
  nlohmann::json header = nlohmann::json::object();
  std::vector<Tensor> tensors;

  std::string op() const { return header.value("op", ""); }
  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  bool operator==(const Message&) const = default;
};

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

/// Serialize a message into one complete frame, length prefix included.
/// The "tensors" header entry is rewritten from msg.tensors.
inline std::vector<std::uint8_t> encode(const Message& msg) {
  nlohmann::json header = msg.header;
  header["tensors"] = nlohmann::json::array();
  std::size_t payload = 0;
  for (const auto& t : msg.tensors) {
    if (t.element_count() != t.data.size()) throw ProtocolError("tensor '" + t.name + "' shape/data mismatch");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    payload += t.data.size() * sizeof(float);
  }
  const std::string text = header.dump();
  const std::size_t frame_len = 4 + text.size() + payload;
  if (frame_len > kMaxFrame) throw ProtocolError("frame too large");
  std::vector<std::uint8_t> out;
  out.reserve(4 + frame_len);
  put_u32(out, static_cast<std::uint32_t>(frame_len));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : msg.tensors) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), bytes, bytes + t.data.size() * sizeof(float));
  }
  return out;
}

/// Parse the body of a frame (everything after the u32 frame length).
inline Message decode_body(const std::uint8_t* body, std::size_t len) {
  if (len < 4) throw ProtocolError("frame shorter than header length field");
  const std::uint32_t hlen = get_u32(body);
  if (hlen > len - 4) throw ProtocolError("header length exceeds frame");
  Message msg;
  try {
    msg.header = nlohmann::json::parse(body + 4, body + 4 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed JSON header: ") + e.what());
  }
  if (!msg.header.is_object()) throw ProtocolError("header is not a JSON object");
  const std::uint8_t* p = body + 4 + hlen;
  std::size_t remaining = len - 4 - hlen;
  if (msg.header.contains("tensors")) {
    const auto& specs = msg.header["tensors"];
    if (!specs.is_array()) throw ProtocolError("'tensors' must be an array");
    for (const auto& spec : specs) {
      Tensor t;
      try {
        t.name = spec.at("name").get<std::string>();
        t.shape = spec.at("shape").get<std::vector<std::int64_t>>();
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad tensor spec: ") + e.what());
      }
      std::size_t count = 1;
      for (auto d : t.shape) {
        if (d < 0) throw ProtocolError("negative tensor dimension");
        if (d != 0 && count > kMaxFrame / static_cast<std::size_t>(d)) throw ProtocolError("tensor too large");
        count *= static_cast<std::size_t>(d);
      }
      if (count * sizeof(float) > remaining) throw ProtocolError("declared shapes exceed payload");
      t.data.resize(count);
      std::memcpy(t.data.data(), p, count * sizeof(float));
      p += count * sizeof(float);
      remaining -= count * sizeof(float);
      msg.tensors.push_back(std::move(t));
    }
  }
  if (remaining != 0) throw ProtocolError("payload length does not match declared shapes");
  return msg;
}

/// Parse one complete frame including its length prefix.
inline Message decode(const std::vector<std::uint8_t>& frame) {
  if (frame.size() < 4) throw ProtocolError("frame shorter than length prefix");
  const std::uint32_t len = get_u32(frame.data());
  if (len != frame.size() - 4) throw ProtocolError("frame length prefix does not match frame size");
  return decode_body(frame.data() + 4, len);
}

/// HWC grid -> CHW tensor.
inline Tensor to_tensor(const std::string& name, const Grid<float>& g) {
  Tensor t{name, {g.channels(), g.height(), g.width()}, {}};
  t.data.resize(g.size());
  const std::size_t hw = g.pixels();
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < g.channels(); ++c) t.data[c * hw + i] = g.raw()[i * g.channels() + c];
  return t;
}

/// CHW tensor -> HWC grid.
inline Grid<float> from_tensor(const Tensor& t) {
  if (t.shape.size() != 3) throw ProtocolError("tensor '" + t.name + "' is not rank 3");
  Grid<float> g(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]), static_cast<int>(t.shape[0]));
  if (t.data.size() != g.size()) throw ProtocolError("tensor '" + t.name + "' data size mismatch");
  const std::size_t hw = g.pixels();
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < g.channels(); ++c) g.raw()[i * g.channels() + c] = t.data[c * hw + i];
  return g;
}

}  // namespace simstex::wire
