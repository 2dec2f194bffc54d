// Copyright 2026 The flsplit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Frame layout (little-endian):
//
//   offset  size  field
//   0       4     magic "FLSP"
//   4       8     version
//   12      8     message class tag
//   20      8     body length
//   28      4     crc32 of bytes [0, 28) followed by the body
//   32      n     body
//
// Body integers are u64. Tensors are encoded as
//   u64 scalar_width (8 or 2) | u64 rank | rank x u64 dim | numel x scalar
// and MaskMeta as
//   u64 seq_len | u64 batch | u64 pad_len                       (uniform, 24 B)
//   u64 seq_len | u64 batch | u64 ~0 | batch x u64 pad_len      (per row)

#include <zlib.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <limits>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "flsplit/bytes.hpp"
#include "flsplit/mask.hpp"
#include "flsplit/model.hpp"

namespace flsplit {

inline constexpr std::array<std::uint8_t, 4> kFrameMagic{'F', 'L', 'S', 'P'};
inline constexpr std::uint64_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 32;
inline constexpr std::uint64_t kMaxBodyBytes = std::uint64_t{1} << 32;
inline constexpr std::uint64_t kPerRowSentinel = std::numeric_limits<std::uint64_t>::max();

enum class MsgClass : std::uint64_t {
  kHiddenState = 1,
  kGrad = 2,
  kCacheStep = 3,
  kControl = 4,
};
inline constexpr std::size_t kNumMsgClasses = 4;

inline std::string_view to_string(MsgClass c) {
  switch (c) {
    case MsgClass::kHiddenState: return "hidden_state";
    case MsgClass::kGrad: return "grad";
    case MsgClass::kCacheStep: return "cache_step";
    case MsgClass::kControl: return "control";
  }
  return "unknown";
}

// HiddenStateMsg flags
inline constexpr std::uint64_t kFlagTrain = 1u << 0;     // tape + backward expected
inline constexpr std::uint64_t kFlagPrefill = 1u << 1;   // populate the session cache
inline constexpr std::uint64_t kFlagReply = 1u << 2;     // server -> client
inline constexpr std::uint64_t kFlagFullMask = 1u << 3;  // ship the b x s x s mask instead of MaskMeta
inline constexpr std::uint64_t kKnownFlags = 0xf;

struct HiddenStateMsg {
  std::uint64_t client_id = 0;
  std::uint64_t step_id = 0;
  std::uint64_t session_id = 0;
  std::uint64_t flags = 0;
  std::uint64_t scalar_width = 8;
  Tensor tensor;
  std::vector<std::size_t> positions;
  MaskMeta mask_meta;

  friend bool operator==(const HiddenStateMsg&, const HiddenStateMsg&) = default;
};

struct GradMsg {
  std::uint64_t client_id = 0;
  std::uint64_t step_id = 0;
  std::uint64_t session_id = 0;
  std::uint64_t scalar_width = 8;
  Tensor tensor;

  friend bool operator==(const GradMsg&, const GradMsg&) = default;
};

// One decode step: hidden state of the newest token only, [b, 1, d].
struct CacheStepMsg {
  std::uint64_t client_id = 0;
  std::uint64_t step_id = 0;
  std::uint64_t session_id = 0;
  std::uint64_t position = 0;
  std::uint64_t flags = 0;
  std::uint64_t scalar_width = 8;
  Tensor tensor;

  friend bool operator==(const CacheStepMsg&, const CacheStepMsg&) = default;
};

enum class ControlKind : std::uint64_t {
  kShutdown = 1,
  kError = 2,
  kEndSession = 3,
  kAck = 4,
};

struct ControlMsg {
  ControlKind kind = ControlKind::kAck;
  std::uint64_t client_id = 0;
  std::uint64_t session_id = 0;
  std::uint64_t code = 0;
  std::string text;

  friend bool operator==(const ControlMsg&, const ControlMsg&) = default;
};

using Message = std::variant<HiddenStateMsg, GradMsg, CacheStepMsg, ControlMsg>;

inline MsgClass message_class(const Message& m) {
  return static_cast<MsgClass>(m.index() + 1);
}

// ---------------------------------------------------------------------------

namespace wire_detail {

inline void check_width(std::uint64_t w) {
  if (w != 8 && w != 2) throw Error(ErrorCode::kProtocol, "scalar width must be 8 or 2, got " + std::to_string(w));
}

inline void put_tensor(ByteWriter& w, const Tensor& t, std::uint64_t width) {
  check_width(width);
  w.u64(width);
  w.u64(t.rank());
  for (auto d : t.shape()) w.u64(d);
  if (width == 8) {
    for (double v : t.data()) w.f64(v);
  } else {
    for (double v : t.data()) w.f16(v);
  }
}

inline Tensor get_tensor(ByteReader& r, std::uint64_t& width) {
  width = r.u64();
  if (width != 8 && width != 2) r.fail("scalar width " + std::to_string(width));
  const auto rank = r.u64();
  if (rank > 8) r.fail("tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.u64();
    if (d != 0 && n > r.remaining() / d) r.fail("tensor larger than frame");
    n *= d;
  }
  if (n > r.remaining() / width) r.fail("tensor larger than frame");
  std::vector<double> data(n);
  if (width == 8) {
    for (auto& v : data) v = r.f64();
  } else {
    for (auto& v : data) v = r.f16();
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void put_meta(ByteWriter& w, const MaskMeta& m) {
  w.u64(m.seq_len);
  w.u64(m.batch);
  if (m.is_uniform()) {
    w.u64(m.pad_lens[0]);
  } else {
    w.u64(kPerRowSentinel);
    for (auto p : m.pad_lens) w.u64(p);
  }
}

inline MaskMeta get_meta(ByteReader& r) {
  MaskMeta m;
  m.seq_len = r.u64();
  m.batch = r.u64();
  const auto pad = r.u64();
  if (pad == kPerRowSentinel) {
    if (m.batch > r.remaining() / 8) r.fail("pad list larger than frame");
    m.pad_lens.assign(m.batch, 0);
    for (auto& p : m.pad_lens) p = r.u64();
  } else {
    m.pad_lens = {pad};
  }
  try {
    m.validate();
  } catch (const Error& e) {
    r.fail(e.what());
  }
  return m;
}

inline void put_positions(ByteWriter& w, std::span<const std::size_t> pos) {
  w.u64(pos.size());
  for (auto p : pos) w.u64(p);
}

inline std::vector<std::size_t> get_positions(ByteReader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 8) r.fail("position list larger than frame");
  std::vector<std::size_t> pos(n);
  for (auto& p : pos) p = r.u64();
  return pos;
}

// Full-mask mode: the key range equals the payload's sequence dimension.
inline std::size_t full_mask_seq(const HiddenStateMsg& m) {
  if (m.tensor.rank() != 3 || m.tensor.dim(1) != m.mask_meta.seq_len || m.tensor.dim(0) != m.mask_meta.batch) {
    throw Error(ErrorCode::kProtocol, "full-mask mode needs payload [batch, seq_len, d] matching the mask");
  }
  return m.mask_meta.seq_len;
}

inline void encode_body(ByteWriter& w, const HiddenStateMsg& m) {
  if ((m.flags & ~kKnownFlags) != 0) throw Error(ErrorCode::kProtocol, "unknown hidden-state flags");
  w.u64(m.client_id);
  w.u64(m.step_id);
  w.u64(m.session_id);
  w.u64(m.flags);
  put_tensor(w, m.tensor, m.scalar_width);
  put_positions(w, m.positions);
  if (m.flags & kFlagFullMask) {
    full_mask_seq(m);
    const Tensor mask = reconstruct_mask(m.mask_meta);
    if (m.scalar_width == 8) {
      for (double v : mask.data()) w.f64(v);
    } else {
      for (double v : mask.data()) w.f16(v);
    }
  } else {
    put_meta(w, m.mask_meta);
  }
}

inline void encode_body(ByteWriter& w, const GradMsg& m) {
  w.u64(m.client_id);
  w.u64(m.step_id);
  w.u64(m.session_id);
  put_tensor(w, m.tensor, m.scalar_width);
}

inline void encode_body(ByteWriter& w, const CacheStepMsg& m) {
  if (m.tensor.rank() != 3 || m.tensor.dim(1) != 1) {
    throw Error(ErrorCode::kProtocol, "cache step payload must be [b, 1, d], got " + shape_str(m.tensor.shape()));
  }
  w.u64(m.client_id);
  w.u64(m.step_id);
  w.u64(m.session_id);
  w.u64(m.position);
  w.u64(m.flags);
  put_tensor(w, m.tensor, m.scalar_width);
}

inline void encode_body(ByteWriter& w, const ControlMsg& m) {
  w.u64(static_cast<std::uint64_t>(m.kind));
  w.u64(m.client_id);
  w.u64(m.session_id);
  w.u64(m.code);
  w.str(m.text);
}

inline HiddenStateMsg decode_hidden(ByteReader& r) {
  HiddenStateMsg m;
  m.client_id = r.u64();
  m.step_id = r.u64();
  m.session_id = r.u64();
  m.flags = r.u64();
  if ((m.flags & ~kKnownFlags) != 0) r.fail("unknown flags");
  m.tensor = get_tensor(r, m.scalar_width);
  m.positions = get_positions(r);
  if (m.flags & kFlagFullMask) {
    if (m.tensor.rank() != 3 || m.tensor.dim(1) == 0 || m.tensor.dim(0) == 0) r.fail("full mask without [b, s, d] payload");
    const std::size_t b = m.tensor.dim(0), s = m.tensor.dim(1);
    if (s > r.remaining() / s / b / m.scalar_width) r.fail("mask larger than frame");
    Tensor mask({b, s, s});
    for (auto& v : mask.data()) v = m.scalar_width == 8 ? r.f64() : r.f16();
    try {
      m.mask_meta = compress_mask(mask);
    } catch (const Error& e) {
      r.fail(e.what());
    }
  } else {
    m.mask_meta = get_meta(r);
  }
  return m;
}

inline GradMsg decode_grad(ByteReader& r) {
  GradMsg m;
  m.client_id = r.u64();
  m.step_id = r.u64();
  m.session_id = r.u64();
  m.tensor = get_tensor(r, m.scalar_width);
  return m;
}

inline CacheStepMsg decode_cache_step(ByteReader& r) {
  CacheStepMsg m;
  m.client_id = r.u64();
  m.step_id = r.u64();
  m.session_id = r.u64();
  m.position = r.u64();
  m.flags = r.u64();
  m.tensor = get_tensor(r, m.scalar_width);
  if (m.tensor.rank() != 3 || m.tensor.dim(1) != 1) r.fail("cache step payload is not [b, 1, d]");
  return m;
}

inline ControlMsg decode_control(ByteReader& r) {
  ControlMsg m;
  const auto kind = r.u64();
  if (kind < 1 || kind > 4) r.fail("control kind " + std::to_string(kind));
  m.kind = static_cast<ControlKind>(kind);
  m.client_id = r.u64();
  m.session_id = r.u64();
  m.code = r.u64();
  m.text = r.str();
  return m;
}

inline std::uint32_t frame_crc(std::span<const std::uint8_t> header28, std::span<const std::uint8_t> body) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, header28.data(), static_cast<uInt>(header28.size()));
  // body may exceed uInt range in principle; feed in chunks
  std::size_t off = 0;
  while (off < body.size()) {
    const std::size_t n = std::min<std::size_t>(body.size() - off, 1u << 30);
    crc = crc32(crc, body.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace wire_detail

inline Bytes encode(const Message& msg) {
  Bytes frame(kFrameHeaderSize);
  {
    ByteWriter w(frame);
    std::visit([&](const auto& m) { wire_detail::encode_body(w, m); }, msg);
  }
  const std::size_t body_len = frame.size() - kFrameHeaderSize;
  Bytes header;
  ByteWriter h(header);
  h.raw(kFrameMagic);
  h.u64(kWireVersion);
  h.u64(static_cast<std::uint64_t>(message_class(msg)));
  h.u64(body_len);
  h.u32(wire_detail::frame_crc(header, std::span<const std::uint8_t>(frame).subspan(kFrameHeaderSize)));
  std::copy(header.begin(), header.end(), frame.begin());
  return frame;
}

struct FrameHeader {
  MsgClass tag = MsgClass::kControl;
  std::uint64_t body_len = 0;
  std::uint32_t crc = 0;
};

// Validates magic, version, tag and length field of the first 32 bytes.
inline FrameHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) {
    throw Error(ErrorCode::kFrame, "truncated header (" + std::to_string(bytes.size()) + " bytes) at offset " +
                                       std::to_string(bytes.size()));
  }
  if (!std::equal(kFrameMagic.begin(), kFrameMagic.end(), bytes.begin())) {
    throw Error(ErrorCode::kFrame, "bad magic at offset 0");
  }
  ByteReader h(bytes.subspan(4, kFrameHeaderSize - 4), 4);
  const auto version = h.u64();
  if (version != kWireVersion) throw Error(ErrorCode::kFrame, "unsupported version " + std::to_string(version) + " at offset 4");
  const auto tag = h.u64();
  if (tag < 1 || tag > kNumMsgClasses) throw Error(ErrorCode::kFrame, "unknown message class " + std::to_string(tag) + " at offset 12");
  FrameHeader out;
  out.tag = static_cast<MsgClass>(tag);
  out.body_len = h.u64();
  if (out.body_len > kMaxBodyBytes) throw Error(ErrorCode::kFrame, "body length too large at offset 20");
  out.crc = h.u32();
  return out;
}

inline Message decode(std::span<const std::uint8_t> frame) {
  const FrameHeader hdr = parse_header(frame);
  const auto body = frame.subspan(kFrameHeaderSize);
  if (body.size() != hdr.body_len) {
    throw Error(ErrorCode::kFrame, "body length field " + std::to_string(hdr.body_len) + " but " +
                                       std::to_string(body.size()) + " bytes follow at offset 32");
  }
  if (wire_detail::frame_crc(frame.first(28), body) != hdr.crc) throw Error(ErrorCode::kFrame, "checksum mismatch at offset 28");
  ByteReader r(body, kFrameHeaderSize);
  Message out;
  switch (hdr.tag) {
    case MsgClass::kHiddenState: out = wire_detail::decode_hidden(r); break;
    case MsgClass::kGrad: out = wire_detail::decode_grad(r); break;
    case MsgClass::kCacheStep: out = wire_detail::decode_cache_step(r); break;
    case MsgClass::kControl: out = wire_detail::decode_control(r); break;
  }
  if (r.remaining() != 0) r.fail("trailing bytes in body");
  return out;
}

// Bytes the mask occupies inside a HiddenStateMsg body.
inline std::size_t mask_field_bytes(const HiddenStateMsg& m) {
  if (m.flags & kFlagFullMask) return m.mask_meta.batch * m.mask_meta.seq_len * m.mask_meta.seq_len * m.scalar_width;
  return 24 + (m.mask_meta.is_uniform() ? 0 : 8 * m.mask_meta.pad_lens.size());
}

inline std::size_t mask_field_bytes(const Message& m) {
  if (const auto* h = std::get_if<HiddenStateMsg>(&m)) return mask_field_bytes(*h);
  return 0;
}

// Size of a full additive mask: b * s^2 scalars of width w.
inline std::size_t full_mask_bytes(std::size_t batch, std::size_t seq_len, std::size_t width) {
  return batch * seq_len * seq_len * width;
}

// ---------------------------------------------------------------------------

struct ClassCounters {
  std::uint64_t sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t received = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t mask_bytes_sent = 0;
  std::uint64_t payload_bytes_sent = 0;  // tensor scalars only

  friend bool operator==(const ClassCounters&, const ClassCounters&) = default;
};

struct CommSnapshot {
  std::array<ClassCounters, kNumMsgClasses> classes{};
  std::uint64_t round_trips = 0;

  const ClassCounters& operator[](MsgClass c) const { return classes[static_cast<std::size_t>(c) - 1]; }

  std::uint64_t total_bytes_sent() const {
    std::uint64_t n = 0;
    for (const auto& c : classes) n += c.bytes_sent;
    return n;
  }
  std::uint64_t total_bytes_received() const {
    std::uint64_t n = 0;
    for (const auto& c : classes) n += c.bytes_received;
    return n;
  }
  std::uint64_t total_sent() const {
    std::uint64_t n = 0;
    for (const auto& c : classes) n += c.sent;
    return n;
  }

  friend CommSnapshot operator-(const CommSnapshot& a, const CommSnapshot& b) {
    CommSnapshot d;
    for (std::size_t i = 0; i < kNumMsgClasses; ++i) {
      d.classes[i].sent = a.classes[i].sent - b.classes[i].sent;
      d.classes[i].bytes_sent = a.classes[i].bytes_sent - b.classes[i].bytes_sent;
      d.classes[i].received = a.classes[i].received - b.classes[i].received;
      d.classes[i].bytes_received = a.classes[i].bytes_received - b.classes[i].bytes_received;
      d.classes[i].mask_bytes_sent = a.classes[i].mask_bytes_sent - b.classes[i].mask_bytes_sent;
      d.classes[i].payload_bytes_sent = a.classes[i].payload_bytes_sent - b.classes[i].payload_bytes_sent;
    }
    d.round_trips = a.round_trips - b.round_trips;
    return d;
  }

  CommSnapshot& operator+=(const CommSnapshot& o) {
    for (std::size_t i = 0; i < kNumMsgClasses; ++i) {
      classes[i].sent += o.classes[i].sent;
      classes[i].bytes_sent += o.classes[i].bytes_sent;
      classes[i].received += o.classes[i].received;
      classes[i].bytes_received += o.classes[i].bytes_received;
      classes[i].mask_bytes_sent += o.classes[i].mask_bytes_sent;
      classes[i].payload_bytes_sent += o.classes[i].payload_bytes_sent;
    }
    round_trips += o.round_trips;
    return *this;
  }

  friend bool operator==(const CommSnapshot&, const CommSnapshot&) = default;

  nlohmann::json to_json() const {
    nlohmann::json j;
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t i = 0; i < kNumMsgClasses; ++i) {
      const auto& c = classes[i];
      per[std::string(to_string(static_cast<MsgClass>(i + 1)))] = {
          {"count_sent", c.sent},           {"bytes_sent", c.bytes_sent},
          {"count_received", c.received},   {"bytes_received", c.bytes_received},
          {"mask_bytes_sent", c.mask_bytes_sent}, {"payload_bytes_sent", c.payload_bytes_sent},
      };
    }
    j["classes"] = per;
    j["round_trips"] = round_trips;
    j["total_bytes_sent"] = total_bytes_sent();
    j["total_bytes_received"] = total_bytes_received();
    return j;
  }
};

// Thread-safe counters; every field only grows.
class CommStats {
 public:
  void record_sent(const Message& m, std::size_t frame_bytes) {
    auto& c = at(message_class(m));
    c.sent.fetch_add(1, std::memory_order_relaxed);
    c.bytes_sent.fetch_add(frame_bytes, std::memory_order_relaxed);
    c.mask_bytes_sent.fetch_add(mask_field_bytes(m), std::memory_order_relaxed);
    c.payload_bytes_sent.fetch_add(payload_bytes(m), std::memory_order_relaxed);
  }

  void record_received(MsgClass cls, std::size_t frame_bytes) {
    auto& c = at(cls);
    c.received.fetch_add(1, std::memory_order_relaxed);
    c.bytes_received.fetch_add(frame_bytes, std::memory_order_relaxed);
  }

  void record_round_trip() { round_trips_.fetch_add(1, std::memory_order_relaxed); }

  CommSnapshot snapshot() const {
    CommSnapshot s;
    for (std::size_t i = 0; i < kNumMsgClasses; ++i) {
      s.classes[i].sent = counters_[i].sent.load();
      s.classes[i].bytes_sent = counters_[i].bytes_sent.load();
      s.classes[i].received = counters_[i].received.load();
      s.classes[i].bytes_received = counters_[i].bytes_received.load();
      s.classes[i].mask_bytes_sent = counters_[i].mask_bytes_sent.load();
      s.classes[i].payload_bytes_sent = counters_[i].payload_bytes_sent.load();
    }
    s.round_trips = round_trips_.load();
    return s;
  }

  nlohmann::json to_json() const { return snapshot().to_json(); }

  static std::size_t payload_bytes(const Message& m) {
    return std::visit(
        [](const auto& x) -> std::size_t {
          if constexpr (requires { x.tensor; }) {
            return x.tensor.size() * x.scalar_width;
          } else {
            return 0;
          }
        },
        m);
  }

 private:
  struct Atomic {
    std::atomic<std::uint64_t> sent{0};
    std::atomic<std::uint64_t> bytes_sent{0};
    std::atomic<std::uint64_t> received{0};
    std::atomic<std::uint64_t> bytes_received{0};
    std::atomic<std::uint64_t> mask_bytes_sent{0};
    std::atomic<std::uint64_t> payload_bytes_sent{0};
  };

  Atomic& at(MsgClass c) { return counters_[static_cast<std::size_t>(c) - 1]; }

  std::array<Atomic, kNumMsgClasses> counters_;
  std::atomic<std::uint64_t> round_trips_{0};
};

}  // namespace flsplit
