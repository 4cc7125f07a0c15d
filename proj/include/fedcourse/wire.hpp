#pragma once

#include "fedcourse/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fedcourse {

// Federation messages. Layout, all integers little-endian:
//
//   header (32 bytes)
//     0  magic      "FCRM"
//     4  u16        version (1)
//     6  u8         kind
//     7  u8         reserved (0)
//     8  u64        payload length in bytes
//    16  u64        round
//    24  u32        school id (0xFFFFFFFF from the coordinator)
//    28  u32        reserved (0)
//   payload
//     RoundBegin         u32 count, count x u32 school id
//     GradientUpload     u64 n_u, tensor list
//     GradientBroadcast  tensor list
//     ParamsDownload     tensor list
//   tensor list
//     u32 count, then per tensor: u16 name length, name bytes (UTF-8),
//     u32 rows, u32 cols, rows*cols IEEE-754 binary64 values, row-major

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::uint32_t kCoordinatorId = 0xFFFFFFFFu;
inline constexpr std::size_t kHeaderSize = 32;

enum class MessageKind : std::uint8_t {
  RoundBegin = 1,
  GradientUpload = 2,
  GradientBroadcast = 3,
  ParamsDownload = 4,
};

struct RoundBegin {
  std::uint64_t round = 0;
  std::vector<std::uint32_t> selected;
  friend bool operator==(const RoundBegin&, const RoundBegin&) = default;
};

struct GradientUpload {
  std::uint32_t school_id = 0;
  std::uint64_t round = 0;
  std::uint64_t n_u = 0;
  ParamSet gradients;
  friend bool operator==(const GradientUpload&, const GradientUpload&) = default;
};

struct GradientBroadcast {
  std::uint64_t round = 0;
  ParamSet gradient;
  friend bool operator==(const GradientBroadcast&, const GradientBroadcast&) = default;
};

struct ParamsDownload {
  std::uint64_t round = 0;
  ParamSet params;
  friend bool operator==(const ParamsDownload&, const ParamsDownload&) = default;
};

using FedMessage = std::variant<RoundBegin, GradientUpload, GradientBroadcast, ParamsDownload>;
using Bytes = std::vector<std::uint8_t>;

namespace wire {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  Bytes& buffer() { return buf_; }
  void patch_u64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ProtocolError("truncated message");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void write_tensors(Writer& w, const ParamSet& p) {
  w.u32(static_cast<std::uint32_t>(p.size()));
  for (const auto& [name, m] : p) {
    if (name.size() > 0xFFFF) throw ProtocolError("tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
  }
}

inline ParamSet read_tensors(Reader& r) {
  ParamSet p;
  const auto count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = r.u16();
    auto name = r.str(len);
    const auto rows = r.u32();
    const auto cols = r.u32();
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n * 8 > r.remaining()) throw ProtocolError("truncated tensor '" + name + "'");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::uint64_t i = 0; i < n; ++i) m.data()[i] = r.f64();
    if (p.contains(name)) throw ProtocolError("duplicate tensor '" + name + "'");
    p.add(name, std::move(m));
  }
  return p;
}

}  // namespace wire

inline MessageKind kind_of(const FedMessage& msg) {
  return std::visit(
      [](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, RoundBegin>) return MessageKind::RoundBegin;
        else if constexpr (std::is_same_v<T, GradientUpload>) return MessageKind::GradientUpload;
        else if constexpr (std::is_same_v<T, GradientBroadcast>) return MessageKind::GradientBroadcast;
        else return MessageKind::ParamsDownload;
      },
      msg);
}

inline Bytes encode_message(const FedMessage& msg) {
  wire::Writer w;
  w.bytes("FCRM", 4);
  w.u16(kWireVersion);
  w.u8(static_cast<std::uint8_t>(kind_of(msg)));
  w.u8(0);
  w.u64(0);  // payload length, patched below
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        w.u64(m.round);
        if constexpr (std::is_same_v<T, GradientUpload>) w.u32(m.school_id);
        else w.u32(kCoordinatorId);
        w.u32(0);
        if constexpr (std::is_same_v<T, RoundBegin>) {
          w.u32(static_cast<std::uint32_t>(m.selected.size()));
          for (auto id : m.selected) w.u32(id);
        } else if constexpr (std::is_same_v<T, GradientUpload>) {
          w.u64(m.n_u);
          wire::write_tensors(w, m.gradients);
        } else if constexpr (std::is_same_v<T, GradientBroadcast>) {
          wire::write_tensors(w, m.gradient);
        } else {
          wire::write_tensors(w, m.params);
        }
      },
      msg);
  w.patch_u64(8, w.buffer().size() - kHeaderSize);
  return std::move(w.buffer());
}

inline FedMessage decode_message(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  if (r.str(4) != "FCRM") throw ProtocolError("bad magic");
  if (const auto v = r.u16(); v != kWireVersion) throw ProtocolError("unsupported version " + std::to_string(v));
  const auto kind = r.u8();
  (void)r.u8();
  const auto len = r.u64();
  const auto round = r.u64();
  const auto school = r.u32();
  (void)r.u32();
  if (len != r.remaining()) throw ProtocolError("payload length mismatch");
  FedMessage out;
  switch (static_cast<MessageKind>(kind)) {
    case MessageKind::RoundBegin: {
      RoundBegin m{round, {}};
      const auto count = r.u32();
      for (std::uint32_t i = 0; i < count; ++i) m.selected.push_back(r.u32());
      out = std::move(m);
      break;
    }
    case MessageKind::GradientUpload: {
      GradientUpload m;
      m.school_id = school;
      m.round = round;
      m.n_u = r.u64();
      m.gradients = wire::read_tensors(r);
      out = std::move(m);
      break;
    }
    case MessageKind::GradientBroadcast: {
      GradientBroadcast m{round, {}};
      m.gradient = wire::read_tensors(r);
      out = std::move(m);
      break;
    }
    case MessageKind::ParamsDownload: {
      ParamsDownload m{round, {}};
      m.params = wire::read_tensors(r);
      out = std::move(m);
      break;
    }
    default:
      throw ProtocolError("unknown message kind " + std::to_string(kind));
  }
  if (r.remaining() != 0) throw ProtocolError("trailing bytes in message");
  return out;
}

// Names and shapes of every tensor the message carries.
inline std::vector<std::pair<std::string, Shape>> message_tensors(const FedMessage& msg) {
  return std::visit(
      [](const auto& m) -> std::vector<std::pair<std::string, Shape>> {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, RoundBegin>) return {};
        else if constexpr (std::is_same_v<T, GradientUpload>) return m.gradients.manifest();
        else if constexpr (std::is_same_v<T, GradientBroadcast>) return m.gradient.manifest();
        else return m.params.manifest();
      },
      msg);
}

// Privacy check: every tensor in the message must appear, with its shape, in
// the shared-parameter manifest. Returns the offending names.
inline std::vector<std::string> manifest_violations(const FedMessage& msg,
                                                    const std::vector<std::pair<std::string, Shape>>& shared) {
  std::vector<std::string> bad;
  for (const auto& [name, shape] : message_tensors(msg)) {
    bool ok = false;
    for (const auto& [sn, ss] : shared)
      if (sn == name && ss == shape) ok = true;
    if (!ok) bad.push_back(name);
  }
  return bad;
}

}  // namespace fedcourse
