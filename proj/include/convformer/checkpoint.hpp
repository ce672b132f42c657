#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "convformer/backbone.hpp"
#include "convformer/config_io.hpp"
#include "convformer/error.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

// Binary checkpoint layout (all integers little-endian):
//
//   magic          6 bytes  "CVFM1\0"
//   digest        32 bytes  SHA-256 of the canonical config text
//   config_len     u32      followed by config_len bytes of canonical config JSON
//   count          u32      number of tensors
//   count entries:
//     name_len     u32      followed by the name bytes ("stem.conv1.weight")
//     kind         u8       0 = parameter, 1 = buffer
//     shape        4 x i64  n, c, h, w
//     offset       u64      byte offset of the tensor inside the payload
//   payload                 f32 values, tensors in directory order
//
// Tensors appear in param_set order (parameters, then BN running statistics).

inline constexpr std::array<char, 6> kCheckpointMagic{'C', 'V', 'F', 'M', '1', '\0'};

struct CheckpointEntry {
  std::string name;
  TensorKind kind = TensorKind::parameter;
  Shape4 shape{};
  std::uint64_t offset = 0;
};

struct CheckpointHeader {
  Digest digest{};
  std::string config_text;
  std::vector<CheckpointEntry> directory;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t size() const { return data_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) throw FormatError("checkpoint: truncated file");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline CheckpointHeader read_header(ByteReader& r) {
  std::array<char, 6> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
  CheckpointHeader h;
  r.bytes(h.digest.data(), h.digest.size());
  h.config_text = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u32());
    const auto kind = r.u8();
    if (kind > 1) throw FormatError("checkpoint: bad tensor kind for '" + e.name + "'");
    e.kind = kind == 0 ? TensorKind::parameter : TensorKind::buffer;
    e.shape.n = static_cast<std::int64_t>(r.u64());
    e.shape.c = static_cast<std::int64_t>(r.u64());
    e.shape.h = static_cast<std::int64_t>(r.u64());
    e.shape.w = static_cast<std::int64_t>(r.u64());
    e.offset = r.u64();
    h.directory.push_back(std::move(e));
  }
  return h;
}

}  // namespace detail

template <class T>
std::vector<char> serialize_checkpoint(const Model<T>& m) {
  const std::string text = canonical_config_text(m.config);
  const Digest digest = sha256(text);
  const auto entries = param_set(m, true);

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.bytes(digest.data(), digest.size());
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(e.kind == TensorKind::parameter ? 0 : 1);
    const Shape4& s = e.tensor->shape();
    for (auto d : {s.n, s.c, s.h, s.w}) w.u64(static_cast<std::uint64_t>(d));
    w.u64(offset);
    offset += static_cast<std::uint64_t>(e.tensor->numel()) * 4;
  }
  for (const auto& e : entries) {
    for (std::int64_t i = 0; i < e.tensor->numel(); ++i) w.f32(static_cast<float>((*e.tensor)[i]));
  }
  return w.buffer();
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  const auto bytes = serialize_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path + "'");
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  detail::ByteReader r(detail::read_file(path));
  return detail::read_header(r);
}

// Overwrites every tensor of `m` from the serialized bytes. The header digest
// must match the digest of m.config.
template <class T>
void deserialize_checkpoint_into(Model<T>& m, std::string data) {
  detail::ByteReader r(std::move(data));
  const CheckpointHeader h = detail::read_header(r);
  if (sha256(h.config_text) != h.digest) throw FormatError("checkpoint: corrupt config digest");
  if (h.digest != config_digest(m.config)) {
    throw FormatError("checkpoint: config digest " + to_hex(h.digest) +
                      " does not match model config digest " + to_hex(config_digest(m.config)));
  }
  auto entries = param_set(m, true);
  if (entries.size() != h.directory.size()) throw FormatError("checkpoint: tensor count mismatch");
  const std::size_t payload = r.position();
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& d = h.directory[i];
    auto& e = entries[i];
    if (d.name != e.name || d.shape != e.tensor->shape()) {
      throw FormatError("checkpoint: directory entry '" + d.name + "' does not match model tensor '" +
                        e.name + "'");
    }
    const std::uint64_t bytes = static_cast<std::uint64_t>(e.tensor->numel()) * 4;
    if (d.offset > r.size() - payload || bytes > r.size() - payload - d.offset) {
      throw FormatError("checkpoint: truncated payload for '" + d.name + "'");
    }
    total += bytes;
  }
  if (total < r.size() - payload) throw FormatError("checkpoint: trailing bytes");
  if (total > r.size() - payload) throw FormatError("checkpoint: truncated payload");
  for (auto& e : entries) {
    for (std::int64_t i = 0; i < e.tensor->numel(); ++i) (*e.tensor)[i] = static_cast<T>(r.f32());
  }
  if (r.position() != r.size()) throw FormatError("checkpoint: trailing bytes");
}

template <class T>
void load_checkpoint_into(Model<T>& m, const std::string& path) {
  deserialize_checkpoint_into(m, detail::read_file(path));
}

// Rebuilds the architecture from the embedded config, then loads the tensors.
template <class T = float>
Model<T> load_checkpoint(const std::string& path) {
  std::string data = detail::read_file(path);
  detail::ByteReader r(data);
  const CheckpointHeader h = detail::read_header(r);
  Model<T> m = build_model<T>(parse_config(h.config_text), static_cast<Rng*>(nullptr));
  deserialize_checkpoint_into(m, std::move(data));
  return m;
}

}  // namespace convformer
