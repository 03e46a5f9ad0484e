// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian binary encoding shared by model checkpoints and index files.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xtra/errors.hpp"
#include "xtra/layers.hpp"

namespace xtra {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void patch_u64(std::size_t offset, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_[offset + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  static ByteReader from_file(const std::filesystem::path& path, std::string_view what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError(std::string(what) + " not found: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes));
  }

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) throw FormatError("seek past end of file", pos);
    pos_ = pos;
  }
  void need(std::size_t n) const {
    if (n > remaining()) {
      throw FormatError("truncated file: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left",
                        pos_);
    }
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Model checkpoint layout (little-endian):
//   0   magic "XTRA"
//   4   u32 version
//   8   u32 z_enc
//   12  f32 temperature
//   16  u32 kind length, kind bytes ("alignment", "task", ...)
//       u32 metadata length, metadata JSON (provenance, config, ...)
//       u32 parameter count, then per parameter:
//         u32 name length, name, u32 rows, u32 cols, f32 x rows*cols
inline constexpr char kCheckpointMagic[4] = {'X', 'T', 'R', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t z_enc = 0;
  float temperature = 0.0f;
  std::string kind;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> parameters;

  const Matrix* find(const std::string& name) const {
    for (const auto& [n, m] : parameters)
      if (n == name) return &m;
    return nullptr;
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(ckpt.z_enc);
  w.f32(ckpt.temperature);
  w.str(ckpt.kind);
  w.str(ckpt.metadata.dump());
  w.u32(static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& [name, m] : ckpt.parameters) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (float v : m.data()) w.f32(v);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(ByteReader& r) {
  Checkpoint c;
  if (r.size() < 4 || r.raw(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic, expected XTRA", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  c.z_enc = r.u32();
  c.temperature = r.f32();
  c.kind = r.str();
  const std::size_t meta_at = r.offset();
  try {
    c.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("checkpoint metadata is not valid JSON", meta_at);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::size_t at = r.offset();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    r.need(static_cast<std::size_t>(rows) * cols * 4);
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) v = r.f32();
    try {
      c.parameters.emplace_back(std::move(name), Matrix(rows, cols, std::move(data)));
    } catch (const NumericError& e) {
      throw FormatError(std::string("corrupt parameter blob: ") + e.what(), at);
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint body", r.offset());
  return c;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = ByteReader::from_file(path, "checkpoint");
  return decode_checkpoint(r);
}

inline void store_parameters(Checkpoint& ckpt, const ParameterList<float>& params) {
  for (const auto* p : params) ckpt.parameters.emplace_back(p->name, p->value);
}

// Copies every named blob into `params`; all names must be present with the
// expected shapes.
inline void restore_parameters(const Checkpoint& ckpt, const ParameterList<float>& params) {
  for (auto* p : params) {
    const Matrix* m = ckpt.find(p->name);
    if (!m) throw ValidationError("checkpoint is missing parameter '" + p->name + "'");
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
      throw DimensionError("checkpoint parameter '" + p->name + "' has shape " + m->shape() + ", expected " +
                           p->value.shape());
    }
    p->value = *m;
    p->grad = Matrix(m->rows(), m->cols());
  }
}

}  // namespace xtra
