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

// Exact k-nearest-neighbour retrieval over aligned (unit-norm) training-set
// vectors. One index serves a single target modality (X or R) or both (XR).

#pragma once

#include <algorithm>
#include <cstring>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "xtra/alignment.hpp"
#include "xtra/checkpoint.hpp"
#include "xtra/data.hpp"
#include "xtra/errors.hpp"
#include "xtra/metrics.hpp"
#include "xtra/numerics.hpp"
#include "xtra/provenance.hpp"

namespace xtra {

enum class IndexTarget : std::uint32_t { X = 0, R = 1, XR = 2 };

inline std::string to_string(IndexTarget t) {
  switch (t) {
    case IndexTarget::X: return "x";
    case IndexTarget::R: return "r";
    case IndexTarget::XR: return "xr";
  }
  return "x";
}
inline std::optional<IndexTarget> parse_index_target(std::string_view s) {
  if (s == "x" || s == "X") return IndexTarget::X;
  if (s == "r" || s == "R") return IndexTarget::R;
  if (s == "xr" || s == "XR") return IndexTarget::XR;
  return std::nullopt;
}

inline constexpr double kUnitNormTolerance = 1e-5;

struct IndexEntry {
  std::string id;
  std::string pair_id;
  Modality modality = Modality::Image;
  Labels labels{};
  std::optional<std::string> text;
  std::string source;  // dataset the entry came from

  friend bool operator==(const IndexEntry&, const IndexEntry&) = default;
};

struct Neighbor {
  std::size_t entry = 0;  // position in the index
  std::string id;
  std::string pair_id;
  Modality modality = Modality::Image;
  double similarity = 0.0;
  std::vector<float> vector;
  Labels labels{};
  std::optional<std::string> text;
  std::string source;
};

struct NeighborSet {
  std::optional<std::string> query_id;
  std::vector<Neighbor> neighbors;
  std::size_t k = 0;

  std::size_t size() const { return neighbors.size(); }
  bool empty() const { return neighbors.empty(); }
};

// Index-and-score pair returned by the raw search.
struct Hit {
  std::uint32_t entry = 0;
  double similarity = 0.0;
};

class RetrievalIndex {
 public:
  RetrievalIndex() = default;

  // Entries are re-ordered by ascending id; vectors must be unit-norm rows.
  RetrievalIndex(IndexTarget target, std::size_t dim, std::vector<IndexEntry> entries, const Matrix& vectors,
                 Provenance provenance = {})
      : target_(target), dim_(dim), provenance_(std::move(provenance)) {
    if (vectors.rows() != entries.size() || (vectors.rows() > 0 && vectors.cols() != dim)) {
      throw DimensionError("index: " + std::to_string(entries.size()) + " entries but vectors are " + vectors.shape() +
                           ", dim " + std::to_string(dim));
    }
    std::vector<std::size_t> order(entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entries[a].id < entries[b].id; });
    entries_.reserve(entries.size());
    vectors_.reserve(entries.size() * dim);
    for (std::size_t i : order) {
      if (!entries_.empty() && entries_.back().id == entries[i].id) {
        throw ValidationError("index: duplicate entry id '" + entries[i].id + "'");
      }
      const auto row = vectors.row(i);
      const double n = l2_norm(row);
      if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw ValidationError("index: entry '" + entries[i].id + "' is not unit-norm (|v| = " + std::to_string(n) + ")");
      }
      entries_.push_back(std::move(entries[i]));
      vectors_.insert(vectors_.end(), row.begin(), row.end());
    }
    rebuild_pair_map();
  }

  IndexTarget target() const { return target_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const IndexEntry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  const Provenance& provenance() const { return provenance_; }
  void set_provenance(Provenance p) { provenance_ = std::move(p); }

  // Exact top-k by inner product (cosine for unit vectors), full scan with
  // f64 accumulation. Ties go to the smaller id. Entries whose pair_id equals
  // `exclude_pair_id` are skipped.
  std::vector<Hit> search(std::span<const float> q, std::size_t k,
                          std::optional<std::string_view> exclude_pair_id = std::nullopt) const {
    Matrix one(1, q.size());
    std::copy(q.begin(), q.end(), one.data().begin());
    return std::move(search_many(one, k, {exclude_pair_id}).front());
  }

  // Batched form of search(): one pass over the index scores a block of
  // queries, so entry rows are read from cache instead of memory. Results are
  // identical to calling search() per row. `exclude` is empty or has one
  // entry per query row.
  std::vector<std::vector<Hit>> search_many(const Matrix& queries, std::size_t k,
                                            const std::vector<std::optional<std::string_view>>& exclude = {}) const {
    if (queries.rows() > 0 && queries.cols() != dim_) {
      throw DimensionError("query dimension " + std::to_string(queries.cols()) + " ≠ index dimension " + std::to_string(dim_));
    }
    if (k == 0) throw ParameterError("k must be at least 1");
    if (!exclude.empty() && exclude.size() != queries.rows()) {
      throw DimensionError("search: " + std::to_string(exclude.size()) + " exclusions for " +
                           std::to_string(queries.rows()) + " queries");
    }
    const std::size_t nq = queries.rows();
    std::vector<const std::vector<std::uint32_t>*> excluded(nq, nullptr);
    for (std::size_t i = 0; i < nq && !exclude.empty(); ++i) {
      if (!exclude[i]) continue;
      auto it = by_pair_.find(std::string(*exclude[i]));
      if (it != by_pair_.end()) excluded[i] = &it->second;
    }
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t available = entries_.size() - (excluded[i] ? excluded[i]->size() : 0);
      if (k > available) {
        throw ParameterError("k exceeds index size after exclusion (k = " + std::to_string(k) + ", available " +
                             std::to_string(available) + ")");
      }
    }
    // Min-heap on "goodness": the root is the worst hit kept so far.
    auto better = [](const Hit& a, const Hit& b) {
      return a.similarity > b.similarity || (a.similarity == b.similarity && a.entry < b.entry);
    };
    std::vector<std::vector<Hit>> heaps(nq);
    for (auto& h : heaps) h.reserve(k + 1);
    std::vector<std::size_t> next_excluded(nq, 0);
    constexpr std::size_t kEntryBlock = 128;
    constexpr std::size_t kQueryBlock = 32;
    // Query rows [q0, q1) widened to double in groups of four.
    std::vector<std::vector<double>> widened(kQueryBlock / 4);
    std::size_t widened_from = static_cast<std::size_t>(-1);
    auto widen = [&](std::size_t q0, std::size_t q1) {
      for (std::size_t g = 0; g * 4 < q1 - q0; ++g) {
        auto& buf = widened[g];
        buf.assign(4 * dim_, 0.0);
        for (std::size_t w = 0; w < 4 && q0 + g * 4 + w < q1; ++w) {
          const auto row = queries.row(q0 + g * 4 + w);
          for (std::size_t c = 0; c < dim_; ++c) buf[w * dim_ + c] = static_cast<double>(row[c]);
        }
      }
    };
    for (std::size_t e0 = 0; e0 < entries_.size(); e0 += kEntryBlock) {
      const auto e1 = static_cast<std::uint32_t>(std::min(entries_.size(), e0 + kEntryBlock));
      for (std::size_t q0 = 0; q0 < nq; q0 += kQueryBlock) {
        const std::size_t q1 = std::min(nq, q0 + kQueryBlock);
        if (widened_from != q0) {
          widen(q0, q1);
          widened_from = q0;
        }
        for (std::size_t qi = q0; qi < q1; qi += 4) {
          const std::size_t width = std::min<std::size_t>(4, q1 - qi);
          const std::size_t block = (qi - q0) / 4;
          for (auto i = static_cast<std::uint32_t>(e0); i < e1; ++i) {
            double sims[4];
            dot4(widened[block], width, vector(i), sims);
            for (std::size_t w = 0; w < width; ++w) {
              const auto* ex = excluded[qi + w];
              auto& nx = next_excluded[qi + w];
              if (ex && nx < ex->size() && (*ex)[nx] == i) {
                ++nx;
                continue;
              }
              auto& heap = heaps[qi + w];
              const Hit h{i, sims[w]};
              if (heap.size() < k) {
                heap.push_back(h);
                std::push_heap(heap.begin(), heap.end(), better);
              } else if (better(h, heap.front())) {
                std::pop_heap(heap.begin(), heap.end(), better);
                heap.back() = h;
                std::push_heap(heap.begin(), heap.end(), better);
              }
            }
          }
        }
      }
    }
    for (auto& heap : heaps) std::sort_heap(heap.begin(), heap.end(), better);
    return heaps;
  }

  NeighborSet materialize(const std::vector<Hit>& hits, std::size_t k, std::optional<std::string> query_id = {}) const {
    NeighborSet out;
    out.k = k;
    out.query_id = std::move(query_id);
    out.neighbors.reserve(hits.size());
    for (const auto& h : hits) {
      const auto& e = entries_[h.entry];
      const auto v = vector(h.entry);
      out.neighbors.push_back(
          {h.entry, e.id, e.pair_id, e.modality, h.similarity, {v.begin(), v.end()}, e.labels, e.text, e.source});
    }
    return out;
  }

  NeighborSet query(std::span<const float> q, std::size_t k,
                    std::optional<std::string_view> exclude_pair_id = std::nullopt,
                    std::optional<std::string> query_id = std::nullopt) const {
    return materialize(search(q, k, exclude_pair_id), k, std::move(query_id));
  }

  // Union with the entries of `other`, which must share dim. Entry ids must
  // not collide.
  RetrievalIndex merged(const RetrievalIndex& other) const {
    if (other.empty()) return *this;
    if (other.dim_ != dim_) {
      throw DimensionError("extend: index dimension " + std::to_string(dim_) + " ≠ new entries' " + std::to_string(other.dim_));
    }
    std::vector<IndexEntry> entries = entries_;
    Matrix vectors(entries_.size() + other.size(), dim_);
    std::copy(vectors_.begin(), vectors_.end(), vectors.data().begin());
    std::copy(other.vectors_.begin(), other.vectors_.end(),
              vectors.data().begin() + static_cast<std::ptrdiff_t>(vectors_.size()));
    std::unordered_set<std::string> ids;
    for (const auto& e : entries_) ids.insert(e.id);
    for (const auto& e : other.entries_) {
      if (ids.count(e.id)) throw ValidationError("extend: id collision on '" + e.id + "'");
      entries.push_back(e);
    }
    return RetrievalIndex(target_, dim_, std::move(entries), vectors, provenance_);
  }

  // Deterministic subsample keeping round(fraction * size) entries.
  RetrievalIndex subsample(double fraction, std::uint64_t seed) const {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ParameterError("index fraction must be in (0, 1]");
    if (fraction == 1.0) return *this;
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(size())));
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(Rng::mix(seed, 0x5b5a));
    rng.shuffle(order.begin(), order.end());
    order.resize(keep);
    std::sort(order.begin(), order.end());
    std::vector<IndexEntry> entries;
    Matrix vectors(keep, dim_);
    for (std::size_t i = 0; i < keep; ++i) {
      entries.push_back(entries_[order[i]]);
      const auto v = vector(order[i]);
      std::copy(v.begin(), v.end(), vectors.row(i).begin());
    }
    return RetrievalIndex(target_, dim_, std::move(entries), vectors, provenance_);
  }

  std::vector<std::uint8_t> encode() const;
  static RetrievalIndex decode(ByteReader& r);

  void save(const std::filesystem::path& path) const {
    const auto bytes = encode();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  static RetrievalIndex load(const std::filesystem::path& path) {
    auto r = ByteReader::from_file(path, "index file");
    return decode(r);
  }

  friend bool operator==(const RetrievalIndex& a, const RetrievalIndex& b) {
    return a.target_ == b.target_ && a.dim_ == b.dim_ && a.entries_ == b.entries_ && a.vectors_ == b.vectors_ &&
           a.provenance_ == b.provenance_;
  }

 private:
  using Lanes = double __attribute__((vector_size(32)));

  // dot() of up to four query rows against one entry, with the same lane
  // layout and reduction order so every similarity is bit-identical to it.
  // `qd` holds the four queries already widened to double; rows past
  // `width` are ignored.
  static void dot4(const std::vector<double>& qd, std::size_t width, std::span<const float> e, double* out) {
    const std::size_t n = e.size();
    const std::size_t whole = n / 8 * 8;
    Lanes lo[4] = {}, hi[4] = {};
    for (std::size_t i = 0; i < whole; i += 8) {
      const Lanes elo = {e[i], e[i + 1], e[i + 2], e[i + 3]};
      const Lanes ehi = {e[i + 4], e[i + 5], e[i + 6], e[i + 7]};
      for (std::size_t w = 0; w < 4; ++w) {
        Lanes qlo, qhi;
        std::memcpy(&qlo, qd.data() + w * n + i, sizeof(Lanes));
        std::memcpy(&qhi, qd.data() + w * n + i + 4, sizeof(Lanes));
        lo[w] += qlo * elo;
        hi[w] += qhi * ehi;
      }
    }
    for (std::size_t w = 0; w < width; ++w) {
      double lane[8];
      std::memcpy(lane, &lo[w], sizeof(Lanes));
      std::memcpy(lane + 4, &hi[w], sizeof(Lanes));
      for (std::size_t i = whole; i < n; ++i) lane[0] += qd[w * n + i] * static_cast<double>(e[i]);
      out[w] = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    }
  }

  void rebuild_pair_map() {
    by_pair_.clear();
    for (std::uint32_t i = 0; i < entries_.size(); ++i) by_pair_[entries_[i].pair_id].push_back(i);
  }

  IndexTarget target_ = IndexTarget::X;
  std::size_t dim_ = 0;
  std::vector<IndexEntry> entries_;
  std::vector<float> vectors_;
  Provenance provenance_;
  std::unordered_map<std::string, std::vector<std::uint32_t>> by_pair_;
};

// Index file layout, little-endian:
//   0   magic "XIDX"
//   4   u32 version
//   8   u32 dim
//   12  u32 target tag (0 = x, 1 = r, 2 = xr)
//   16  u64 entry count
//   24  u64 string table offset (absolute)
//   32  u64 string table size
//   40  u64 provenance JSON offset (within the string table)
//   48  u32 provenance JSON length
//   52  u32 reserved
//   56  entry records, each 56 + 4 * dim bytes:
//         id, pair_id, text, source as (u64 offset, u32 length) string refs;
//         a text length of 0xffffffff marks "no text"
//         u16 label bitmask (bit c = class c), u8 modality, u8 reserved
//         u32 reserved, f32 x dim
//   then the string table.
inline constexpr char kIndexMagic[4] = {'X', 'I', 'D', 'X'};
inline constexpr std::uint32_t kIndexVersion = 1;
inline constexpr std::size_t kIndexHeaderSize = 56;
inline constexpr std::uint32_t kNoText = 0xffffffffU;

inline std::size_t index_entry_size(std::size_t dim) { return 4 * 12 + 8 + 4 * dim; }

inline std::vector<std::uint8_t> RetrievalIndex::encode() const {
  std::string table;
  auto intern = [&](const std::string& s) {
    const std::uint64_t off = table.size();
    table += s;
    return std::pair<std::uint64_t, std::uint32_t>{off, static_cast<std::uint32_t>(s.size())};
  };
  const std::string prov = provenance_.to_json().dump();
  const auto prov_ref = intern(prov);

  ByteWriter w;
  w.raw(std::string_view(kIndexMagic, 4));
  w.u32(kIndexVersion);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(target_));
  w.u64(entries_.size());
  const std::uint64_t table_offset = kIndexHeaderSize + entries_.size() * index_entry_size(dim_);
  w.u64(table_offset);
  const std::size_t table_size_at = w.size();
  w.u64(0);
  w.u64(prov_ref.first);
  w.u32(prov_ref.second);
  w.u32(0);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    for (const auto* s : {&e.id, &e.pair_id}) {
      const auto ref = intern(*s);
      w.u64(ref.first);
      w.u32(ref.second);
    }
    if (e.text) {
      const auto ref = intern(*e.text);
      w.u64(ref.first);
      w.u32(ref.second);
    } else {
      w.u64(0);
      w.u32(kNoText);
    }
    const auto src = intern(e.source);
    w.u64(src.first);
    w.u32(src.second);
    std::uint16_t bits = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (e.labels[c]) bits = static_cast<std::uint16_t>(bits | (1u << c));
    w.u16(bits);
    w.u8(e.modality == Modality::Image ? 0 : 1);
    w.u8(0);
    w.u32(0);
    for (float v : vector(i)) w.f32(v);
  }
  w.patch_u64(table_size_at, table.size());
  w.raw(table);
  return w.bytes();
}

inline RetrievalIndex RetrievalIndex::decode(ByteReader& r) {
  if (r.size() < kIndexHeaderSize) throw FormatError("truncated index header", r.size());
  if (r.raw(4) != std::string_view(kIndexMagic, 4)) throw FormatError("bad index magic, expected XIDX", 0);
  const std::uint32_t version = r.u32();
  if (version != kIndexVersion) throw FormatError("unsupported index version " + std::to_string(version), 4);
  const std::uint32_t dim = r.u32();
  if (dim == 0) throw FormatError("index dimension is zero", 8);
  const std::uint32_t tag = r.u32();
  if (tag > 2) throw FormatError("unknown index target tag " + std::to_string(tag), 12);
  const std::uint64_t count = r.u64();
  const std::uint64_t table_offset = r.u64();
  const std::uint64_t table_size = r.u64();
  const std::uint64_t prov_off = r.u64();
  const std::uint32_t prov_len = r.u32();
  r.u32();
  const std::uint64_t expected_table = kIndexHeaderSize + count * index_entry_size(dim);
  if (table_offset != expected_table) throw FormatError("string table offset inconsistent with entry count", 24);
  if (r.size() < table_offset + table_size) {
    throw FormatError("truncated index body: expected " + std::to_string(table_offset + table_size) + " bytes, file has " +
                          std::to_string(r.size()),
                      r.size());
  }
  if (r.size() > table_offset + table_size) throw FormatError("trailing bytes after index string table", table_offset + table_size);

  const std::size_t entries_at = r.offset();
  r.seek(table_offset);
  const std::string table = r.raw(table_size);
  auto lookup = [&](std::uint64_t off, std::uint32_t len, std::size_t at) {
    if (off + len > table.size()) throw FormatError("string reference outside the string table", at);
    return table.substr(off, len);
  };
  Provenance prov;
  try {
    prov = Provenance::from_json(nlohmann::json::parse(lookup(prov_off, prov_len, 40)));
  } catch (const nlohmann::json::exception&) {
    throw FormatError("index provenance is not valid JSON", 40);
  }
  r.seek(entries_at);

  std::vector<IndexEntry> entries;
  entries.reserve(count);
  Matrix vectors(count, dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    IndexEntry e;
    std::uint64_t off = r.u64();
    std::uint32_t len = r.u32();
    e.id = lookup(off, len, at);
    off = r.u64();
    len = r.u32();
    e.pair_id = lookup(off, len, at + 12);
    off = r.u64();
    len = r.u32();
    if (len != kNoText) e.text = lookup(off, len, at + 24);
    off = r.u64();
    len = r.u32();
    e.source = lookup(off, len, at + 36);
    const std::uint16_t bits = r.u16();
    for (std::size_t c = 0; c < kNumClasses; ++c) e.labels[c] = (bits >> c) & 1u;
    const std::uint8_t modality = r.u8();
    if (modality > 1) throw FormatError("bad modality tag", at + 50);
    e.modality = modality == 0 ? Modality::Image : Modality::Report;
    r.u8();
    r.u32();
    auto row = vectors.row(i);
    for (auto& v : row) {
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError("non-finite vector entry", r.offset() - 4);
    }
    entries.push_back(std::move(e));
  }
  try {
    return RetrievalIndex(static_cast<IndexTarget>(tag), dim, std::move(entries), vectors, prov);
  } catch (const ValidationError& e) {
    throw FormatError(e.what(), kIndexHeaderSize);
  }
}

struct IndexBuildOptions {
  std::string source;      // provenance tag per entry; defaults to dataset name
  double fraction = 1.0;   // partial index: deterministic subsample of TRAIN pairs
  std::uint64_t seed = 0;
  Provenance provenance;
};

// Aligned vectors of every TRAIN record of the target modality (both for XR).
inline RetrievalIndex build_index(const AlignmentModel<float>& model, const Dataset& ds, IndexTarget target,
                                  const IndexBuildOptions& opt = {}) {
  auto rows = ds.indices(Split::Train);
  if (rows.empty()) throw ValidationError("build_index: dataset '" + ds.name + "' has an empty TRAIN split");
  if (!(opt.fraction > 0.0 && opt.fraction <= 1.0)) throw ParameterError("index fraction must be in (0, 1]");
  if (opt.fraction < 1.0) {
    const auto keep = static_cast<std::size_t>(std::llround(opt.fraction * static_cast<double>(rows.size())));
    Rng rng(Rng::mix(opt.seed, 0xf4ac));
    rng.shuffle(rows.begin(), rows.end());
    rows.resize(keep);
    std::sort(rows.begin(), rows.end());
    if (rows.empty()) throw ParameterError("build_index: fraction leaves no entries");
  }
  const std::string source = opt.source.empty() ? ds.name : opt.source;
  std::vector<IndexEntry> entries;
  std::vector<Matrix> blocks;
  for (Modality m : {Modality::Image, Modality::Report}) {
    if ((m == Modality::Image && target == IndexTarget::R) || (m == Modality::Report && target == IndexTarget::X)) continue;
    blocks.push_back(project_rows(model, ds, rows, m));
    for (std::size_t r : rows) {
      const auto& rec = m == Modality::Image ? ds.pairs[r].image : ds.pairs[r].report;
      entries.push_back({rec.id, rec.pair_id, m, rec.labels, rec.text, source});
    }
  }
  Matrix vectors = blocks.front();
  if (blocks.size() == 2) {
    Matrix both(vectors.rows() + blocks[1].rows(), ds.z_enc);
    std::copy(vectors.data().begin(), vectors.data().end(), both.data().begin());
    std::copy(blocks[1].data().begin(), blocks[1].data().end(),
              both.data().begin() + static_cast<std::ptrdiff_t>(vectors.size()));
    vectors = std::move(both);
  }
  return RetrievalIndex(target, ds.z_enc, std::move(entries), vectors, opt.provenance);
}

// Adds the TRAIN records of `more` (aligned with `model`) to `index`, tagged
// with that dataset's name. An empty dataset leaves the index unchanged.
inline RetrievalIndex extend_index(const RetrievalIndex& index, const AlignmentModel<float>& model, const Dataset& more,
                                   const std::string& source = {}) {
  if (more.pairs.empty() || more.count(Split::Train) == 0) return index;
  if (more.z_enc != index.dim()) {
    throw DimensionError("extend: dataset z_enc " + std::to_string(more.z_enc) + " ≠ index dimension " +
                         std::to_string(index.dim()));
  }
  IndexBuildOptions opt;
  opt.source = source.empty() ? more.name : source;
  return index.merged(build_index(model, more, index.target(), opt));
}

// Share of retrieved neighbours per source tag over a set of queries.
inline std::map<std::string, double> provenance_fractions(const std::vector<NeighborSet>& results) {
  std::map<std::string, double> out;
  std::size_t total = 0;
  for (const auto& ns : results)
    for (const auto& n : ns.neighbors) {
      out[n.source] += 1.0;
      ++total;
    }
  for (auto& [k, v] : out) v /= static_cast<double>(total);
  return out;
}

// Class-based retrieval rankings for every row of `queries` against `index`.
inline std::vector<RankedRetrieval> rank_queries(const RetrievalIndex& index, const Matrix& queries,
                                                 const std::vector<Labels>& query_labels, std::size_t k) {
  std::vector<RankedRetrieval> out(queries.rows());
  const auto hits = index.search_many(queries, k);
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    out[i].query = query_labels[i];
    for (const auto& h : hits[i]) out[i].results.push_back(index.entry(h.entry).labels);
  }
  return out;
}

}  // namespace xtra
