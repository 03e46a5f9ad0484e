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

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace xtra {
namespace {

using testing::random_unit_rows;

IndexEntry entry(std::string id, std::string pair_id) {
  IndexEntry e;
  e.id = std::move(id);
  e.pair_id = std::move(pair_id);
  return e;
}

std::string entry_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "e%06zu", i);
  return buf;
}

RetrievalIndex random_index(std::size_t n, std::size_t dim, Rng& rng, Matrix* vectors_out = nullptr,
                            const std::string& source = "rand") {
  const Matrix v = random_unit_rows(n, dim, rng);
  std::vector<IndexEntry> entries(n);
  for (std::size_t i = 0; i < n; ++i) {
    entries[i].id = entry_id(i);
    entries[i].pair_id = "p" + std::to_string(i / 2);
    entries[i].labels[i % kNumClasses] = 1;
    entries[i].source = source;
  }
  if (vectors_out) *vectors_out = v;
  return RetrievalIndex(IndexTarget::X, dim, entries, v);
}

// Sequential f64 scan and a full sort by (similarity desc, id asc).
std::vector<std::string> oracle_top_k(const RetrievalIndex& index, std::span<const float> q, std::size_t k,
                                      const std::string& exclude_pair = "") {
  std::vector<std::pair<double, std::string>> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!exclude_pair.empty() && index.entry(i).pair_id == exclude_pair) continue;
    const auto v = index.vector(i);
    double s = 0;
    for (std::size_t c = 0; c < v.size(); ++c) s += double(q[c]) * double(v[c]);
    all.emplace_back(s, index.entry(i).id);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

std::vector<std::string> ids_of(const RetrievalIndex& index, const std::vector<Hit>& hits) {
  std::vector<std::string> out;
  for (const auto& h : hits) out.push_back(index.entry(h.entry).id);
  return out;
}

TEST(Search, SelfRetrieval) {
  Rng rng(1);
  Matrix v;
  const auto index = random_index(50, 16, rng, &v);
  const auto ns = index.query(v.row(7), 1);
  ASSERT_EQ(ns.size(), 1u);
  EXPECT_EQ(ns.neighbors[0].id, entry_id(7));
  EXPECT_NEAR(ns.neighbors[0].similarity, 1.0, 1e-6);
}

TEST(Search, FixedPlanarVectors) {
  const double pi = std::acos(-1.0);
  const std::vector<double> angles = {0.0, 0.5, 1.3, 2.0, 3.0};
  Matrix v(5, 2);
  std::vector<IndexEntry> entries(5);
  for (std::size_t i = 0; i < 5; ++i) {
    v(i, 0) = static_cast<float>(std::cos(angles[i]));
    v(i, 1) = static_cast<float>(std::sin(angles[i]));
    entries[i].id = std::string(1, char('a' + i));
    entries[i].pair_id = entries[i].id;
  }
  const RetrievalIndex index(IndexTarget::X, 2, entries, v);
  Matrix q(1, 2);
  q(0, 0) = static_cast<float>(std::cos(pi / 3));
  q(0, 1) = static_cast<float>(std::sin(pi / 3));
  const auto hits = index.search(q.row(0), 3);
  EXPECT_EQ(ids_of(index, hits), oracle_top_k(index, q.row(0), 3));
  EXPECT_EQ(ids_of(index, hits), (std::vector<std::string>{"c", "b", "d"}));
}

TEST(Search, ExclusionReturnsSecondClosest) {
  Matrix v(3, 2);
  v(0, 0) = 1;
  v(1, 0) = 0.8f, v(1, 1) = 0.6f;
  v(2, 1) = 1;
  std::vector<IndexEntry> entries = {entry("a", "pa"), entry("b", "pb"), entry("c", "pc")};
  const RetrievalIndex index(IndexTarget::X, 2, entries, v);
  EXPECT_EQ(index.query(v.row(0), 1).neighbors[0].id, "a");
  const auto ns = index.query(v.row(0), 1, "pa");
  EXPECT_EQ(ns.neighbors[0].id, "b");
  EXPECT_NEAR(ns.neighbors[0].similarity, 0.8, 1e-6);
}

TEST(Search, KBeyondAvailableAfterExclusion) {
  Rng rng(2);
  Matrix v;
  const auto index = random_index(6, 8, rng, &v);  // pairs p0..p2, two entries each
  EXPECT_NO_THROW(index.search(v.row(0), 6));
  EXPECT_NO_THROW(index.search(v.row(0), 4, "p0"));
  try {
    index.search(v.row(0), 5, "p0");
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("k exceeds index size after exclusion"), std::string::npos);
  }
  EXPECT_THROW(index.search(v.row(0), 0), ParameterError);
  EXPECT_THROW(index.search(std::vector<float>(7, 0.f), 1), DimensionError);
}

TEST(Search, TiesGoToSmallerId) {
  Matrix v(4, 3);
  v(0, 0) = 1;
  v(1, 1) = 1;
  v(2, 0) = 1;
  v(3, 0) = 1;
  // Entries are given out of id order on purpose.
  std::vector<IndexEntry> entries = {entry("m", "1"), entry("a", "2"), entry("z", "3"), entry("c", "4")};
  const RetrievalIndex index(IndexTarget::X, 3, entries, v);
  const auto hits = index.search(v.row(0), 4);
  EXPECT_EQ(ids_of(index, hits), (std::vector<std::string>{"c", "m", "z", "a"}));
  EXPECT_EQ(ids_of(index, hits), oracle_top_k(index, v.row(0), 4));
}

TEST(Search, MatchesBruteForceOracle) {
  Rng rng(3);
  const auto index = random_index(3000, 48, rng);
  const Matrix q = random_unit_rows(300, 48, rng);
  const auto batched = index.search_many(q, 10);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto expect = oracle_top_k(index, q.row(i), 10);
    EXPECT_EQ(ids_of(index, batched[i]), expect) << "query " << i;
    EXPECT_EQ(ids_of(index, index.search(q.row(i), 10)), expect) << "query " << i;
  }
}

TEST(Search, BatchedEqualsSingleIncludingExclusionsAndOddWidths) {
  Rng rng(4);
  const auto index = random_index(777, 37, rng);
  const Matrix q = random_unit_rows(71, 37, rng);
  std::vector<std::optional<std::string_view>> exclude(q.rows());
  std::vector<std::string> pairs(q.rows());
  for (std::size_t i = 0; i < q.rows(); i += 3) {
    pairs[i] = "p" + std::to_string(i);
    exclude[i] = pairs[i];
  }
  const auto batched = index.search_many(q, 7, exclude);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto single = index.search(q.row(i), 7, exclude[i]);
    ASSERT_EQ(single.size(), batched[i].size());
    for (std::size_t j = 0; j < single.size(); ++j) {
      EXPECT_EQ(single[j].entry, batched[i][j].entry);
      EXPECT_EQ(single[j].similarity, batched[i][j].similarity);
      EXPECT_EQ(single[j].similarity, dot(q.row(i), index.vector(single[j].entry)));
    }
    if (exclude[i]) {
      for (const auto& h : single) EXPECT_NE(index.entry(h.entry).pair_id, pairs[i]);
      EXPECT_EQ(ids_of(index, single), oracle_top_k(index, q.row(i), 7, pairs[i]));
    }
  }
}

TEST(Search, TopKIsPrefixOfTopKPlusOneAndBounded) {
  Rng rng(5);
  const auto index = random_index(400, 12, rng);
  const Matrix q = random_unit_rows(20, 12, rng);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t k = 1; k < 15; ++k) {
      const auto a = index.query(q.row(i), k);
      const auto b = index.query(q.row(i), k + 1);
      for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(a.neighbors[j].id, b.neighbors[j].id);
      for (std::size_t j = 0; j + 1 < b.size(); ++j) EXPECT_GE(b.neighbors[j].similarity, b.neighbors[j + 1].similarity);
      for (const auto& n : b.neighbors) {
        EXPECT_GE(n.similarity, -1 - 1e-5);
        EXPECT_LE(n.similarity, 1 + 1e-5);
      }
    }
  }
}

TEST(Search, ConcurrentQueriesAgree) {
  Rng rng(6);
  const auto index = random_index(2000, 32, rng);
  const Matrix q = random_unit_rows(64, 32, rng);
  const auto expect = index.search_many(q, 10);
  std::vector<std::vector<std::vector<Hit>>> got(4);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (std::size_t i = 0; i < q.rows(); ++i) got[t].push_back(index.search(q.row(i), 10));
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& g : got)
    for (std::size_t i = 0; i < q.rows(); ++i)
      for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(g[i][j].entry, expect[i][j].entry);
}

TEST(Construction, RejectsBadEntries) {
  Matrix v(2, 2);
  v(0, 0) = 1;
  v(1, 0) = 2;
  EXPECT_THROW(RetrievalIndex(IndexTarget::X, 2, {entry("a", "a"), entry("b", "b")}, v), ValidationError);
  v(1, 0) = 1;
  EXPECT_THROW(RetrievalIndex(IndexTarget::X, 2, {entry("a", "a"), entry("a", "b")}, v), ValidationError);
  EXPECT_THROW(RetrievalIndex(IndexTarget::X, 3, {entry("a", "a"), entry("b", "b")}, v), DimensionError);
}

Dataset small_dataset(std::size_t n, std::uint64_t seed, const std::string& name) {
  auto c = testing::synth(n, seed);
  c.name = name;
  return generate_synthetic(c);
}

TEST(Build, CardinalityAndOrder) {
  const Dataset ds = small_dataset(100, 1, "alpha");
  const auto model = AlignmentModel<float>::create(ds.z_enc, {}, 1);
  const auto x = build_index(model, ds, IndexTarget::X);
  const auto xr = build_index(model, ds, IndexTarget::XR);
  EXPECT_EQ(x.size(), ds.count(Split::Train));
  EXPECT_EQ(xr.size(), 2 * ds.count(Split::Train));
  for (std::size_t i = 0; i + 1 < xr.size(); ++i) EXPECT_LT(xr.entry(i).id, xr.entry(i + 1).id);
  const auto r = build_index(model, ds, IndexTarget::R);
  for (const auto& e : r.entries()) {
    EXPECT_EQ(e.modality, Modality::Report);
    EXPECT_TRUE(e.text.has_value());
    EXPECT_EQ(e.source, "alpha");
  }
}

TEST(Build, PartialIndexIsDeterministicSubset) {
  const Dataset ds = small_dataset(200, 2, "beta");
  const auto model = AlignmentModel<float>::create(ds.z_enc, {}, 2);
  IndexBuildOptions opt;
  opt.fraction = 0.5;
  opt.seed = 3;
  const auto a = build_index(model, ds, IndexTarget::X, opt);
  EXPECT_EQ(a.size(), static_cast<std::size_t>(std::llround(0.5 * double(ds.count(Split::Train)))));
  EXPECT_EQ(a, build_index(model, ds, IndexTarget::X, opt));
  opt.fraction = 0.0;
  EXPECT_THROW(build_index(model, ds, IndexTarget::X, opt), ParameterError);
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Persistence, RoundTripAndIdenticalBytes) {
  const auto dir = testing::fresh_dir("index_io");
  const Dataset ds = small_dataset(120, 3, "gamma");
  const auto model = AlignmentModel<float>::create(ds.z_enc, {}, 3);
  Provenance prov;
  prov.seed = 17;
  prov.config_hash = "abc";
  IndexBuildOptions opt;
  opt.provenance = prov;
  const auto index = build_index(model, ds, IndexTarget::XR, opt);
  index.save(dir / "a.xidx");
  build_index(model, ds, IndexTarget::XR, opt).save(dir / "b.xidx");
  EXPECT_EQ(file_bytes(dir / "a.xidx"), file_bytes(dir / "b.xidx"));
  const auto back = RetrievalIndex::load(dir / "a.xidx");
  EXPECT_EQ(back, index);
  EXPECT_EQ(back.provenance().seed, 17u);
  const auto q = project_rows(model, ds, ds.indices(Split::Test), Modality::Image);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto a = index.query(q.row(i), 5), b = back.query(q.row(i), 5);
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(a.neighbors[j].id, b.neighbors[j].id);
      EXPECT_EQ(a.neighbors[j].similarity, b.neighbors[j].similarity);
      EXPECT_EQ(a.neighbors[j].text, b.neighbors[j].text);
    }
  }
}

std::size_t load_error_offset(const std::filesystem::path& p) {
  try {
    RetrievalIndex::load(p);
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return 0;
}

TEST(Persistence, CorruptedHeaderNamesOffset) {
  const auto dir = testing::fresh_dir("index_bad");
  Rng rng(7);
  random_index(10, 4, rng).save(dir / "ok.xidx");
  const std::string bytes = file_bytes(dir / "ok.xidx");
  auto write = [&](const std::string& name, std::string b) {
    std::ofstream(dir / name, std::ios::binary) << b;
    return dir / name;
  };
  std::string bad = bytes;
  bad[0] = 'Y';
  EXPECT_EQ(load_error_offset(write("magic.xidx", bad)), 0u);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(load_error_offset(write("version.xidx", bad)), 4u);
  bad = bytes;
  bad[16] = 11;
  EXPECT_EQ(load_error_offset(write("count.xidx", bad)), 24u);
  EXPECT_GT(load_error_offset(write("short.xidx", bytes.substr(0, bytes.size() - 3))), 0u);
  EXPECT_EQ(load_error_offset(write("tiny.xidx", bytes.substr(0, 20))), 20u);
  EXPECT_THROW(RetrievalIndex::load(dir / "missing.xidx"), ArtifactError);
}

TEST(Extend, UnionWithProvenance) {
  const Dataset a = small_dataset(143, 4, "first");
  auto cb = testing::synth(71, 5);
  cb.name = "second";
  const Dataset b = generate_synthetic(cb);
  const auto model = AlignmentModel<float>::create(a.z_enc, {}, 4);
  const auto base = build_index(model, a, IndexTarget::X);
  ASSERT_EQ(base.size(), 100u);
  ASSERT_EQ(b.count(Split::Train), 50u);
  const auto both = extend_index(base, model, b);
  EXPECT_EQ(both.size(), 150u);
  std::set<std::string> tags;
  for (const auto& e : both.entries()) tags.insert(e.source);
  EXPECT_EQ(tags, (std::set<std::string>{"first", "second"}));
  Dataset empty;
  empty.z_enc = a.z_enc;
  EXPECT_EQ(extend_index(base, model, empty), base);
  EXPECT_THROW(extend_index(base, model, a), ValidationError);
}

TEST(Extend, ProvenanceFractionsPartitionResults) {
  Rng rng(8);
  const auto a = random_index(300, 16, rng, nullptr, "one");
  Matrix vb = random_unit_rows(100, 16, rng);
  std::vector<IndexEntry> eb(100);
  for (std::size_t i = 0; i < 100; ++i) eb[i] = {"b" + std::to_string(i), "b" + std::to_string(i), Modality::Image, {}, {}, "two"};
  const auto merged = a.merged(RetrievalIndex(IndexTarget::X, 16, eb, vb));
  const Matrix q = random_unit_rows(1000, 16, rng);
  std::vector<NeighborSet> results;
  for (std::size_t i = 0; i < q.rows(); ++i) results.push_back(merged.query(q.row(i), 10));
  const auto f = provenance_fractions(results);
  double total = 0;
  for (const auto& [k, v] : f) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(f.at("two"), 0.25, 0.05);
}

TEST(Subsample, KeepsRoundedFraction) {
  Rng rng(9);
  const auto index = random_index(101, 8, rng);
  const auto half = index.subsample(0.5, 1);
  EXPECT_EQ(half.size(), 51u);
  EXPECT_EQ(half, index.subsample(0.5, 1));
  EXPECT_EQ(index.subsample(1.0, 1), index);
  EXPECT_THROW(index.subsample(1.5, 1), ParameterError);
  for (const auto& e : half.entries()) {
    const auto& all = index.entries();
    EXPECT_TRUE(std::find(all.begin(), all.end(), e) != all.end());
  }
}

// Throughput gate for the exact scan at full desk scale.
TEST(Performance, FlatScanAt200kBy512) {
  Rng rng(10);
  const std::size_t n = 200000, dim = 512, nq = 128;
  const auto index = random_index(n, dim, rng);
  const Matrix q = random_unit_rows(nq, dim, rng);
  const auto t0 = std::chrono::steady_clock::now();
  const auto hits = index.search_many(q, 10);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(hits.size(), nq);
  const double qps = double(nq) / s;
  RecordProperty("queries_per_second", std::to_string(qps));
  std::printf("flat scan: %.1f queries/s\n", qps);
  EXPECT_GE(qps, 50.0);
}

}  // namespace
}  // namespace xtra
