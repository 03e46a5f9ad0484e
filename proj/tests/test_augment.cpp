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
#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace xtra {
namespace {

using testing::random_matrix;
using testing::random_unit_rows;

NeighborSet make_set(const Matrix& rows, const std::vector<std::size_t>& order) {
  NeighborSet s;
  s.k = order.size();
  for (std::size_t j : order) {
    Neighbor n;
    n.id = "n" + std::to_string(j);
    n.pair_id = n.id;
    n.similarity = 1.0 - 0.01 * double(j);
    n.vector.assign(rows.row(j).begin(), rows.row(j).end());
    s.neighbors.push_back(n);
  }
  return s;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

AlignedVector aligned(const Matrix& m, std::size_t row = 0) {
  return {{m.row(row).begin(), m.row(row).end()}, Modality::Image};
}

// Straightforward per-head attention in double precision.
std::vector<double> attention_oracle(const MultiHeadAttention<float>& a, std::span<const float> x, const Matrix& nbrs,
                                     const std::vector<double>* bias = nullptr) {
  const std::size_t z = a.dim(), dh = a.head_dim(), k = nbrs.rows();
  auto project = [&](const Linear<float>& l, std::span<const float> v) {
    std::vector<double> out(z, 0.0);
    for (std::size_t o = 0; o < z; ++o)
      for (std::size_t i = 0; i < z; ++i) out[o] += double(v[i]) * double(l.weight.value(i, o));
    return out;
  };
  const auto q = project(a.wq, x);
  std::vector<std::vector<double>> keys, values;
  for (std::size_t j = 0; j < k; ++j) {
    keys.push_back(project(a.wk, nbrs.row(j)));
    values.push_back(project(a.wv, nbrs.row(j)));
  }
  std::vector<float> concat(z);
  for (std::size_t h = 0; h < a.n_heads; ++h) {
    std::vector<double> logit(k);
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t d = 0; d < dh; ++d) logit[j] += q[h * dh + d] * keys[j][h * dh + d];
      logit[j] /= std::sqrt(double(dh));
      if (bias) logit[j] += (*bias)[j];
      mx = std::max(mx, logit[j]);
    }
    double total = 0;
    for (auto& l : logit) total += (l = std::exp(l - mx));
    for (std::size_t d = 0; d < dh; ++d) {
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += logit[j] / total * values[j][h * dh + d];
      concat[h * dh + d] = static_cast<float>(acc);
    }
  }
  return project(a.wo, concat);
}

TEST(Attention, HeadsMustDivideWidth) {
  Rng rng(1);
  EXPECT_THROW(MultiHeadAttention<float>("a", 10, 4, rng), ParameterError);
  EXPECT_THROW(MultiHeadAttention<float>("a", 8, 0, rng), ParameterError);
  EXPECT_NO_THROW(MultiHeadAttention<float>("a", 8, 4, rng));
}

TEST(Attention, MatchesDirectEvaluation) {
  Rng rng(2);
  const MultiHeadAttention<float> a("a", 16, 4, rng);
  for (int t = 0; t < 10; ++t) {
    const Matrix x = random_unit_rows(1, 16, rng);
    const Matrix n = random_unit_rows(7, 16, rng);
    const auto set = make_set(n, iota(7));
    const auto got = mha_fuse(a, aligned(x), set);
    const auto expect = attention_oracle(a, x.row(0), n);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(got[i], expect[i], 1e-5);
    std::vector<double> bias;
    for (const auto& nb : set.neighbors) bias.push_back(nb.similarity);
    const auto got_b = mha_fuse(a, aligned(x), set, true);
    const auto expect_b = attention_oracle(a, x.row(0), n, &bias);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(got_b[i], expect_b[i], 1e-5);
  }
}

TEST(Attention, SingleNeighbourGetsAllWeight) {
  Rng rng(3);
  const MultiHeadAttention<float> a("a", 8, 2, rng);
  const Matrix x = random_unit_rows(1, 8, rng);
  const Matrix n = random_unit_rows(1, 8, rng);
  typename MultiHeadAttention<float>::Cache cache;
  const Matrix out = a.forward(x, n, 1, nullptr, &cache);
  for (double w : cache.weights) EXPECT_EQ(w, 1.0);
  const Matrix expect = a.wo.forward(a.wv.forward(n));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out(0, i), expect(0, i), 1e-6);
}

TEST(Attention, IdenticalNeighboursEqualSingleton) {
  Rng rng(4);
  const MultiHeadAttention<float> a("a", 12, 3, rng);
  const Matrix x = random_unit_rows(1, 12, rng);
  const Matrix one = random_unit_rows(1, 12, rng);
  const auto single = mha_fuse(a, aligned(x), make_set(one, {0}));
  const auto repeated = mha_fuse(a, aligned(x), make_set(one, {0, 0, 0, 0, 0}));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(single[i], repeated[i], 1e-6);
}

TEST(Attention, WeightsAreADistributionPerHead) {
  Rng rng(5);
  const MultiHeadAttention<float> a("a", 16, 4, rng);
  const Matrix x = random_matrix(6, 16, rng, 2.0);
  const Matrix n = random_matrix(6 * 9, 16, rng, 2.0);
  typename MultiHeadAttention<float>::Cache cache;
  a.forward(x, n, 9, nullptr, &cache);
  for (std::size_t b = 0; b < 6; ++b)
    for (std::size_t h = 0; h < 4; ++h) {
      const auto w = MultiHeadAttention<float>::weights_of(cache, 4, b, h);
      ASSERT_EQ(w.size(), 9u);
      double s = 0;
      for (double v : w) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, ShapeErrors) {
  Rng rng(6);
  const MultiHeadAttention<float> a("a", 8, 2, rng);
  EXPECT_THROW(a.forward(Matrix(2, 8), Matrix(5, 8), 3), DimensionError);
  EXPECT_THROW(a.forward(Matrix(1, 8), Matrix(0, 8), 0), DimensionError);
  NeighborSet empty;
  EXPECT_THROW(mha_fuse(a, aligned(random_unit_rows(1, 8, rng)), empty), ValidationError);
}

FusionConfig config(FusionStrategy s, bool intra, bool inter, std::size_t k, std::size_t heads = 4) {
  FusionConfig c;
  c.strategy = s;
  c.use_intra = intra;
  c.use_inter = inter;
  c.k = k;
  c.n_heads = heads;
  return c;
}

TEST(Augment, LayoutArithmetic) {
  Rng rng(7);
  const std::size_t z = 16;
  const Matrix x = random_unit_rows(1, z, rng);
  const Matrix n = random_unit_rows(10, z, rng);
  const auto set = make_set(n, iota(10));
  auto intra_only = config(FusionStrategy::Mha, true, false, 10);
  auto blocks = FusionBlocks<float>::create(intra_only, z, rng);
  const auto a = augment(aligned(x), &set, nullptr, intra_only, blocks);
  EXPECT_EQ(a.values.size(), 2 * z);
  EXPECT_EQ(a.layout, (std::vector<std::string>{"x", "mha_intra"}));
  auto concat = config(FusionStrategy::Concat, true, true, 10);
  const auto c = augment(aligned(x), &set, &set, concat, FusionBlocks<float>::create(concat, z, rng));
  EXPECT_EQ(c.values.size(), 21 * z);
  EXPECT_EQ(concat.output_dim(z), 21 * z);
  EXPECT_EQ(config(FusionStrategy::Mha, true, true, 10).output_dim(z), 3 * z);
  EXPECT_EQ(config(FusionStrategy::Mha, false, false, 10).output_dim(z), z);
  EXPECT_TRUE(std::equal(x.row(0).begin(), x.row(0).end(), c.values.begin()));
}

TEST(Augment, MissingOrShortBranchIsAnError) {
  Rng rng(8);
  const Matrix x = random_unit_rows(1, 8, rng);
  const Matrix n = random_unit_rows(4, 8, rng);
  const auto set = make_set(n, iota(4));
  auto both = config(FusionStrategy::Mha, true, true, 4, 2);
  const auto blocks = FusionBlocks<float>::create(both, 8, rng);
  EXPECT_THROW(augment(aligned(x), &set, nullptr, both, blocks), ValidationError);
  EXPECT_THROW(augment(aligned(x), nullptr, &set, both, blocks), ValidationError);
  const auto short_set = make_set(n, {0, 1});
  EXPECT_THROW(augment(aligned(x), &set, &short_set, both, blocks), DimensionError);
  auto bad = both;
  bad.n_heads = 3;
  EXPECT_THROW(augment(aligned(x), &set, &set, bad, blocks), ParameterError);
}

TEST(Augment, MhaIsPermutationInvariantConcatIsNot) {
  Rng rng(9);
  const std::size_t z = 16;
  const Matrix x = random_unit_rows(1, z, rng);
  const Matrix n = random_unit_rows(6, z, rng);
  const auto ordered = make_set(n, iota(6));
  const auto shuffled = make_set(n, {3, 0, 5, 1, 4, 2});
  auto mha = config(FusionStrategy::Mha, true, true, 6);
  const auto blocks = FusionBlocks<float>::create(mha, z, rng);
  const auto a = augment(aligned(x), &ordered, &ordered, mha, blocks).values;
  const auto b = augment(aligned(x), &shuffled, &shuffled, mha, blocks).values;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  auto concat = config(FusionStrategy::Concat, true, true, 6);
  const auto cb = FusionBlocks<float>::create(concat, z, rng);
  EXPECT_NE(augment(aligned(x), &ordered, &ordered, concat, cb).values,
            augment(aligned(x), &shuffled, &shuffled, concat, cb).values);
}

TEST(Augment, ZeroOutputProjectionIgnoresRetrieval) {
  Rng rng(10);
  const std::size_t z = 8;
  const Matrix x = random_unit_rows(1, z, rng);
  const Matrix n = random_unit_rows(5, z, rng);
  const auto set = make_set(n, iota(5));
  auto cfg = config(FusionStrategy::Mha, true, true, 5, 2);
  auto blocks = FusionBlocks<float>::create(cfg, z, rng);
  for (auto* blk : {&*blocks.intra, &*blocks.inter}) {
    auto w = blk->wo.weight.value.data();
    std::fill(w.begin(), w.end(), 0.0f);
  }
  const auto out = augment(aligned(x), &set, &set, cfg, blocks).values;
  for (std::size_t i = 0; i < z; ++i) EXPECT_EQ(out[i], x(0, i));
  for (std::size_t i = z; i < 3 * z; ++i) EXPECT_EQ(out[i], 0.0f);
}

TEST(Augment, BatchFusionMatchesPerQuery) {
  Rng rng(11);
  const std::size_t z = 12, k = 3, bsz = 5;
  for (auto strategy : {FusionStrategy::Mha, FusionStrategy::Concat}) {
    auto cfg = config(strategy, true, true, k, 3);
    const auto blocks = FusionBlocks<float>::create(cfg, z, rng);
    const Matrix x = random_unit_rows(bsz, z, rng);
    std::vector<NeighborSet> intra, inter;
    for (std::size_t b = 0; b < bsz; ++b) {
      intra.push_back(make_set(random_unit_rows(k, z, rng), iota(k)));
      inter.push_back(make_set(random_unit_rows(k, z, rng), iota(k)));
    }
    auto stack = [&](const std::vector<NeighborSet>& sets) {
      NeighborBatch<float> nb;
      nb.vectors = Matrix(bsz * k, z);
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto one = neighbor_batch<float>(sets[b]);
        std::copy(one.vectors.data().begin(), one.vectors.data().end(), nb.vectors.row(b * k).begin());
        nb.similarities.insert(nb.similarities.end(), one.similarities.begin(), one.similarities.end());
      }
      return nb;
    };
    const auto ib = stack(intra), rb = stack(inter);
    const Matrix fused = fuse_batch(blocks, cfg, x, &ib, &rb);
    ASSERT_EQ(fused.cols(), cfg.output_dim(z));
    for (std::size_t b = 0; b < bsz; ++b) {
      const auto single = augment(aligned(x, b), &intra[b], &inter[b], cfg, blocks).values;
      for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(fused(b, i), single[i], 1e-6);
    }
  }
}

template <class T>
NeighborBatch<T> random_batch(std::size_t rows, std::size_t z, Rng& rng) {
  NeighborBatch<T> nb;
  nb.vectors = random_unit_rows(rows, z, rng).template cast<T>();
  for (std::size_t i = 0; i < rows; ++i) nb.similarities.push_back(rng.uniform(-1, 1));
  return nb;
}

void check_network_gradient(FusionConfig cfg, std::uint64_t seed) {
  const std::size_t z = 16, bsz = 4;
  auto net = TaskNetwork<float>::create(z, cfg, 0.0, seed);
  Rng rng(seed + 100);
  const Matrix x = random_unit_rows(bsz, z, rng);
  const auto intra = random_batch<float>(bsz * cfg.k, z, rng);
  const auto inter = random_batch<float>(bsz * cfg.k, z, rng);
  Matrix y(bsz, kNumClasses);
  for (auto& v : y.data()) v = static_cast<float>(rng.below(2));
  auto loss = [&](auto& m, bool backward) {
    using T = typename std::decay_t<decltype(m)>::scalar_type;
    NeighborBatch<T> ib{intra.vectors.template cast<T>(), intra.similarities};
    NeighborBatch<T> rb{inter.vectors.template cast<T>(), inter.similarities};
    typename std::decay_t<decltype(m)>::Cache cache;
    const auto logits = m.forward(x.cast<T>(), cfg.use_intra ? &ib : nullptr, cfg.use_inter ? &rb : nullptr, &cache);
    const auto l = bce_with_logits(logits, y.cast<T>());
    if (backward) m.backward(cache, l.grad);
    return l.loss;
  };
  const auto rep = finite_difference_check_model(net, loss, {.eps = 1e-5, .samples = 100, .seed = seed});
  EXPECT_LE(rep.max_relative_error, 1e-3) << rep.worst_parameter << " " << rep.worst_analytic << " vs "
                                          << rep.worst_numeric;
}

TEST(GradCheck, AttentionFusionWithBceHead) { check_network_gradient(config(FusionStrategy::Mha, true, true, 5), 1); }

TEST(GradCheck, AttentionFusionWithSimilarityBias) {
  auto cfg = config(FusionStrategy::Mha, true, false, 4, 2);
  cfg.similarity_bias = true;
  check_network_gradient(cfg, 2);
}

TEST(GradCheck, ConcatFusionWithBceHead) { check_network_gradient(config(FusionStrategy::Concat, false, true, 3), 3); }

TEST(GradCheck, BareAttentionBlock) {
  Rng rng(12);
  MultiHeadAttention<float> a("a", 8, 2, rng);
  const Matrix x = random_unit_rows(3, 8, rng);
  const Matrix n = random_unit_rows(12, 8, rng);
  const Matrix w = random_matrix(3, 8, rng);
  auto loss = [&](auto& m, bool backward) {
    using T = typename std::decay_t<decltype(m)>::scalar_type;
    typename std::decay_t<decltype(m)>::Cache cache;
    const auto out = m.forward(x.cast<T>(), n.cast<T>(), 4, nullptr, &cache);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += double(out.data()[i]) * w.data()[i];
    if (backward) m.backward(cache, w.cast<T>());
    return s;
  };
  const auto rep = finite_difference_check_model(a, loss, {.eps = 1e-5, .samples = 100});
  EXPECT_LE(rep.max_relative_error, 1e-3) << rep.worst_parameter;
}

RetrievalIndex small_index(std::size_t n, Rng& rng) {
  const Matrix v = random_unit_rows(n, 8, rng);
  std::vector<IndexEntry> entries(n);
  for (std::size_t i = 0; i < n; ++i) {
    entries[i].id = "e" + std::to_string(100 + i);
    entries[i].pair_id = "p" + std::to_string(100 + i);
  }
  return RetrievalIndex(IndexTarget::X, 8, entries, v);
}

TEST(RandomControl, DeterministicSubsetOrderedBySimilarity) {
  Rng rng(13);
  const auto index = small_index(50, rng);
  const Matrix q = random_unit_rows(1, 8, rng);
  const auto a = random_neighbor_control(index, q.row(0), 10, 99);
  const auto b = random_neighbor_control(index, q.row(0), 10, 99);
  const auto c = random_neighbor_control(index, q.row(0), 10, 100);
  ASSERT_EQ(a.size(), 10u);
  std::set<std::string> ids, all;
  for (const auto& e : index.entries()) all.insert(e.id);
  for (std::size_t j = 0; j < 10; ++j) {
    EXPECT_EQ(a.neighbors[j].id, b.neighbors[j].id);
    EXPECT_TRUE(all.count(a.neighbors[j].id));
    ids.insert(a.neighbors[j].id);
    if (j > 0) EXPECT_GE(a.neighbors[j - 1].similarity, a.neighbors[j].similarity);
  }
  EXPECT_EQ(ids.size(), 10u);
  std::set<std::string> other;
  for (const auto& n : c.neighbors) other.insert(n.id);
  EXPECT_NE(ids, other);
}

TEST(RandomControl, FullSizeIsAPermutationAndExclusionHolds) {
  Rng rng(14);
  const auto index = small_index(20, rng);
  const Matrix q = random_unit_rows(1, 8, rng);
  const auto all = random_neighbor_control(index, q.row(0), 20, 5);
  std::set<std::string> ids;
  for (const auto& n : all.neighbors) ids.insert(n.id);
  EXPECT_EQ(ids.size(), 20u);
  const auto ex = random_neighbor_control(index, q.row(0), 19, 5, "p105");
  for (const auto& n : ex.neighbors) EXPECT_NE(n.pair_id, "p105");
  EXPECT_THROW(random_neighbor_control(index, q.row(0), 20, 5, "p105"), ParameterError);
  EXPECT_THROW(random_neighbor_control(index, q.row(0), 21, 5), ParameterError);
  EXPECT_THROW(random_neighbor_control(index, q.row(0), 0, 5), ParameterError);
}

TEST(RandomControl, RoughlyUniform) {
  Rng rng(15);
  const auto index = small_index(10, rng);
  const Matrix q = random_unit_rows(1, 8, rng);
  std::map<std::string, int> counts;
  for (std::uint64_t s = 0; s < 4000; ++s)
    for (const auto& n : random_neighbor_control(index, q.row(0), 2, s).neighbors) ++counts[n.id];
  ASSERT_EQ(counts.size(), 10u);
  for (const auto& [id, c] : counts) EXPECT_NEAR(c, 800, 120) << id;
}

TEST(FusionStrategy, Names) {
  EXPECT_EQ(parse_fusion_strategy("MHA"), FusionStrategy::Mha);
  EXPECT_EQ(parse_fusion_strategy("concat"), FusionStrategy::Concat);
  EXPECT_FALSE(parse_fusion_strategy("sum"));
  EXPECT_EQ(to_string(FusionStrategy::Mha), "mha");
}

}  // namespace
}  // namespace xtra
