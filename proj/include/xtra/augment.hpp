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

// Stage II: fusing a query with its retrieved neighbours, either by plain
// concatenation or by one multi-head attention block per neighbour branch.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xtra/errors.hpp"
#include "xtra/index.hpp"
#include "xtra/layers.hpp"
#include "xtra/numerics.hpp"

namespace xtra {

// Single-query attention over a neighbour set: the query attends to the k
// neighbours as keys/values. Projections carry no bias, so a zero output
// projection yields an exactly zero summary.
template <class T>
struct MultiHeadAttention {
  using scalar_type = T;

  struct Cache {
    BasicMatrix<T> query_in;      // B x z
    BasicMatrix<T> neighbors_in;  // B*k x z
    BasicMatrix<T> q, key, value; // projected
    BasicMatrix<T> concat;        // B x z, heads side by side
    std::vector<double> weights;  // B x heads x k
    std::size_t k = 0;
  };

  std::size_t n_heads = 4;
  Linear<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t dim, std::size_t heads, Rng& rng) : n_heads(heads) {
    if (heads == 0 || dim % heads != 0) {
      throw ParameterError("z_enc (" + std::to_string(dim) + ") must be divisible by n_heads (" + std::to_string(heads) + ")");
    }
    wq = Linear<T>(name + ".wq", dim, dim, false, rng);
    wk = Linear<T>(name + ".wk", dim, dim, false, rng);
    wv = Linear<T>(name + ".wv", dim, dim, false, rng);
    wo = Linear<T>(name + ".wo", dim, dim, false, rng);
  }

  std::size_t dim() const { return wq.in_features(); }
  std::size_t head_dim() const { return dim() / n_heads; }

  // query: B x z; neighbors: B*k x z, rows [b*k, (b+1)*k) belong to query b.
  // bias (optional, B*k) is added to every head's attention logits.
  BasicMatrix<T> forward(const BasicMatrix<T>& query, const BasicMatrix<T>& neighbors, std::size_t k,
                         const std::vector<double>* bias = nullptr, Cache* cache = nullptr) const {
    const std::size_t b_count = query.rows();
    if (k == 0) throw DimensionError("attention over an empty neighbour set");
    if (neighbors.rows() != b_count * k) {
      throw DimensionError("attention: " + std::to_string(neighbors.rows()) + " neighbour rows for " +
                           std::to_string(b_count) + " queries with k = " + std::to_string(k));
    }
    if (bias && bias->size() != neighbors.rows()) throw DimensionError("attention: bias length mismatch");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.k = k;
    c.q = wq.forward(query);
    c.key = wk.forward(neighbors);
    c.value = wv.forward(neighbors);
    if (cache) {
      c.query_in = query;
      c.neighbors_in = neighbors;
    }
    const std::size_t dh = head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.concat = BasicMatrix<T>(b_count, dim());
    c.weights.assign(b_count * n_heads * k, 0.0);
    std::vector<double> logits(k);
    for (std::size_t b = 0; b < b_count; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::span<const T> qh = c.q.row(b).subspan(h * dh, dh);
        for (std::size_t j = 0; j < k; ++j) {
          logits[j] = dot(std::span<const T>(qh), std::span<const T>(c.key.row(b * k + j).subspan(h * dh, dh))) * scale;
          if (bias) logits[j] += (*bias)[b * k + j];
        }
        const double lse = log_sum_exp(logits);
        double* w = c.weights.data() + (b * n_heads + h) * k;
        for (std::size_t j = 0; j < k; ++j) w[j] = std::exp(logits[j] - lse);
        for (std::size_t d = 0; d < dh; ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += w[j] * static_cast<double>(c.value(b * k + j, h * dh + d));
          c.concat(b, h * dh + d) = static_cast<T>(acc);
        }
      }
    }
    return wo.forward(c.concat);
  }

  // Accumulates parameter gradients; inputs are treated as constants.
  void backward(const Cache& c, const BasicMatrix<T>& grad_out) {
    const std::size_t b_count = c.concat.rows();
    const std::size_t k = c.k;
    const std::size_t dh = head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const BasicMatrix<T> g_concat = wo.backward(c.concat, grad_out, true);
    BasicMatrix<T> g_q(b_count, dim()), g_key(b_count * k, dim()), g_value(b_count * k, dim());
    std::vector<double> g_w(k);
    for (std::size_t b = 0; b < b_count; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const double* w = c.weights.data() + (b * n_heads + h) * k;
        const auto go = g_concat.row(b).subspan(h * dh, dh);
        double weighted = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          g_w[j] = dot(go, std::span<const T>(c.value.row(b * k + j).subspan(h * dh, dh)));
          weighted += w[j] * g_w[j];
          for (std::size_t d = 0; d < dh; ++d) {
            g_value(b * k + j, h * dh + d) = static_cast<T>(w[j] * static_cast<double>(go[d]));
          }
        }
        for (std::size_t j = 0; j < k; ++j) {
          const double g_logit = w[j] * (g_w[j] - weighted) * scale;
          for (std::size_t d = 0; d < dh; ++d) {
            const std::size_t col = h * dh + d;
            g_q(b, col) = static_cast<T>(static_cast<double>(g_q(b, col)) + g_logit * static_cast<double>(c.key(b * k + j, col)));
            g_key(b * k + j, col) = static_cast<T>(g_logit * static_cast<double>(c.q(b, col)));
          }
        }
      }
    }
    wq.backward(c.query_in, g_q, false);
    wk.backward(c.neighbors_in, g_key, false);
    wv.backward(c.neighbors_in, g_value, false);
  }

  // Attention weights of the last forward for query b, head h.
  static std::span<const double> weights_of(const Cache& c, std::size_t n_heads, std::size_t b, std::size_t h) {
    return {c.weights.data() + (b * n_heads + h) * c.k, c.k};
  }

  ParameterList<T> parameters() { return {&wq.weight, &wk.weight, &wv.weight, &wo.weight}; }

  template <class U>
  MultiHeadAttention<U> cast() const {
    MultiHeadAttention<U> m;
    m.n_heads = n_heads;
    m.wq = wq.template cast<U>();
    m.wk = wk.template cast<U>();
    m.wv = wv.template cast<U>();
    m.wo = wo.template cast<U>();
    return m;
  }
};

enum class FusionStrategy { Concat, Mha };

inline std::string to_string(FusionStrategy s) { return s == FusionStrategy::Concat ? "concat" : "mha"; }
inline std::optional<FusionStrategy> parse_fusion_strategy(std::string_view s) {
  if (s == "concat" || s == "CONCAT") return FusionStrategy::Concat;
  if (s == "mha" || s == "MHA") return FusionStrategy::Mha;
  return std::nullopt;
}

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::Mha;
  bool use_intra = true;   // x -> x neighbours from the image index
  bool use_inter = true;   // x -> r neighbours from the report index
  std::size_t k = 10;
  std::size_t n_heads = 4;
  bool similarity_bias = false;  // add retrieval similarity to attention logits

  bool enabled() const { return use_intra || use_inter; }
  std::size_t branches() const { return (use_intra ? 1 : 0) + (use_inter ? 1 : 0); }

  std::size_t output_dim(std::size_t z_enc) const {
    if (!enabled()) return z_enc;
    return strategy == FusionStrategy::Concat ? z_enc * (1 + branches() * k) : z_enc * (1 + branches());
  }

  void validate(std::size_t z_enc) const {
    if (!enabled()) return;
    if (k == 0) throw ParameterError("fusion k must be at least 1");
    if (strategy == FusionStrategy::Mha && (n_heads == 0 || z_enc % n_heads != 0)) {
      throw ParameterError("z_enc (" + std::to_string(z_enc) + ") must be divisible by n_heads (" +
                           std::to_string(n_heads) + ")");
    }
  }
};

// Separate attention blocks per branch; absent when the branch is off or the
// strategy is concatenation.
template <class T>
struct FusionBlocks {
  using scalar_type = T;

  std::optional<MultiHeadAttention<T>> intra;
  std::optional<MultiHeadAttention<T>> inter;

  static FusionBlocks create(const FusionConfig& cfg, std::size_t z_enc, Rng& rng) {
    cfg.validate(z_enc);
    FusionBlocks f;
    if (cfg.strategy != FusionStrategy::Mha) return f;
    if (cfg.use_intra) f.intra.emplace("fusion.intra", z_enc, cfg.n_heads, rng);
    if (cfg.use_inter) f.inter.emplace("fusion.inter", z_enc, cfg.n_heads, rng);
    return f;
  }

  ParameterList<T> parameters() {
    ParameterList<T> out;
    if (intra)
      for (auto* p : intra->parameters()) out.push_back(p);
    if (inter)
      for (auto* p : inter->parameters()) out.push_back(p);
    return out;
  }

  template <class U>
  FusionBlocks<U> cast() const {
    FusionBlocks<U> f;
    if (intra) f.intra = intra->template cast<U>();
    if (inter) f.inter = inter->template cast<U>();
    return f;
  }
};

// Neighbour vectors of a batch, k rows per query, plus retrieval scores.
template <class T>
struct NeighborBatch {
  BasicMatrix<T> vectors;           // B*k x z
  std::vector<double> similarities; // B*k
};

template <class T>
struct FusionCache {
  typename MultiHeadAttention<T>::Cache intra, inter;
};

// Batched x^TRA. MHA: [x | MHA_intra | MHA_inter]; CONCAT: [x | n_1 .. n_k |
// m_1 .. m_k]. Disabled branches are omitted from the layout.
template <class T>
BasicMatrix<T> fuse_batch(const FusionBlocks<T>& blocks, const FusionConfig& cfg, const BasicMatrix<T>& x,
                          const NeighborBatch<T>* intra, const NeighborBatch<T>* inter, FusionCache<T>* cache = nullptr) {
  if (!cfg.enabled()) return x;
  if (cfg.use_intra && !intra) throw ValidationError("fusion: intra branch enabled but no intra neighbours given");
  if (cfg.use_inter && !inter) throw ValidationError("fusion: inter branch enabled but no inter neighbours given");
  BasicMatrix<T> out = x;
  auto branch = [&](const NeighborBatch<T>& nb, const std::optional<MultiHeadAttention<T>>& block,
                    typename MultiHeadAttention<T>::Cache* c) {
    if (nb.vectors.cols() != x.cols()) throw DimensionError("fusion: neighbour width ≠ query width");
    if (cfg.strategy == FusionStrategy::Concat) {
      if (nb.vectors.rows() != x.rows() * cfg.k) throw DimensionError("fusion: expected k neighbours per query");
      BasicMatrix<T> flat(x.rows(), cfg.k * x.cols(), std::vector<T>(nb.vectors.data().begin(), nb.vectors.data().end()));
      out = hconcat(out, flat);
    } else {
      const std::vector<double>* bias = cfg.similarity_bias ? &nb.similarities : nullptr;
      out = hconcat(out, block->forward(x, nb.vectors, cfg.k, bias, c));
    }
  };
  if (cfg.use_intra) branch(*intra, blocks.intra, cache ? &cache->intra : nullptr);
  if (cfg.use_inter) branch(*inter, blocks.inter, cache ? &cache->inter : nullptr);
  return out;
}

// Backward of fuse_batch w.r.t. the attention parameters; grad_out has the
// fused layout.
template <class T>
void fuse_batch_backward(FusionBlocks<T>& blocks, const FusionConfig& cfg, const FusionCache<T>& cache,
                         const BasicMatrix<T>& grad_out) {
  if (!cfg.enabled() || cfg.strategy != FusionStrategy::Mha) return;
  const std::size_t z = blocks.intra ? blocks.intra->dim() : blocks.inter->dim();
  std::size_t col = z;
  if (cfg.use_intra) {
    blocks.intra->backward(cache.intra, slice_cols(grad_out, col, z));
    col += z;
  }
  if (cfg.use_inter) blocks.inter->backward(cache.inter, slice_cols(grad_out, col, z));
}

template <class T>
NeighborBatch<T> neighbor_batch(const NeighborSet& set) {
  NeighborBatch<T> nb;
  if (set.empty()) return nb;
  nb.vectors = BasicMatrix<T>(set.size(), set.neighbors.front().vector.size());
  for (std::size_t j = 0; j < set.size(); ++j) {
    const auto& v = set.neighbors[j].vector;
    for (std::size_t d = 0; d < v.size(); ++d) nb.vectors(j, d) = static_cast<T>(v[d]);
    nb.similarities.push_back(set.neighbors[j].similarity);
  }
  return nb;
}

// Eval-mode attention summary of one neighbour set.
inline std::vector<float> mha_fuse(const MultiHeadAttention<float>& block, const AlignedVector& query,
                                   const NeighborSet& neighbors, bool similarity_bias = false) {
  if (neighbors.empty()) throw ValidationError("mha_fuse: empty neighbour set");
  if (query.values.size() != block.dim()) throw DimensionError("mha_fuse: query width ≠ block width");
  const auto nb = neighbor_batch<float>(neighbors);
  const Matrix q = Matrix::row_vector(query.values);
  const Matrix out = block.forward(q, nb.vectors, neighbors.size(), similarity_bias ? &nb.similarities : nullptr);
  return {out.data().begin(), out.data().end()};
}

struct AugmentedRepresentation {
  std::vector<float> values;
  std::vector<std::string> layout;  // segment names in order, each z_enc wide
};

inline AugmentedRepresentation augment(const AlignedVector& query, const NeighborSet* intra, const NeighborSet* inter,
                                       const FusionConfig& cfg, const FusionBlocks<float>& blocks) {
  const std::size_t z = query.values.size();
  cfg.validate(z);
  AugmentedRepresentation r;
  r.values = query.values;
  r.layout.push_back("x");
  auto branch = [&](const NeighborSet* set, const std::optional<MultiHeadAttention<float>>& block, const char* name) {
    if (!set) throw ValidationError(std::string("augment: ") + name + " branch enabled but its neighbour set is missing");
    if (set->size() != cfg.k) {
      throw DimensionError(std::string("augment: ") + name + " neighbour set has " + std::to_string(set->size()) +
                           " entries, expected k = " + std::to_string(cfg.k));
    }
    if (cfg.strategy == FusionStrategy::Concat) {
      for (std::size_t j = 0; j < set->size(); ++j) {
        const auto& v = set->neighbors[j].vector;
        r.values.insert(r.values.end(), v.begin(), v.end());
        r.layout.push_back(std::string(name) + "[" + std::to_string(j) + "]");
      }
    } else {
      const auto s = mha_fuse(*block, query, *set, cfg.similarity_bias);
      r.values.insert(r.values.end(), s.begin(), s.end());
      r.layout.push_back(std::string("mha_") + name);
    }
  };
  if (cfg.use_intra) branch(intra, blocks.intra, "intra");
  if (cfg.use_inter) branch(inter, blocks.inter, "inter");
  return r;
}

// k entries drawn uniformly without replacement from `index` (the training
// set), ordered like a retrieval result by similarity to `query`. Entries of
// `exclude_pair_id` are never drawn.
inline NeighborSet random_neighbor_control(const RetrievalIndex& index, std::span<const float> query, std::size_t k,
                                           std::uint64_t seed,
                                           std::optional<std::string_view> exclude_pair_id = std::nullopt) {
  if (k == 0) throw ParameterError("k must be at least 1");
  std::vector<std::uint32_t> pool;
  pool.reserve(index.size());
  for (std::uint32_t i = 0; i < index.size(); ++i) {
    if (!exclude_pair_id || index.entry(i).pair_id != *exclude_pair_id) pool.push_back(i);
  }
  if (pool.size() < k) {
    throw ParameterError("random control: " + std::to_string(pool.size()) + " eligible entries, need k = " +
                         std::to_string(k));
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < k; ++i) hits.push_back({pool[i], dot(query, index.vector(pool[i]))});
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.entry < b.entry);
  });
  return index.materialize(hits, k);
}

}  // namespace xtra
