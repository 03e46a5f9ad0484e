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

// Downstream tasks on aligned embeddings: multi-label classification and
// report retrieval, each with or without retrieval augmentation, plus the
// cross-dataset regimes and ablation grids built on top of them.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "xtra/alignment.hpp"
#include "xtra/augment.hpp"
#include "xtra/checkpoint.hpp"
#include "xtra/data.hpp"
#include "xtra/errors.hpp"
#include "xtra/index.hpp"
#include "xtra/layers.hpp"
#include "xtra/metrics.hpp"
#include "xtra/provenance.hpp"

namespace xtra {

inline constexpr std::size_t kHeadHidden = 256;

// Which neighbours feed the fusion: x uses image neighbours only, r report
// neighbours only, xr both, random both branches with uniformly drawn
// entries, none disables augmentation.
enum class Composition { X, R, XR, Random, None };

inline std::string to_string(Composition c) {
  switch (c) {
    case Composition::X: return "x";
    case Composition::R: return "r";
    case Composition::XR: return "xr";
    case Composition::Random: return "random";
    case Composition::None: return "none";
  }
  return "?";
}

inline std::optional<Composition> parse_composition(std::string_view s) {
  if (s == "x") return Composition::X;
  if (s == "r") return Composition::R;
  if (s == "xr") return Composition::XR;
  if (s == "random") return Composition::Random;
  if (s == "none") return Composition::None;
  return std::nullopt;
}

inline FusionConfig fusion_for(Composition c, FusionConfig base) {
  base.use_intra = c == Composition::X || c == Composition::XR || c == Composition::Random;
  base.use_inter = c == Composition::R || c == Composition::XR || c == Composition::Random;
  return base;
}

inline nlohmann::ordered_json fusion_to_json(const FusionConfig& f) {
  return {{"strategy", to_string(f.strategy)}, {"use_intra", f.use_intra}, {"use_inter", f.use_inter},
          {"k", f.k},
          {"n_heads", f.n_heads},
          {"similarity_bias", f.similarity_bias}};
}

inline FusionConfig fusion_from_json(const nlohmann::json& j) {
  FusionConfig f;
  const auto s = parse_fusion_strategy(j.at("strategy").get<std::string>());
  if (!s) throw ValidationError("unknown fusion strategy '" + j.at("strategy").get<std::string>() + "'");
  f.strategy = *s;
  f.use_intra = j.at("use_intra").get<bool>();
  f.use_inter = j.at("use_inter").get<bool>();
  f.k = j.at("k").get<std::size_t>();
  f.n_heads = j.at("n_heads").get<std::size_t>();
  f.similarity_bias = j.at("similarity_bias").get<bool>();
  return f;
}

// Fusion blocks followed by the classifier head {d_in, 256, 14}; forward
// returns logits.
template <class T>
struct TaskNetwork {
  using scalar_type = T;

  struct Cache {
    FusionCache<T> fusion;
    typename Mlp<T>::Cache head;
  };

  std::size_t z_enc = 0;
  FusionConfig fusion;
  FusionBlocks<T> blocks;
  Mlp<T> head;

  static TaskNetwork create(std::size_t z_enc, const FusionConfig& fusion, double dropout, std::uint64_t seed) {
    fusion.validate(z_enc);
    TaskNetwork n;
    n.z_enc = z_enc;
    n.fusion = fusion;
    Rng rng(Rng::mix(seed, 0x7a5c));
    n.blocks = FusionBlocks<T>::create(fusion, z_enc, rng);
    n.head = Mlp<T>("head", {fusion.output_dim(z_enc), kHeadHidden, kNumClasses}, rng, dropout);
    return n;
  }

  std::size_t input_dim() const { return fusion.output_dim(z_enc); }

  BasicMatrix<T> fused(const BasicMatrix<T>& x, const NeighborBatch<T>* intra, const NeighborBatch<T>* inter,
                       Cache* cache = nullptr) const {
    BasicMatrix<T> f = fuse_batch(blocks, fusion, x, intra, inter, cache ? &cache->fusion : nullptr);
    if (f.cols() != head.in_features()) {
      throw DimensionError("head expects " + std::to_string(head.in_features()) + " inputs, fusion produced " +
                           std::to_string(f.cols()));
    }
    return f;
  }

  BasicMatrix<T> forward(const BasicMatrix<T>& x, const NeighborBatch<T>* intra, const NeighborBatch<T>* inter,
                         Cache* cache = nullptr, Rng* rng = nullptr) const {
    return head.forward(fused(x, intra, inter, cache), cache ? &cache->head : nullptr, rng);
  }

  void backward(const Cache& cache, const BasicMatrix<T>& grad_logits) {
    const bool attend = fusion.enabled() && fusion.strategy == FusionStrategy::Mha;
    BasicMatrix<T> g = head.backward(cache.head, grad_logits, attend);
    if (attend) fuse_batch_backward(blocks, fusion, cache.fusion, g);
  }

  ParameterList<T> parameters() {
    ParameterList<T> out = blocks.parameters();
    for (auto* p : head.parameters()) out.push_back(p);
    return out;
  }

  template <class U>
  TaskNetwork<U> cast() const {
    TaskNetwork<U> n;
    n.z_enc = z_enc;
    n.fusion = fusion;
    n.blocks = blocks.template cast<U>();
    n.head = head.template cast<U>();
    return n;
  }
};

// Frozen retrieval side of a task: I^x feeds the intra branch, I^r the
// inter branch.
struct RetrievalSources {
  const RetrievalIndex* image_index = nullptr;
  const RetrievalIndex* report_index = nullptr;
};

struct TaskModel {
  TaskNetwork<float> network;
  bool random_control = false;
  std::uint64_t random_seed = 0;
  bool exclude_own_pair = true;  // training queries skip their own pair
  std::optional<Linear<float>> report_map;  // x^TRA -> report space query

  std::size_t z_enc() const { return network.z_enc; }
  const FusionConfig& fusion() const { return network.fusion; }

  ParameterList<float> parameters() {
    ParameterList<float> out = network.parameters();
    if (report_map)
      for (auto* p : report_map->parameters()) out.push_back(p);
    return out;
  }
};

// Aligned queries with their neighbour sets, one row per query.
struct QueryBatch {
  std::vector<std::string> ids;
  std::vector<std::string> pair_ids;
  std::vector<Labels> labels;
  Matrix queries;
  std::vector<NeighborSet> intra, inter;
  NeighborBatch<float> intra_batch, inter_batch;

  std::size_t size() const { return queries.rows(); }
};

namespace detail {

inline NeighborSet neighbors_for(const RetrievalIndex* index, const char* branch, std::span<const float> q,
                                 std::size_t k, const std::string& pair_id, const std::string& query_id,
                                 bool exclude_own, bool random_control, std::uint64_t seed) {
  if (!index) throw ValidationError(std::string(branch) + " branch enabled but no index is available");
  std::optional<std::string_view> exclude;
  if (exclude_own) exclude = pair_id;
  if (random_control) {
    return random_neighbor_control(*index, q, k, Rng::mix(seed, fnv1a(query_id + "/" + branch)), exclude);
  }
  return index->query(q, k, exclude, query_id);
}

inline NeighborBatch<float> concat_sets(const std::vector<NeighborSet>& sets, std::size_t k, std::size_t dim) {
  NeighborBatch<float> nb;
  nb.vectors = Matrix(sets.size() * k, dim);
  nb.similarities.reserve(sets.size() * k);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto& n = sets[i].neighbors[j];
      std::copy(n.vector.begin(), n.vector.end(), nb.vectors.row(i * k + j).begin());
      nb.similarities.push_back(n.similarity);
    }
  }
  return nb;
}

inline NeighborBatch<float> select_blocks(const NeighborBatch<float>& nb, const std::vector<std::size_t>& pos,
                                          std::size_t k) {
  NeighborBatch<float> out;
  if (nb.vectors.empty()) return out;
  out.vectors = Matrix(pos.size() * k, nb.vectors.cols());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto src = nb.vectors.row(pos[i] * k + j);
      std::copy(src.begin(), src.end(), out.vectors.row(i * k + j).begin());
      out.similarities.push_back(nb.similarities[pos[i] * k + j]);
    }
  }
  return out;
}

inline Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& pos) {
  Matrix out(pos.size(), m.cols());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto src = m.row(pos[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix labels_matrix(const std::vector<Labels>& labels) {
  Matrix y(labels.size(), kNumClasses);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < kNumClasses; ++c) y(i, c) = labels[i][c];
  return y;
}

}  // namespace detail

// Projects the image records of `rows` and retrieves their neighbours for
// every enabled branch. With exclude_own, neighbours never share the query's
// pair_id (used for training queries, whose pairs live in the index).
inline QueryBatch gather_queries(const Dataset& ds, const std::vector<std::size_t>& rows,
                                 const AlignmentModel<float>& alignment, const RetrievalSources& sources,
                                 const FusionConfig& fusion, bool exclude_own, bool random_control = false,
                                 std::uint64_t random_seed = 0) {
  QueryBatch b;
  b.queries = project_rows(alignment, ds, rows, Modality::Image);
  for (std::size_t r : rows) {
    b.ids.push_back(ds.pairs[r].image.id);
    b.pair_ids.push_back(ds.pairs[r].pair_id);
    b.labels.push_back(ds.pairs[r].labels);
  }
  if (!fusion.enabled()) return b;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto q = b.queries.row(i);
    if (fusion.use_intra) {
      b.intra.push_back(detail::neighbors_for(sources.image_index, "intra", q, fusion.k, b.pair_ids[i], b.ids[i],
                                              exclude_own, random_control, random_seed));
    }
    if (fusion.use_inter) {
      b.inter.push_back(detail::neighbors_for(sources.report_index, "inter", q, fusion.k, b.pair_ids[i], b.ids[i],
                                              exclude_own, random_control, random_seed));
    }
  }
  if (fusion.use_intra) b.intra_batch = detail::concat_sets(b.intra, fusion.k, ds.z_enc);
  if (fusion.use_inter) b.inter_batch = detail::concat_sets(b.inter, fusion.k, ds.z_enc);
  return b;
}

inline QueryBatch gather_queries(const Dataset& ds, Split split, const AlignmentModel<float>& alignment,
                                 const RetrievalSources& sources, const TaskModel& model) {
  return gather_queries(ds, ds.indices(split), alignment, sources, model.fusion(),
                        split == Split::Train && model.exclude_own_pair, model.random_control, model.random_seed);
}

// Eval-mode fused representation x^TRA of a whole batch.
inline Matrix fused_batch(const TaskModel& model, const QueryBatch& b) {
  return model.network.fused(b.queries, model.fusion().use_intra ? &b.intra_batch : nullptr,
                             model.fusion().use_inter ? &b.inter_batch : nullptr);
}

inline ScoredPredictions predict_batch(const TaskModel& model, const QueryBatch& b) {
  const Matrix logits = model.network.forward(b.queries, model.fusion().use_intra ? &b.intra_batch : nullptr,
                                              model.fusion().use_inter ? &b.inter_batch : nullptr);
  ScoredPredictions p;
  p.targets = b.labels;
  p.scores.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t c = 0; c < kNumClasses; ++c) p.scores[i][c] = sigmoid(static_cast<double>(logits(i, c)));
  return p;
}

struct TaskEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
};

struct TaskTraining {
  TaskModel model;
  std::vector<TaskEpoch> log;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;

  nlohmann::ordered_json log_json() const {
    nlohmann::ordered_json j;
    j["best_epoch"] = best_epoch;
    j["epochs_run"] = epochs_run;
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : log) j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_auc", e.val_auc}});
    return j;
  }
};

struct ClassifierOptions {
  FusionConfig fusion;
  bool random_control = false;
  bool exclude_own_pair = true;  // false reproduces the no-exclusion variant
};

// Trains fusion blocks and head with BCE on TRAIN; keeps the snapshot with
// the best VAL macro AUC. Alignment and indices are read-only.
inline TaskTraining train_classifier(const Dataset& ds, const AlignmentModel<float>& alignment,
                                     const RetrievalSources& sources, const ClassifierOptions& opt,
                                     const TrainConfig& cfg) {
  cfg.validate();
  if (ds.count(Split::Train) == 0) throw ValidationError("train_classifier: TRAIN split is empty");
  if (ds.count(Split::Val) == 0) throw ValidationError("train_classifier: dataset '" + ds.name + "' has no VAL split");
  TaskTraining run;
  TaskModel model;
  model.network = TaskNetwork<float>::create(ds.z_enc, opt.fusion, cfg.dropout_rate, cfg.seed);
  model.random_control = opt.random_control;
  model.random_seed = cfg.seed;
  model.exclude_own_pair = opt.exclude_own_pair;
  const FusionConfig& f = model.fusion();

  const auto train_rows = ds.indices(Split::Train);
  const QueryBatch train = gather_queries(ds, Split::Train, alignment, sources, model);
  const QueryBatch val = gather_queries(ds, Split::Val, alignment, sources, model);
  const Matrix train_y = detail::labels_matrix(train.labels);
  std::unordered_map<std::size_t, std::size_t> position;
  for (std::size_t i = 0; i < train_rows.size(); ++i) position[train_rows[i]] = i;

  auto params = model.network.parameters();
  Adam<float> adam(params, {.learning_rate = cfg.learning_rate});
  EarlyStopping stopper(cfg.early_stop_tolerance, true);
  Rng rng(Rng::mix(cfg.seed, 0xc1a5));
  run.model = model;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& rows : iterate_batches(ds, Split::Train, cfg.batch_size, cfg.seed, epoch)) {
      std::vector<std::size_t> pos;
      pos.reserve(rows.size());
      for (std::size_t r : rows) pos.push_back(position.at(r));
      const Matrix x = detail::select_rows(train.queries, pos);
      const auto intra = detail::select_blocks(train.intra_batch, pos, f.k);
      const auto inter = detail::select_blocks(train.inter_batch, pos, f.k);
      adam.zero_grad();
      TaskNetwork<float>::Cache cache;
      const Matrix logits = model.network.forward(x, f.use_intra ? &intra : nullptr, f.use_inter ? &inter : nullptr,
                                                  &cache, &rng);
      const auto loss = bce_with_logits(logits, detail::select_rows(train_y, pos));
      model.network.backward(cache, loss.grad);
      adam.step();
      total += loss.loss * static_cast<double>(rows.size());
      seen += rows.size();
    }
    const double auc = auc_table(predict_batch(model, val), ds.class_names).average;
    run.log.push_back({epoch, total / static_cast<double>(seen), auc});
    run.epochs_run = epoch;
    if (stopper.observe(epoch, auc)) {
      run.model = model;
      run.best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }
  return run;
}

// Eval-mode probabilities for one image record, retrieval included.
inline std::array<double, kNumClasses> classify(const TaskModel& model, const EmbeddingRecord& image,
                                                const AlignmentModel<float>& alignment,
                                                const RetrievalSources& sources) {
  if (image.modality != Modality::Image) throw ValidationError("classify: record '" + image.id + "' is not an image");
  const FusionConfig& f = model.fusion();
  if (f.enabled() && ((f.use_intra && !sources.image_index) || (f.use_inter && !sources.report_index))) {
    throw ArtifactError("classify: fusion is enabled but a retrieval index is unavailable");
  }
  const AlignedVector q = project(alignment, image);
  QueryBatch b;
  b.ids = {image.id};
  b.pair_ids = {image.pair_id};
  b.labels = {image.labels};
  b.queries = Matrix::row_vector(q.values);
  if (f.use_intra) {
    b.intra.push_back(detail::neighbors_for(sources.image_index, "intra", q.values, f.k, image.pair_id, image.id,
                                            false, model.random_control, model.random_seed));
    b.intra_batch = detail::concat_sets(b.intra, f.k, q.values.size());
  }
  if (f.use_inter) {
    b.inter.push_back(detail::neighbors_for(sources.report_index, "inter", q.values, f.k, image.pair_id, image.id,
                                            false, model.random_control, model.random_seed));
    b.inter_batch = detail::concat_sets(b.inter, f.k, q.values.size());
  }
  return predict_batch(model, b).scores.front();
}

// ---------------------------------------------------------------------------
// Report retrieval

struct ReportMapTraining {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // 0: the identity-initialised map was never beaten
};

inline Matrix apply_report_map(const Linear<float>& map, const Matrix& fused) {
  return l2_normalize_rows(map.forward(fused));
}

// Learns the linear map from x^TRA back to report space with the symmetric
// contrastive loss against each pair's aligned report. The map starts as
// [I, 0, ...], i.e. the plain aligned image query; fusion stays frozen.
inline ReportMapTraining train_report_map(TaskModel& model, const Dataset& ds, const AlignmentModel<float>& alignment,
                                          const RetrievalSources& sources, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.count(Split::Val) == 0) throw ValidationError("train_report_map: dataset '" + ds.name + "' has no VAL split");
  const std::size_t z = model.z_enc();
  const std::size_t d = model.network.input_dim();
  Linear<float> map = Linear<float>::zeros("report_map", d, z, false);
  for (std::size_t i = 0; i < z; ++i) map.weight.value(i, i) = 1.0f;

  const auto train_rows = ds.indices(Split::Train);
  const auto val_rows = ds.indices(Split::Val);
  const Matrix train_x = fused_batch(model, gather_queries(ds, Split::Train, alignment, sources, model));
  const Matrix val_x = fused_batch(model, gather_queries(ds, Split::Val, alignment, sources, model));
  const Matrix train_r = project_rows(alignment, ds, train_rows, Modality::Report);
  const Matrix val_r = project_rows(alignment, ds, val_rows, Modality::Report);
  std::unordered_map<std::size_t, std::size_t> position;
  for (std::size_t i = 0; i < train_rows.size(); ++i) position[train_rows[i]] = i;

  auto val_loss = [&] {
    double total = 0.0;
    for (std::size_t b = 0; b < val_x.rows(); b += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, val_x.rows() - b);
      total += clip_contrastive_loss(apply_report_map(map, val_x.slice_rows(b, n)), val_r.slice_rows(b, n),
                                     alignment.temperature).loss *
               static_cast<double>(n);
    }
    return total / static_cast<double>(val_x.rows());
  };

  ReportMapTraining run;
  Adam<float> adam(map.parameters(), {.learning_rate = cfg.learning_rate});
  EarlyStopping stopper(cfg.early_stop_tolerance, false);
  stopper.observe(0, val_loss());
  Linear<float> best = map;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& rows : iterate_batches(ds, Split::Train, cfg.batch_size, Rng::mix(cfg.seed, 0x4e9), epoch)) {
      std::vector<std::size_t> pos;
      for (std::size_t r : rows) pos.push_back(position.at(r));
      const Matrix x = detail::select_rows(train_x, pos);
      adam.zero_grad();
      std::vector<double> norms;
      const Matrix q = l2_normalize_rows(map.forward(x), &norms);
      const auto c = clip_contrastive_loss(q, detail::select_rows(train_r, pos), alignment.temperature);
      map.backward(x, l2_normalize_rows_backward(q, norms, c.grad_image), false);
      adam.step();
      total += c.loss * static_cast<double>(rows.size());
      seen += rows.size();
    }
    const double v = val_loss();
    run.log.push_back({epoch, total / static_cast<double>(seen), v});
    if (stopper.observe(epoch, v)) {
      best = map;
      run.best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }
  model.report_map = best;
  return run;
}

struct ReportRetrieval {
  std::string report_id;
  std::optional<std::string> text;
  Labels labels{};
  NeighborSet neighbors;
};

namespace detail {

inline void require_report_index(const RetrievalIndex& index) {
  if (index.target() != IndexTarget::R) {
    throw ParameterError("report retrieval needs a report index (target r), got target " + to_string(index.target()));
  }
  if (index.empty()) throw ValidationError("report retrieval: the report index is empty");
}

inline ReportRetrieval top_report(const RetrievalIndex& index, std::span<const float> q, std::size_t k,
                                  const std::string& query_id) {
  ReportRetrieval out;
  out.neighbors = index.query(q, k, std::nullopt, query_id);
  const auto& top = out.neighbors.neighbors.front();
  out.report_id = top.id;
  out.text = top.text;
  out.labels = top.labels;
  return out;
}

}  // namespace detail

// Baseline (task == nullptr): nearest report to the aligned image. Augmented:
// the query is the mapped x^TRA of the image, which needs the task model's
// report map and the indices its fusion uses.
inline ReportRetrieval retrieve_report(const EmbeddingRecord& image, const AlignmentModel<float>& alignment,
                                       const RetrievalIndex& report_index, std::size_t k = 1,
                                       const TaskModel* task = nullptr, const RetrievalSources* sources = nullptr) {
  detail::require_report_index(report_index);
  if (!task) return detail::top_report(report_index, project(alignment, image).values, k, image.id);
  if (!task->report_map) throw ValidationError("retrieve_report: the task model has no trained report map");
  if (!sources) throw ValidationError("retrieve_report: augmented retrieval needs the fusion indices");
  Dataset one;
  one.z_enc = alignment.z_enc;
  PairedSample p;
  p.pair_id = image.pair_id;
  p.labels = image.labels;
  p.image = image;
  one.pairs.push_back(p);
  const QueryBatch b = gather_queries(one, {0}, alignment, *sources, task->fusion(), false, task->random_control,
                                      task->random_seed);
  const Matrix q = apply_report_map(*task->report_map, fused_batch(*task, b));
  return detail::top_report(report_index, q.row(0), k, image.id);
}

struct ReportEvaluation {
  TextScores text;
  double exact_match = 0.0;  // share of queries whose top report carries the same label set
  std::vector<std::string> query_ids;
  std::vector<std::string> retrieved_ids;
};

// Top-1 report retrieval for every record of `split`.
inline ReportEvaluation evaluate_report_retrieval(const Dataset& ds, Split split, const AlignmentModel<float>& alignment,
                                                  const RetrievalIndex& report_index, const TaskModel* task = nullptr,
                                                  const RetrievalSources* sources = nullptr) {
  detail::require_report_index(report_index);
  const auto rows = ds.indices(split);
  if (rows.empty()) throw ValidationError("dataset '" + ds.name + "' has an empty " + to_string(split) + " split");
  Matrix queries;
  if (!task) {
    queries = project_rows(alignment, ds, rows, Modality::Image);
  } else {
    if (!task->report_map) throw ValidationError("report evaluation: the task model has no trained report map");
    if (!sources) throw ValidationError("report evaluation: augmented retrieval needs the fusion indices");
    const QueryBatch b = gather_queries(ds, rows, alignment, *sources, task->fusion(), false, task->random_control,
                                        task->random_seed);
    queries = apply_report_map(*task->report_map, fused_batch(*task, b));
  }
  ReportEvaluation ev;
  std::vector<std::string> candidates, references;
  std::size_t matches = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& pair = ds.pairs[rows[i]];
    const auto hits = report_index.search(queries.row(i), 1);
    const auto& e = report_index.entry(hits.front().entry);
    ev.query_ids.push_back(pair.image.id);
    ev.retrieved_ids.push_back(e.id);
    candidates.push_back(e.text.value_or(""));
    references.push_back(pair.report.text.value_or(""));
    if (e.labels == pair.labels) ++matches;
  }
  ev.text = score_texts(candidates, references);
  ev.exact_match = static_cast<double>(matches) / static_cast<double>(rows.size());
  return ev;
}

// ---------------------------------------------------------------------------
// Results

struct SamplePrediction {
  std::string id;
  std::array<double, kNumClasses> probabilities{};
  Labels targets{};
};

struct ExperimentResult {
  std::string name;
  std::vector<ClassTable> tables;
  std::vector<SamplePrediction> predictions;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  Provenance provenance;

  const ClassTable& table(const std::string& metric) const {
    for (const auto& t : tables)
      if (t.metric == metric) return t;
    throw ValidationError("result '" + name + "' has no " + metric + " table");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["provenance"] = provenance.to_json();
    j["name"] = name;
    j["metadata"] = metadata;
    j["tables"] = nlohmann::ordered_json::array();
    for (const auto& t : tables) {
      nlohmann::ordered_json tj;
      tj["metric"] = t.metric;
      tj["classes"] = nlohmann::ordered_json::array();
      for (std::size_t c = 0; c < t.class_names.size(); ++c) {
        nlohmann::ordered_json cj;
        cj["class"] = t.class_names[c];
        cj["value"] = t.per_class[c] ? nlohmann::ordered_json(*t.per_class[c]) : nlohmann::ordered_json(nullptr);
        cj["positives"] = t.positives[c];
        tj["classes"].push_back(cj);
      }
      tj["wAvg"] = t.weighted_average;
      tj["Avg"] = t.average;
      j["tables"].push_back(tj);
    }
    j["predictions"] = nlohmann::ordered_json::array();
    for (const auto& p : predictions) {
      j["predictions"].push_back({{"id", p.id}, {"probabilities", p.probabilities}, {"labels", labels_string(p.targets)}});
    }
    return j;
  }

  // One row per class, then wAvg and Avg rows; one column per table.
  std::string to_csv() const {
    if (tables.empty()) throw ValidationError("result '" + name + "' has no tables");
    std::ostringstream out;
    out << provenance.csv_comment() << "\n";
    out << "class";
    for (const auto& t : tables) out << "," << t.metric;
    out << ",positives\n";
    char buf[32];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.6f", v);
      return std::string(buf);
    };
    const auto& first = tables.front();
    for (std::size_t c = 0; c < first.class_names.size(); ++c) {
      out << first.class_names[c];
      for (const auto& t : tables) out << "," << (t.per_class[c] ? num(*t.per_class[c]) : "NA");
      out << "," << first.positives[c] << "\n";
    }
    out << "wAvg";
    for (const auto& t : tables) out << "," << num(t.weighted_average);
    out << ",\nAvg";
    for (const auto& t : tables) out << "," << num(t.average);
    out << ",\n";
    return out.str();
  }
};

inline ExperimentResult classification_result(std::string name, const ScoredPredictions& p, const QueryBatch& b,
                                              const std::vector<std::string>& class_names) {
  ExperimentResult r;
  r.name = std::move(name);
  r.tables.push_back(auc_table(p, class_names));
  for (std::size_t i = 0; i < p.scores.size(); ++i) r.predictions.push_back({b.ids[i], p.scores[i], p.targets[i]});
  return r;
}

// Classification AUC on the TEST split.
inline ExperimentResult evaluate_classifier(const TaskModel& model, const Dataset& ds,
                                            const AlignmentModel<float>& alignment, const RetrievalSources& sources,
                                            const std::string& name = "classification") {
  const QueryBatch test = gather_queries(ds, Split::Test, alignment, sources, model);
  if (test.size() == 0) throw ValidationError("dataset '" + ds.name + "' has an empty TEST split");
  ExperimentResult r = classification_result(name, predict_batch(model, test), test, ds.class_names);
  std::vector<NeighborSet> all = test.intra;
  all.insert(all.end(), test.inter.begin(), test.inter.end());
  if (!all.empty()) r.metadata["retrieval_provenance"] = provenance_fractions(all);
  return r;
}

// ---------------------------------------------------------------------------
// Experiment regimes

struct ExperimentOptions {
  TrainConfig alignment_train;
  LossMode loss_mode = LossMode::Content;
  AlignmentOptions alignment;
  TrainConfig task_train;
  FusionConfig fusion;
  Composition composition = Composition::XR;
  double index_fraction = 1.0;
  Provenance provenance;
};

struct TrainedRetrieval {
  AlignmentModel<float> alignment;
  RetrievalIndex image_index;
  RetrievalIndex report_index;
};

inline TrainedRetrieval build_retrieval(const Dataset& ds, const ExperimentOptions& opt,
                                        const std::optional<AlignmentModel<float>>& initial = std::nullopt) {
  TrainedRetrieval t{train_alignment(ds, opt.alignment_train, opt.loss_mode, opt.alignment, initial).model, {}, {}};
  IndexBuildOptions io;
  io.provenance = opt.provenance;
  t.image_index = build_index(t.alignment, ds, IndexTarget::X, io);
  t.report_index = build_index(t.alignment, ds, IndexTarget::R, io);
  return t;
}

inline nlohmann::ordered_json run_metadata(const ExperimentOptions& opt, const FusionConfig& fusion) {
  return {{"composition", to_string(opt.composition)},
          {"index_fraction", opt.index_fraction},
          {"seed", opt.task_train.seed},
          {"fusion", fusion_to_json(fusion)}};
}

// Trains and evaluates one classifier given frozen retrieval components.
inline ExperimentResult run_classification(const Dataset& ds, const AlignmentModel<float>& alignment,
                                           const RetrievalIndex& image_index, const RetrievalIndex& report_index,
                                           const ExperimentOptions& opt, const std::string& name) {
  ClassifierOptions co;
  co.fusion = fusion_for(opt.composition, opt.fusion);
  co.random_control = opt.composition == Composition::Random;
  const RetrievalSources sources{&image_index, &report_index};
  const TaskTraining run = train_classifier(ds, alignment, sources, co, opt.task_train);
  ExperimentResult r = evaluate_classifier(run.model, ds, alignment, sources, name);
  auto meta = run_metadata(opt, co.fusion);
  meta["best_epoch"] = run.best_epoch;
  for (auto& [k, v] : r.metadata.items()) meta[k] = v;
  r.metadata = meta;
  r.provenance = opt.provenance;
  return r;
}

enum class Regime { Scratch, Frozen, Finetune };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::Scratch: return "scratch";
    case Regime::Frozen: return "frozen";
    case Regime::Finetune: return "finetune";
  }
  return "?";
}

inline std::optional<Regime> parse_regime(std::string_view s) {
  if (s == "scratch") return Regime::Scratch;
  if (s == "frozen") return Regime::Frozen;
  if (s == "finetune") return Regime::Finetune;
  return std::nullopt;
}

// Retrieval components trained on a source dataset. FINETUNE re-embeds the
// source TRAIN records with the fine-tuned model, so the dataset is kept.
struct SourceArtifacts {
  const Dataset* dataset = nullptr;
  AlignmentModel<float> alignment;
  RetrievalIndex image_index;
  RetrievalIndex report_index;
};

inline ExperimentResult run_cross_dataset(const SourceArtifacts& source, const Dataset& target, Regime regime,
                                          const ExperimentOptions& opt) {
  if (regime != Regime::Scratch && source.alignment.z_enc != target.z_enc) {
    throw DimensionError("cross-dataset: source z_enc " + std::to_string(source.alignment.z_enc) +
                         " ≠ target z_enc " + std::to_string(target.z_enc));
  }
  const std::string name = "cross-dataset/" + to_string(regime);
  ExperimentResult r;
  switch (regime) {
    case Regime::Scratch: {
      const TrainedRetrieval t = build_retrieval(target, opt);
      r = run_classification(target, t.alignment, t.image_index, t.report_index, opt, name);
      break;
    }
    case Regime::Frozen:
      r = run_classification(target, source.alignment, source.image_index, source.report_index, opt, name);
      break;
    case Regime::Finetune: {
      if (!source.dataset) throw ValidationError("cross-dataset finetune needs the source dataset to re-embed its index");
      const auto tuned = train_alignment(target, opt.alignment_train, opt.loss_mode, opt.alignment, source.alignment).model;
      IndexBuildOptions io;
      io.provenance = opt.provenance;
      io.source = source.dataset->name;
      const auto image_index = extend_index(build_index(tuned, *source.dataset, IndexTarget::X, io), tuned, target);
      const auto report_index = extend_index(build_index(tuned, *source.dataset, IndexTarget::R, io), tuned, target);
      r = run_classification(target, tuned, image_index, report_index, opt, name);
      break;
    }
  }
  r.metadata["regime"] = to_string(regime);
  r.metadata["target"] = target.name;
  if (source.dataset) r.metadata["source"] = source.dataset->name;
  return r;
}

struct AblationSpec {
  std::vector<Composition> compositions{Composition::X, Composition::R, Composition::XR, Composition::Random,
                                        Composition::None};
  std::vector<double> fractions{1.0};
  std::vector<std::uint64_t> seeds{0};
};

struct AblationCell {
  Composition composition = Composition::XR;
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

inline std::vector<AblationCell> ablation_cells(const AblationSpec& spec) {
  std::vector<AblationCell> cells;
  for (auto c : spec.compositions)
    for (double f : spec.fractions)
      for (auto s : spec.seeds) cells.push_back({c, f, s});
  return cells;
}

inline ExperimentResult run_ablation_cell(const Dataset& ds, const AlignmentModel<float>& alignment,
                                          const AblationCell& cell, ExperimentOptions opt) {
  opt.composition = cell.composition;
  opt.index_fraction = cell.fraction;
  opt.task_train.seed = cell.seed;
  IndexBuildOptions io;
  io.fraction = cell.fraction;
  io.seed = cell.seed;
  io.provenance = opt.provenance;
  const auto image_index = build_index(alignment, ds, IndexTarget::X, io);
  const auto report_index = build_index(alignment, ds, IndexTarget::R, io);
  if (cell.composition != Composition::None && image_index.size() <= opt.fusion.k) {
    throw ParameterError("index fraction " + std::to_string(cell.fraction) + " leaves " +
                         std::to_string(image_index.size()) + " entries, fewer than k + 1 = " +
                         std::to_string(opt.fusion.k + 1));
  }
  return run_classification(ds, alignment, image_index, report_index, opt,
                            "ablation/" + to_string(cell.composition));
}

// One result per (composition, fraction, seed) cell, in grid order. Cells
// are independent and run on up to `jobs` threads.
inline std::vector<ExperimentResult> run_ablations(const Dataset& ds, const AlignmentModel<float>& alignment,
                                                   const AblationSpec& spec, const ExperimentOptions& opt,
                                                   std::size_t jobs = 1) {
  for (double f : spec.fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ParameterError("index fraction must be in (0, 1], got " + std::to_string(f));
  const auto cells = ablation_cells(spec);
  std::vector<std::optional<ExperimentResult>> results(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        results[i] = run_ablation_cell(ds, alignment, cells[i], opt);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<ExperimentResult> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

// Grid rows: composition, fraction, seed, wAvg and Avg AUC.
inline std::string ablation_csv(const std::vector<ExperimentResult>& results, const Provenance& provenance) {
  std::ostringstream out;
  out << provenance.csv_comment() << "\n";
  out << "composition,fraction,seed,auc_wavg,auc_avg\n";
  char buf[160];
  for (const auto& r : results) {
    const auto& t = r.table("AUC");
    std::snprintf(buf, sizeof buf, "%s,%.4f,%llu,%.6f,%.6f\n", r.metadata.at("composition").get<std::string>().c_str(),
                  r.metadata.at("index_fraction").get<double>(),
                  static_cast<unsigned long long>(r.metadata.at("seed").get<std::uint64_t>()), t.weighted_average,
                  t.average);
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Persistence

inline Checkpoint task_checkpoint(TaskModel& model, nlohmann::json metadata) {
  Checkpoint c;
  c.z_enc = static_cast<std::uint32_t>(model.z_enc());
  c.kind = "task";
  metadata["fusion"] = fusion_to_json(model.fusion());
  metadata["head_dropout"] = model.network.head.dropout_rate;
  metadata["random_control"] = model.random_control;
  metadata["random_seed"] = model.random_seed;
  metadata["exclude_own_pair"] = model.exclude_own_pair;
  metadata["report_map"] = model.report_map.has_value();
  c.metadata = std::move(metadata);
  store_parameters(c, model.parameters());
  return c;
}

inline TaskModel task_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "task") throw ArtifactError("checkpoint holds a '" + c.kind + "' model, expected a task model");
  TaskModel m;
  try {
    m.network = TaskNetwork<float>::create(c.z_enc, fusion_from_json(c.metadata.at("fusion")),
                                           c.metadata.at("head_dropout").get<double>(), 0);
    m.random_control = c.metadata.at("random_control").get<bool>();
    m.random_seed = c.metadata.at("random_seed").get<std::uint64_t>();
    m.exclude_own_pair = c.metadata.at("exclude_own_pair").get<bool>();
    if (c.metadata.at("report_map").get<bool>()) {
      m.report_map = Linear<float>::zeros("report_map", m.network.input_dim(), c.z_enc, false);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("task checkpoint metadata: ") + e.what());
  }
  restore_parameters(c, m.parameters());
  return m;
}

}  // namespace xtra
