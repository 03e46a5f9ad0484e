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

// Stage I: per-modality projection heads, the content classifier and the two
// alignment objectives (symmetric contrastive and supervised content loss).

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xtra/checkpoint.hpp"
#include "xtra/data.hpp"
#include "xtra/errors.hpp"
#include "xtra/layers.hpp"
#include "xtra/numerics.hpp"

namespace xtra {

enum class Mode { Train, Eval };

// LayerNorm -> Linear -> ReLU -> Dropout -> Linear -> L2 normalize, all at
// width z_enc.
template <class T>
struct ProjectionHead {
  using scalar_type = T;

  struct Cache {
    typename LayerNorm<T>::Cache norm;
    BasicMatrix<T> normed;
    BasicMatrix<T> pre;
    BasicMatrix<T> mask;
    BasicMatrix<T> hidden;
    BasicMatrix<T> out;
    std::vector<double> norms;
  };

  LayerNorm<T> norm;
  Linear<T> fc1;
  Linear<T> fc2;
  double dropout_rate = 0.5;

  ProjectionHead() = default;
  ProjectionHead(const std::string& name, std::size_t dim, double dropout, Rng& rng)
      : norm(name + ".norm", dim),
        fc1(name + ".fc1", dim, dim, true, rng),
        fc2(name + ".fc2", dim, dim, true, rng),
        dropout_rate(dropout) {}

  std::size_t dim() const { return fc1.in_features(); }

  // rng == nullptr selects eval mode (no dropout).
  BasicMatrix<T> forward(const BasicMatrix<T>& x, Cache* cache = nullptr, Rng* rng = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.normed = norm.forward(x, &c.norm);
    c.pre = fc1.forward(c.normed);
    c.hidden = relu(c.pre);
    c.mask = {};
    if (rng && dropout_rate > 0.0) {
      c.mask = dropout_mask<T>(c.hidden.rows(), c.hidden.cols(), dropout_rate, *rng);
      c.hidden = hadamard(c.hidden, c.mask);
    }
    c.out = l2_normalize_rows(fc2.forward(c.hidden), &c.norms);
    return c.out;
  }

  void backward(const Cache& c, const BasicMatrix<T>& grad_out) {
    BasicMatrix<T> g = l2_normalize_rows_backward(c.out, c.norms, grad_out);
    g = fc2.backward(c.hidden, g);
    if (!c.mask.empty()) g = hadamard(g, c.mask);
    g = relu_backward(c.pre, g);
    g = fc1.backward(c.normed, g);
    norm.backward(c.norm, g, false);
  }

  ParameterList<T> parameters() {
    ParameterList<T> out = norm.parameters();
    for (auto* p : fc1.parameters()) out.push_back(p);
    for (auto* p : fc2.parameters()) out.push_back(p);
    return out;
  }

  template <class U>
  ProjectionHead<U> cast() const {
    ProjectionHead<U> h;
    h.norm = norm.template cast<U>();
    h.fc1 = fc1.template cast<U>();
    h.fc2 = fc2.template cast<U>();
    h.dropout_rate = dropout_rate;
    return h;
  }
};

struct AlignmentOptions {
  double temperature = 0.07;
  double dropout_rate = 0.5;
  // When set, CONTENT mode optimizes L_clip + weight * L_content instead of
  // L_content alone.
  std::optional<double> content_weight;
};

template <class T>
struct AlignmentModel {
  using scalar_type = T;

  std::size_t z_enc = 0;
  double temperature = 0.07;
  ProjectionHead<T> image_head;
  ProjectionHead<T> report_head;
  Linear<T> joint_map;  // concat(z_x, z_r) -> z_enc
  Mlp<T> classifier;    // z_enc -> z_enc -> 256 -> 14, sigmoid on the logits

  static AlignmentModel create(std::size_t z_enc, const AlignmentOptions& opt, std::uint64_t seed) {
    if (z_enc == 0) throw ParameterError("z_enc must be positive");
    if (!(opt.temperature > 0.0)) throw ParameterError("temperature must be positive");
    Rng rng(seed);
    AlignmentModel m;
    m.z_enc = z_enc;
    m.temperature = opt.temperature;
    m.image_head = ProjectionHead<T>("image_head", z_enc, opt.dropout_rate, rng);
    m.report_head = ProjectionHead<T>("report_head", z_enc, opt.dropout_rate, rng);
    m.joint_map = Linear<T>("joint_map", 2 * z_enc, z_enc, true, rng);
    m.classifier = Mlp<T>("classifier", {z_enc, z_enc, 256, kNumClasses}, rng);
    return m;
  }

  const ProjectionHead<T>& head(Modality m) const { return m == Modality::Image ? image_head : report_head; }
  ProjectionHead<T>& head(Modality m) { return m == Modality::Image ? image_head : report_head; }

  ParameterList<T> parameters() {
    ParameterList<T> out = image_head.parameters();
    for (auto* p : report_head.parameters()) out.push_back(p);
    for (auto* p : joint_map.parameters()) out.push_back(p);
    for (auto* p : classifier.parameters()) out.push_back(p);
    return out;
  }

  template <class U>
  AlignmentModel<U> cast() const {
    AlignmentModel<U> m;
    m.z_enc = z_enc;
    m.temperature = temperature;
    m.image_head = image_head.template cast<U>();
    m.report_head = report_head.template cast<U>();
    m.joint_map = joint_map.template cast<U>();
    m.classifier = classifier.template cast<U>();
    return m;
  }
};

struct AlignedVector {
  std::vector<float> values;
  Modality source = Modality::Image;
};

// Eval-mode projection of a batch of raw encoder vectors.
template <class T>
BasicMatrix<T> project_batch(const AlignmentModel<T>& model, const BasicMatrix<T>& x, Modality m) {
  if (x.cols() != model.z_enc) {
    throw DimensionError("project: input width " + std::to_string(x.cols()) + " ≠ z_enc " + std::to_string(model.z_enc));
  }
  return model.head(m).forward(x);
}

// Projects one record with the head of its modality. Train mode draws a
// dropout mask from `rng`.
inline AlignedVector project(const AlignmentModel<float>& model, const EmbeddingRecord& record, Mode mode = Mode::Eval,
                             Rng* rng = nullptr) {
  if (record.vector.size() != model.z_enc) {
    throw DimensionError("project: record '" + record.id + "' has dimension " + std::to_string(record.vector.size()) +
                         ", model expects " + std::to_string(model.z_enc));
  }
  if (mode == Mode::Train && rng == nullptr) throw ParameterError("project: train mode needs an Rng");
  const Matrix x = Matrix::row_vector(record.vector);
  const Matrix y = model.head(record.modality).forward(x, nullptr, mode == Mode::Train ? rng : nullptr);
  return {std::vector<float>(y.data().begin(), y.data().end()), record.modality};
}

template <class T>
struct ContrastiveResult {
  double loss = 0.0;
  BasicMatrix<T> grad_image;
  BasicMatrix<T> grad_report;
};

// Symmetric InfoNCE over cosine similarities of unit rows: the mean over both
// directions (image->report rows, report->image columns) of
// -log softmax(sim / tau) at the matching index.
template <class T>
ContrastiveResult<T> clip_contrastive_loss(const BasicMatrix<T>& image, const BasicMatrix<T>& report, double temperature) {
  require_same_shape(image, report, "clip_contrastive_loss");
  const std::size_t n = image.rows();
  if (n == 0) throw DimensionError("clip_contrastive_loss: empty batch");
  if (!(temperature > 0.0)) throw ParameterError("clip_contrastive_loss: temperature must be positive");
  std::vector<double> logits(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) logits[i * n + j] = dot(image.row(i), report.row(j)) / temperature;

  std::vector<double> grad(n * n, 0.0);
  std::vector<double> buf(n);
  double total = 0.0;
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (int direction = 0; direction < 2; ++direction) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) buf[j] = direction == 0 ? logits[i * n + j] : logits[j * n + i];
      const double lse = log_sum_exp(buf);
      total += lse - buf[i];
      for (std::size_t j = 0; j < n; ++j) {
        const double g = (std::exp(buf[j] - lse) - (i == j ? 1.0 : 0.0)) * scale;
        if (direction == 0) grad[i * n + j] += g;
        else grad[j * n + i] += g;
      }
    }
  }
  ContrastiveResult<T> r;
  r.loss = total * scale;
  BasicMatrix<T> g(n, n);
  for (std::size_t i = 0; i < n * n; ++i) g.data()[i] = static_cast<T>(grad[i] / temperature);
  r.grad_image = matmul(g, report);
  r.grad_report = matmul_tn(g, image);
  return r;
}

template <class T>
struct ContentResult {
  double loss = 0.0;
  BasicMatrix<T> grad_image;
  BasicMatrix<T> grad_report;
};

// Mean multi-label BCE of the content classifier over the three members
// {z_x, z_r, joint_map(z_x | z_r)}. With backward = true the classifier and
// joint map accumulate gradients and the result carries dL/dz_x, dL/dz_r.
// Every backward quantity is multiplied by `scale`.
template <class T>
ContentResult<T> content_loss(AlignmentModel<T>& model, const BasicMatrix<T>& zx, const BasicMatrix<T>& zr,
                              const BasicMatrix<T>& targets, bool backward, double scale = 1.0) {
  require_same_shape(zx, zr, "content_loss");
  if (zx.rows() == 0) throw DimensionError("content_loss: empty batch");
  if (targets.rows() != zx.rows() || targets.cols() != kNumClasses) {
    throw DimensionError("content_loss: targets " + targets.shape() + " do not match batch " + zx.shape());
  }
  const BasicMatrix<T> joint_in = hconcat(zx, zr);
  const BasicMatrix<T> joint = model.joint_map.forward(joint_in);

  ContentResult<T> r;
  typename Mlp<T>::Cache cache;
  std::array<const BasicMatrix<T>*, 3> members{&zx, &zr, &joint};
  std::array<BasicMatrix<T>, 3> grads;
  for (std::size_t m = 0; m < 3; ++m) {
    const BasicMatrix<T> logits = model.classifier.forward(*members[m], backward ? &cache : nullptr);
    auto bce = bce_with_logits(logits, targets);
    r.loss += bce.loss / 3.0;
    if (backward) {
      for (auto& g : bce.grad.data()) g = static_cast<T>(static_cast<double>(g) * scale / 3.0);
      grads[m] = model.classifier.backward(cache, bce.grad, true);
    }
  }
  if (backward) {
    const BasicMatrix<T> g_joint_in = model.joint_map.backward(joint_in, grads[2], true);
    r.grad_image = grads[0];
    r.grad_report = grads[1];
    add_inplace(r.grad_image, slice_cols(g_joint_in, 0, zx.cols()));
    add_inplace(r.grad_report, slice_cols(g_joint_in, zx.cols(), zx.cols()));
  }
  return r;
}

enum class LossMode { ClipOnly, Content };

inline std::string to_string(LossMode m) { return m == LossMode::ClipOnly ? "clip" : "content"; }
inline std::optional<LossMode> parse_loss_mode(std::string_view s) {
  if (s == "clip" || s == "clip_only" || s == "CLIP_ONLY") return LossMode::ClipOnly;
  if (s == "content" || s == "CONTENT") return LossMode::Content;
  return std::nullopt;
}

// Full alignment objective on one batch of raw vectors. rng == nullptr runs
// the heads in eval mode. With backward = true gradients are accumulated.
template <class T>
double alignment_loss(AlignmentModel<T>& model, const BasicMatrix<T>& images, const BasicMatrix<T>& reports,
                      const BasicMatrix<T>& targets, LossMode mode, const std::optional<double>& content_weight,
                      bool backward, Rng* rng = nullptr) {
  typename ProjectionHead<T>::Cache ci, cr;
  const BasicMatrix<T> zx = model.image_head.forward(images, &ci, rng);
  const BasicMatrix<T> zr = model.report_head.forward(reports, &cr, rng);
  double loss = 0.0;
  BasicMatrix<T> gx(zx.rows(), zx.cols()), gr(zr.rows(), zr.cols());
  const bool use_clip = mode == LossMode::ClipOnly || content_weight.has_value();
  if (use_clip) {
    auto c = clip_contrastive_loss(zx, zr, model.temperature);
    loss += c.loss;
    if (backward) {
      add_inplace(gx, c.grad_image);
      add_inplace(gr, c.grad_report);
    }
  }
  if (mode == LossMode::Content) {
    const double w = content_weight.value_or(1.0);
    auto c = content_loss(model, zx, zr, targets, backward, w);
    loss += w * c.loss;
    if (backward) {
      add_inplace(gx, c.grad_image);
      add_inplace(gr, c.grad_report);
    }
  }
  if (backward) {
    model.image_head.backward(ci, gx);
    model.report_head.backward(cr, gr);
  }
  return loss;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct AlignmentRun {
  AlignmentModel<float> model;
  LossMode mode = LossMode::Content;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;

  nlohmann::ordered_json log_json() const {
    nlohmann::ordered_json j;
    j["mode"] = to_string(mode);
    j["best_epoch"] = best_epoch;
    j["epochs_run"] = epochs_run;
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : log) {
      j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
    }
    return j;
  }
};

// Mean loss over `split` in eval mode, batched in file order.
inline double evaluate_alignment_loss(AlignmentModel<float>& model, const Dataset& ds, Split split,
                                      std::size_t batch_size, LossMode mode, const std::optional<double>& weight) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw ValidationError("dataset '" + ds.name + "' has an empty " + to_string(split) + " split");
  double total = 0.0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    std::vector<std::size_t> rows(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                  idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
    const double l = alignment_loss(model, stack_vectors(ds, rows, Modality::Image), stack_vectors(ds, rows, Modality::Report),
                                    stack_labels(ds, rows), mode, weight, false);
    total += l * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(idx.size());
}

// Trains (or, given `initial`, continues training) the alignment model and
// returns the snapshot with the best VAL loss.
inline AlignmentRun train_alignment(const Dataset& ds, const TrainConfig& cfg, LossMode mode,
                                    const AlignmentOptions& opt = {},
                                    const std::optional<AlignmentModel<float>>& initial = std::nullopt) {
  cfg.validate();
  if (ds.count(Split::Train) == 0) throw ValidationError("train_alignment: TRAIN split is empty");
  if (ds.count(Split::Val) == 0) throw ValidationError("train_alignment: dataset '" + ds.name + "' has no VAL split");
  AlignmentOptions o = opt;
  o.dropout_rate = cfg.dropout_rate;
  AlignmentRun run;
  run.mode = mode;
  AlignmentModel<float> model = initial ? *initial : AlignmentModel<float>::create(ds.z_enc, o, cfg.seed);
  if (model.z_enc != ds.z_enc) {
    throw DimensionError("alignment model z_enc " + std::to_string(model.z_enc) + " ≠ dataset z_enc " + std::to_string(ds.z_enc));
  }
  model.image_head.dropout_rate = cfg.dropout_rate;
  model.report_head.dropout_rate = cfg.dropout_rate;

  ParameterList<float> params = model.image_head.parameters();
  for (auto* p : model.report_head.parameters()) params.push_back(p);
  if (mode == LossMode::Content) {
    for (auto* p : model.joint_map.parameters()) params.push_back(p);
    for (auto* p : model.classifier.parameters()) params.push_back(p);
  }
  Adam<float> adam(params, {.learning_rate = cfg.learning_rate});
  EarlyStopping stopper(cfg.early_stop_tolerance, false);
  Rng rng(Rng::mix(cfg.seed, 0xa11a));
  run.model = model;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double train_total = 0.0;
    std::size_t seen = 0;
    for (const auto& rows : iterate_batches(ds, Split::Train, cfg.batch_size, cfg.seed, epoch)) {
      adam.zero_grad();
      const double l = alignment_loss(model, stack_vectors(ds, rows, Modality::Image), stack_vectors(ds, rows, Modality::Report),
                                      stack_labels(ds, rows), mode, o.content_weight, true, &rng);
      adam.step();
      train_total += l * static_cast<double>(rows.size());
      seen += rows.size();
    }
    const double val = evaluate_alignment_loss(model, ds, Split::Val, cfg.batch_size, mode, o.content_weight);
    run.log.push_back({epoch, train_total / static_cast<double>(seen), val});
    run.epochs_run = epoch;
    if (stopper.observe(epoch, val)) {
      run.model = model;
      run.best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }
  return run;
}

// Aligned vectors for one modality of the given pairs (eval mode).
inline Matrix project_rows(const AlignmentModel<float>& model, const Dataset& ds, const std::vector<std::size_t>& rows,
                           Modality m) {
  if (ds.z_enc != model.z_enc) {
    throw DimensionError("dataset z_enc " + std::to_string(ds.z_enc) + " ≠ model z_enc " + std::to_string(model.z_enc));
  }
  return project_batch(model, stack_vectors(ds, rows, m), m);
}

inline Checkpoint alignment_checkpoint(AlignmentModel<float>& model, const nlohmann::json& metadata) {
  Checkpoint c;
  c.z_enc = static_cast<std::uint32_t>(model.z_enc);
  c.temperature = static_cast<float>(model.temperature);
  c.kind = "alignment";
  c.metadata = metadata;
  c.metadata["dropout_rate"] = model.image_head.dropout_rate;
  store_parameters(c, model.parameters());
  return c;
}

inline AlignmentModel<float> alignment_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "alignment") throw ArtifactError("checkpoint holds a '" + c.kind + "' model, expected an alignment model");
  AlignmentOptions o;
  o.temperature = c.temperature;
  o.dropout_rate = c.metadata.value("dropout_rate", 0.5);
  auto m = AlignmentModel<float>::create(c.z_enc, o, 0);
  restore_parameters(c, m.parameters());
  return m;
}

}  // namespace xtra
