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

// Run configuration: a TOML document whose tables mirror the training,
// fusion, index and metric options. Unknown keys are rejected. The hash of
// the canonical form is stamped on every artifact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "toml.hpp"
#include "xtra/alignment.hpp"
#include "xtra/augment.hpp"
#include "xtra/data.hpp"
#include "xtra/errors.hpp"
#include "xtra/layers.hpp"
#include "xtra/provenance.hpp"
#include "xtra/tasks.hpp"

namespace xtra {

struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig data;
  TrainConfig alignment_train;
  LossMode loss_mode = LossMode::Content;
  AlignmentOptions alignment;
  TrainConfig task_train;
  FusionConfig fusion;
  Composition composition = Composition::XR;
  double index_fraction = 1.0;
  std::size_t retrieval_k = 10;  // depth of the class-based mAP rankings
  double rouge_beta = 1.0;
  AblationSpec ablation{{Composition::X, Composition::R, Composition::XR, Composition::Random, Composition::None},
                        {0.1, 0.5, 1.0},
                        {0, 1, 2, 3, 4}};

  // Seeds of the individual stages follow the global seed.
  void apply_seed(std::uint64_t s) {
    seed = s;
    data.seed = s;
    alignment_train.seed = s;
    task_train.seed = s;
  }

  void validate() const {
    alignment_train.validate();
    task_train.validate();
    fusion.validate(data.z_enc);
    if (!(alignment.temperature > 0.0)) throw ParameterError("alignment.temperature must be positive");
    if (!(index_fraction > 0.0 && index_fraction <= 1.0)) throw ParameterError("index.fraction must be in (0, 1]");
    if (retrieval_k == 0) throw ParameterError("metrics.retrieval_k must be at least 1");
    if (!(rouge_beta > 0.0)) throw ParameterError("metrics.rouge_beta must be positive");
  }

  nlohmann::ordered_json to_json() const {
    auto train = [](const TrainConfig& t) {
      return nlohmann::ordered_json{{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
                                    {"max_epochs", t.max_epochs},
                                    {"early_stop_tolerance", t.early_stop_tolerance},
                                    {"dropout", t.dropout_rate}};
    };
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["data"] = {{"name", data.name},
                 {"pairs", data.n_pairs},
                 {"dim", data.z_enc},
                 {"active_classes", data.n_active_classes},
                 {"noise_sigma", data.noise_sigma},
                 {"image_noise_sigma", data.image_noise_sigma ? nlohmann::ordered_json(*data.image_noise_sigma) : nullptr},
                 {"report_noise_sigma", data.report_noise_sigma ? nlohmann::ordered_json(*data.report_noise_sigma) : nullptr},
                 {"shift", data.cross_modal_shift},
                 {"val_fraction", data.val_fraction},
                 {"test_fraction", data.test_fraction}};
    j["alignment"] = train(alignment_train);
    j["alignment"]["loss"] = to_string(loss_mode);
    j["alignment"]["temperature"] = alignment.temperature;
    j["alignment"]["content_weight"] =
        alignment.content_weight ? nlohmann::ordered_json(*alignment.content_weight) : nlohmann::ordered_json(nullptr);
    j["task"] = train(task_train);
    j["task"]["composition"] = to_string(composition);
    j["fusion"] = {{"strategy", to_string(fusion.strategy)},
                   {"k", fusion.k},
                   {"n_heads", fusion.n_heads},
                   {"similarity_bias", fusion.similarity_bias}};
    j["index"] = {{"fraction", index_fraction}};
    j["metrics"] = {{"retrieval_k", retrieval_k}, {"rouge_beta", rouge_beta}};
    nlohmann::ordered_json comps = nlohmann::ordered_json::array();
    for (auto c : ablation.compositions) comps.push_back(to_string(c));
    j["ablation"] = {{"compositions", comps}, {"fractions", ablation.fractions}, {"seeds", ablation.seeds}};
    return j;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }

  Provenance provenance() const { return {std::string(kToolVersion), hex64(hash()), seed}; }

  ExperimentOptions experiment_options() const {
    ExperimentOptions o;
    o.alignment_train = alignment_train;
    o.loss_mode = loss_mode;
    o.alignment = alignment;
    o.task_train = task_train;
    o.fusion = fusion;
    o.composition = composition;
    o.index_fraction = index_fraction;
    o.provenance = provenance();
    return o;
  }
};

namespace detail {

class TomlReader {
 public:
  explicit TomlReader(const toml::table& root) : root_(root) {}

  // Fails on any key of `table` (or at top level when table is empty) that
  // is not in `allowed`.
  void only(const std::string& table, const std::set<std::string>& allowed) const {
    const toml::table* t = table.empty() ? &root_ : root_[table].as_table();
    if (!t) {
      if (root_.contains(table)) throw ValidationError("config: '" + table + "' must be a table");
      return;
    }
    for (const auto& [key, value] : *t) {
      const std::string k(key.str());
      if (!allowed.count(k)) {
        const auto& at = key.source().begin;
        throw ParseError("config line " + std::to_string(at.line) + ", column " + std::to_string(at.column) +
                             ": unknown key '" + (table.empty() ? k : table + "." + k) + "'",
                         at.line, at.column);
      }
    }
  }

  template <class T>
  void read(const std::string& table, const std::string& key, T& out) const {
    const auto node = table.empty() ? root_[key] : root_[table][key];
    if (!node) return;
    const std::string where = table.empty() ? key : table + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node.template value<bool>()) return void(out = *v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node.template value<std::string>()) return void(out = *v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = node.template value<double>()) return void(out = *v);
    } else if constexpr (std::is_integral_v<T>) {
      if (auto v = node.template value<std::int64_t>()) {
        if (*v < 0) throw ValidationError("config: '" + where + "' must be non-negative");
        return void(out = static_cast<T>(*v));
      }
    }
    throw ValidationError("config: '" + where + "' has the wrong type");
  }

  template <class T>
  void read_optional(const std::string& table, const std::string& key, std::optional<T>& out) const {
    if (!root_[table][key]) return;
    T v{};
    read(table, key, v);
    out = v;
  }

  template <class T>
  void read_list(const std::string& table, const std::string& key, std::vector<T>& out) const {
    const auto node = root_[table][key];
    if (!node) return;
    const auto* arr = node.as_array();
    if (!arr) throw ValidationError("config: '" + table + "." + key + "' must be an array");
    out.clear();
    for (const auto& item : *arr) {
      if constexpr (std::is_same_v<T, std::string>) {
        auto v = item.value<std::string>();
        if (!v) throw ValidationError("config: '" + table + "." + key + "' must hold strings");
        out.push_back(*v);
      } else if constexpr (std::is_floating_point_v<T>) {
        auto v = item.value<double>();
        if (!v) throw ValidationError("config: '" + table + "." + key + "' must hold numbers");
        out.push_back(*v);
      } else {
        auto v = item.value<std::int64_t>();
        if (!v || *v < 0) throw ValidationError("config: '" + table + "." + key + "' must hold non-negative integers");
        out.push_back(static_cast<T>(*v));
      }
    }
  }

 private:
  const toml::table& root_;
};

inline void read_train(const TomlReader& r, const std::string& table, TrainConfig& t) {
  r.read(table, "learning_rate", t.learning_rate);
  r.read(table, "batch_size", t.batch_size);
  r.read(table, "max_epochs", t.max_epochs);
  r.read(table, "early_stop_tolerance", t.early_stop_tolerance);
  r.read(table, "dropout", t.dropout_rate);
}

}  // namespace detail

inline RunConfig parse_run_config(std::string_view text, const std::string& source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    const auto& at = e.source().begin;
    throw ParseError(source + " line " + std::to_string(at.line) + ", column " + std::to_string(at.column) + ": " +
                         std::string(e.description()),
                     at.line, at.column);
  }
  const detail::TomlReader r(root);
  const std::set<std::string> train_keys{"learning_rate", "batch_size", "max_epochs", "early_stop_tolerance", "dropout"};
  r.only("", {"seed", "data", "alignment", "task", "fusion", "index", "metrics", "ablation"});
  r.only("data", {"name", "pairs", "dim", "active_classes", "noise_sigma", "image_noise_sigma", "report_noise_sigma",
                  "shift", "val_fraction", "test_fraction"});
  auto align_keys = train_keys;
  align_keys.insert({"loss", "temperature", "content_weight"});
  r.only("alignment", align_keys);
  auto task_keys = train_keys;
  task_keys.insert("composition");
  r.only("task", task_keys);
  r.only("fusion", {"strategy", "k", "n_heads", "similarity_bias"});
  r.only("index", {"fraction"});
  r.only("metrics", {"retrieval_k", "rouge_beta"});
  r.only("ablation", {"compositions", "fractions", "seeds"});

  RunConfig c;
  std::uint64_t seed = 0;
  r.read("", "seed", seed);
  c.apply_seed(seed);
  r.read("data", "name", c.data.name);
  r.read("data", "pairs", c.data.n_pairs);
  r.read("data", "dim", c.data.z_enc);
  r.read("data", "active_classes", c.data.n_active_classes);
  r.read("data", "noise_sigma", c.data.noise_sigma);
  r.read_optional("data", "image_noise_sigma", c.data.image_noise_sigma);
  r.read_optional("data", "report_noise_sigma", c.data.report_noise_sigma);
  r.read("data", "shift", c.data.cross_modal_shift);
  r.read("data", "val_fraction", c.data.val_fraction);
  r.read("data", "test_fraction", c.data.test_fraction);

  detail::read_train(r, "alignment", c.alignment_train);
  std::string loss = to_string(c.loss_mode);
  r.read("alignment", "loss", loss);
  const auto lm = parse_loss_mode(loss);
  if (!lm) throw ValidationError("config: alignment.loss must be 'content' or 'clip', got '" + loss + "'");
  c.loss_mode = *lm;
  r.read("alignment", "temperature", c.alignment.temperature);
  r.read_optional("alignment", "content_weight", c.alignment.content_weight);

  detail::read_train(r, "task", c.task_train);
  std::string comp = to_string(c.composition);
  r.read("task", "composition", comp);
  const auto pc = parse_composition(comp);
  if (!pc) throw ValidationError("config: task.composition must be one of x, r, xr, random, none; got '" + comp + "'");
  c.composition = *pc;

  std::string strategy = to_string(c.fusion.strategy);
  r.read("fusion", "strategy", strategy);
  const auto fs = parse_fusion_strategy(strategy);
  if (!fs) throw ValidationError("config: fusion.strategy must be 'mha' or 'concat', got '" + strategy + "'");
  c.fusion.strategy = *fs;
  r.read("fusion", "k", c.fusion.k);
  r.read("fusion", "n_heads", c.fusion.n_heads);
  r.read("fusion", "similarity_bias", c.fusion.similarity_bias);

  r.read("index", "fraction", c.index_fraction);
  r.read("metrics", "retrieval_k", c.retrieval_k);
  r.read("metrics", "rouge_beta", c.rouge_beta);

  std::vector<std::string> comps;
  r.read_list("ablation", "compositions", comps);
  if (!comps.empty()) {
    c.ablation.compositions.clear();
    for (const auto& s : comps) {
      const auto p = parse_composition(s);
      if (!p) throw ValidationError("config: unknown ablation composition '" + s + "'");
      c.ablation.compositions.push_back(*p);
    }
  }
  r.read_list("ablation", "fractions", c.ablation.fractions);
  r.read_list("ablation", "seeds", c.ablation.seeds);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

}  // namespace xtra
