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

// Paired image/report embedding datasets: validation, JSONL + TOML manifest
// I/O, the synthetic generator used for desk-scale runs, and batching.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "toml.hpp"
#include "xtra/errors.hpp"
#include "xtra/numerics.hpp"
#include "xtra/provenance.hpp"

namespace xtra {

inline constexpr std::size_t kNumClasses = 14;

// CheXpert ontology, in the column order of the result tables.
inline const std::array<std::string, kNumClasses>& chexpert_classes() {
  static const std::array<std::string, kNumClasses> names = {
      "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly",     "Lung Opacity", "Lung Lesion",
      "Edema",        "Consolidation",              "Pneumonia",        "Atelectasis",  "Pneumothorax",
      "Pleural Effusion", "Pleural Other",          "Fracture",         "Support Devices"};
  return names;
}

using Labels = std::array<std::uint8_t, kNumClasses>;

enum class Modality { Image, Report };
enum class Split { Train, Val, Test };

inline std::string to_string(Modality m) { return m == Modality::Image ? "image" : "report"; }
inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}
inline std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "image") return Modality::Image;
  if (s == "report") return Modality::Report;
  return std::nullopt;
}
inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

struct EmbeddingRecord {
  std::string id;
  std::string pair_id;
  Modality modality = Modality::Image;
  std::vector<float> vector;
  Labels labels{};
  std::optional<std::string> text;
  Split split = Split::Train;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct PairedSample {
  std::string pair_id;
  EmbeddingRecord image;
  EmbeddingRecord report;
  Labels labels{};

  Split split() const { return image.split; }
  friend bool operator==(const PairedSample&, const PairedSample&) = default;
};

struct Dataset {
  std::string name = "dataset";
  std::vector<std::string> class_names{chexpert_classes().begin(), chexpert_classes().end()};
  std::size_t z_enc = 0;
  std::vector<PairedSample> pairs;
  Provenance provenance;

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i].split() == split) out.push_back(i);
    return out;
  }
  std::size_t count(Split split) const { return indices(split).size(); }

  // Checks every dataset invariant; require_splits additionally demands
  // non-empty TRAIN and TEST splits.
  void validate(bool require_splits = true) const;

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.name == b.name && a.class_names == b.class_names && a.z_enc == b.z_enc && a.pairs == b.pairs;
  }
};

inline std::string labels_string(const Labels& labels) {
  std::string s;
  for (auto l : labels) s.push_back(l ? '1' : '0');
  return s;
}

inline void Dataset::validate(bool require_splits) const {
  if (class_names.size() != kNumClasses) {
    throw ValidationError("dataset '" + name + "': expected 14 class names, got " + std::to_string(class_names.size()));
  }
  std::unordered_set<std::string> ids, pair_ids;
  for (const auto& p : pairs) {
    if (!pair_ids.insert(p.pair_id).second) throw ValidationError("pair '" + p.pair_id + "': duplicate pair_id");
    for (const auto* r : {&p.image, &p.report}) {
      if (!ids.insert(r->id).second) throw ValidationError("record '" + r->id + "': duplicate id");
      if (r->vector.size() != z_enc) {
        throw ValidationError("record '" + r->id + "': vector dimension " + std::to_string(r->vector.size()) +
                              " ≠ z_enc " + std::to_string(z_enc));
      }
      for (float v : r->vector)
        if (!std::isfinite(v)) throw ValidationError("record '" + r->id + "': non-finite vector entry");
      for (auto l : r->labels)
        if (l > 1) throw ValidationError("record '" + r->id + "': labels must be 0 or 1");
      if (r->pair_id != p.pair_id) throw ValidationError("record '" + r->id + "': pair_id mismatch");
      if (r->labels != p.labels) throw ValidationError("record '" + r->id + "': labels differ from its pair");
    }
    if (p.image.modality != Modality::Image || p.report.modality != Modality::Report) {
      throw ValidationError("pair '" + p.pair_id + "': needs one image and one report record");
    }
    if (!p.report.text || p.report.text->empty()) {
      throw ValidationError("record '" + p.report.id + "': report records need non-empty text");
    }
    if (p.image.split != p.report.split) throw ValidationError("pair '" + p.pair_id + "': split tags disagree");
  }
  if (require_splits) {
    if (count(Split::Train) == 0) throw ValidationError("dataset '" + name + "': TRAIN split is empty");
    if (count(Split::Test) == 0) throw ValidationError("dataset '" + name + "': TEST split is empty");
  }
}

namespace detail {

inline std::string format_float(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw NumericError("cannot format float");
  return std::string(buf, end);
}

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

inline EmbeddingRecord parse_record(const nlohmann::json& j, std::size_t line_no) {
  auto fail = [&](const std::string& id, const std::string& reason) -> ValidationError {
    return ValidationError("line " + std::to_string(line_no) + ", record '" + id + "': " + reason);
  };
  if (!j.is_object()) throw ParseError("line " + std::to_string(line_no) + ": expected a JSON object", line_no, 1);
  EmbeddingRecord r;
  if (!j.contains("id") || !j["id"].is_string()) throw fail("?", "missing string field 'id'");
  r.id = j["id"].get<std::string>();
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::unordered_set<std::string> known = {"id", "pair_id", "modality", "vector", "labels", "text", "split"};
    if (!known.count(it.key())) throw fail(r.id, "unknown field '" + it.key() + "'");
  }
  if (!j.contains("pair_id") || !j["pair_id"].is_string()) throw fail(r.id, "missing string field 'pair_id'");
  r.pair_id = j["pair_id"].get<std::string>();
  if (!j.contains("modality") || !j["modality"].is_string()) throw fail(r.id, "missing field 'modality'");
  auto modality = parse_modality(j["modality"].get<std::string>());
  if (!modality) throw fail(r.id, "modality must be \"image\" or \"report\"");
  r.modality = *modality;
  if (!j.contains("vector") || !j["vector"].is_array()) throw fail(r.id, "missing array field 'vector'");
  r.vector.reserve(j["vector"].size());
  for (const auto& v : j["vector"]) {
    if (!v.is_number()) throw fail(r.id, "vector entries must be numbers");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw fail(r.id, "non-finite vector entry");
    r.vector.push_back(static_cast<float>(d));
  }
  if (!j.contains("labels") || !j["labels"].is_array()) throw fail(r.id, "missing array field 'labels'");
  const auto& labels = j["labels"];
  if (labels.size() != kNumClasses) {
    throw fail(r.id, "labels length " + std::to_string(labels.size()) + " ≠ " + std::to_string(kNumClasses));
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!labels[c].is_number_integer() || (labels[c].get<int>() != 0 && labels[c].get<int>() != 1)) {
      throw fail(r.id, "labels entries must be 0 or 1");
    }
    r.labels[c] = static_cast<std::uint8_t>(labels[c].get<int>());
  }
  if (j.contains("text") && !j["text"].is_null()) {
    if (!j["text"].is_string()) throw fail(r.id, "text must be a string or null");
    r.text = j["text"].get<std::string>();
  }
  if (!j.contains("split") || !j["split"].is_string()) throw fail(r.id, "missing field 'split'");
  auto split = parse_split(j["split"].get<std::string>());
  if (!split) throw fail(r.id, "split must be train, val or test");
  r.split = *split;
  if (r.modality == Modality::Report && (!r.text || r.text->empty())) throw fail(r.id, "report records need non-empty text");
  return r;
}

}  // namespace detail

// One canonical JSONL line.
inline std::string record_to_jsonl(const EmbeddingRecord& r) {
  std::string s = "{\"id\":" + detail::json_string(r.id) + ",\"pair_id\":" + detail::json_string(r.pair_id) +
                  ",\"modality\":\"" + to_string(r.modality) + "\",\"vector\":[";
  for (std::size_t i = 0; i < r.vector.size(); ++i) {
    if (i) s += ',';
    s += detail::format_float(r.vector[i]);
  }
  s += "],\"labels\":[";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (c) s += ',';
    s += r.labels[c] ? '1' : '0';
  }
  s += "],\"text\":" + (r.text ? detail::json_string(*r.text) : std::string("null")) + ",\"split\":\"" +
       to_string(r.split) + "\"}";
  return s;
}

// Parses JSONL text. Records are grouped into pairs by pair_id in order of
// first appearance.
inline Dataset parse_jsonl(std::istream& in, const std::string& name = "dataset") {
  std::vector<EmbeddingRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(e.byte) + ": " + e.what(),
                       line_no, e.byte);
    }
    records.push_back(detail::parse_record(j, line_no));
  }
  if (records.empty()) throw ValidationError("no records");

  Dataset ds;
  ds.name = name;
  ds.z_enc = records.front().vector.size();
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::pair<std::optional<EmbeddingRecord>, std::optional<EmbeddingRecord>>> halves;
  std::vector<std::string> order;
  for (auto& r : records) {
    auto [it, inserted] = slot.try_emplace(r.pair_id, halves.size());
    if (inserted) {
      halves.emplace_back();
      order.push_back(r.pair_id);
    }
    auto& half = r.modality == Modality::Image ? halves[it->second].first : halves[it->second].second;
    if (half) throw ValidationError("record '" + r.id + "': pair '" + r.pair_id + "' already has a " + to_string(r.modality) + " record");
    half = std::move(r);
  }
  for (std::size_t i = 0; i < halves.size(); ++i) {
    auto& [img, rep] = halves[i];
    if (!img || !rep) {
      throw ValidationError("pair '" + order[i] + "': missing its " + std::string(img ? "report" : "image") + " record");
    }
    PairedSample p;
    p.pair_id = order[i];
    p.labels = img->labels;
    p.image = std::move(*img);
    p.report = std::move(*rep);
    ds.pairs.push_back(std::move(p));
  }
  ds.validate(false);
  return ds;
}

inline void write_jsonl(const Dataset& ds, std::ostream& out) {
  for (const auto& p : ds.pairs) {
    out << record_to_jsonl(p.image) << '\n' << record_to_jsonl(p.report) << '\n';
  }
}

// Writes <dir>/<stem>.jsonl and <dir>/<stem>.toml. Returns the manifest path.
inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& manifest_path) {
  auto jsonl_path = manifest_path;
  jsonl_path.replace_extension(".jsonl");
  {
    std::ofstream out(jsonl_path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + jsonl_path.string());
    write_jsonl(ds, out);
  }
  toml::array names;
  for (const auto& n : ds.class_names) names.push_back(n);
  toml::table dataset{{"name", ds.name},
                      {"records", jsonl_path.filename().string()},
                      {"z_enc", static_cast<std::int64_t>(ds.z_enc)},
                      {"class_names", names}};
  toml::table provenance{{"tool_version", ds.provenance.tool_version},
                         {"config_hash", ds.provenance.config_hash},
                         {"seed", static_cast<std::int64_t>(ds.provenance.seed)}};
  toml::table root{{"dataset", dataset}, {"provenance", provenance}};
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + manifest_path.string());
  out << root << '\n';
  return manifest_path;
}

inline Dataset load_jsonl_file(const std::filesystem::path& path, const std::string& name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("dataset file not found: " + path.string());
  return parse_jsonl(in, name);
}

// Loads either a TOML manifest or a bare JSONL file. Full validation,
// including non-empty TRAIN and TEST splits.
inline Dataset load_dataset(const std::filesystem::path& path) {
  if (path.extension() != ".toml") {
    Dataset ds = load_jsonl_file(path, path.stem().string());
    ds.validate(true);
    return ds;
  }
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    if (!std::filesystem::exists(path)) throw ArtifactError("manifest not found: " + path.string());
    throw ParseError(path.string() + ": " + std::string(e.description()), e.source().begin.line,
                     e.source().begin.column);
  }
  const auto* section = root["dataset"].as_table();
  if (!section) throw ValidationError(path.string() + ": missing [dataset] table");
  for (auto&& [key, value] : *section) {
    static const std::unordered_set<std::string> known = {"name", "records", "z_enc", "class_names"};
    if (!known.count(std::string(key.str()))) throw ValidationError(path.string() + ": unknown key dataset." + std::string(key.str()));
  }
  auto records = (*section)["records"].value<std::string>();
  if (!records) throw ValidationError(path.string() + ": dataset.records is required");
  const auto jsonl = path.parent_path() / *records;
  Dataset ds = load_jsonl_file(jsonl, (*section)["name"].value_or(path.stem().string()));
  if (auto z = (*section)["z_enc"].value<std::int64_t>()) {
    if (static_cast<std::size_t>(*z) != ds.z_enc) {
      throw ValidationError("manifest z_enc " + std::to_string(*z) + " ≠ record dimension " + std::to_string(ds.z_enc));
    }
  }
  if (const auto* names = (*section)["class_names"].as_array()) {
    ds.class_names.clear();
    for (auto&& n : *names) ds.class_names.push_back(n.value_or(std::string{}));
  }
  if (const auto* prov = root["provenance"].as_table()) {
    ds.provenance.tool_version = (*prov)["tool_version"].value_or(std::string{});
    ds.provenance.config_hash = (*prov)["config_hash"].value_or(hex64(0));
    ds.provenance.seed = static_cast<std::uint64_t>((*prov)["seed"].value_or(std::int64_t{0}));
  }
  ds.validate(true);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::size_t n_pairs = 1000;
  std::size_t z_enc = 64;
  std::size_t n_active_classes = 2;
  double noise_sigma = 0.1;
  // Per-modality overrides of noise_sigma.
  std::optional<double> image_noise_sigma;
  std::optional<double> report_noise_sigma;
  double cross_modal_shift = 1.0;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::string name = "synthetic";
};

inline const std::array<std::string, kNumClasses>& synthetic_sentences() {
  static const std::array<std::string, kNumClasses> s = {
      "no acute cardiopulmonary abnormality",
      "the cardiomediastinal silhouette is enlarged",
      "the heart size is enlarged consistent with cardiomegaly",
      "there is an opacity in the lung",
      "a focal lung lesion is seen",
      "findings are consistent with pulmonary edema",
      "there is focal consolidation",
      "the appearance suggests pneumonia",
      "there is bibasilar atelectasis",
      "a small pneumothorax is present",
      "there is a pleural effusion",
      "pleural thickening is noted",
      "a rib fracture is identified",
      "support devices are in place"};
  return s;
}

inline std::string synthetic_report_text(const Labels& labels) {
  std::string text;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!labels[c]) continue;
    if (!text.empty()) text += ". ";
    text += synthetic_sentences()[c];
  }
  return text + ".";
}

namespace detail {

inline std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

// Random orthogonal matrix via modified Gram-Schmidt on a Gaussian matrix.
inline std::vector<std::vector<double>> random_orthogonal(std::size_t n, Rng& rng) {
  std::vector<std::vector<double>> q(n, std::vector<double>(n));
  for (auto& row : q)
    for (auto& v : row) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < n; ++k) d += q[i][k] * q[j][k];
      for (std::size_t k = 0; k < n; ++k) q[i][k] -= d * q[j][k];
    }
    q[i] = normalized(std::move(q[i]));
  }
  return q;
}

}  // namespace detail

// Each class owns a random unit anchor. An image vector is the normalized sum
// of its active anchors plus Gaussian noise; the report vector starts from the
// same point, blended towards a fixed random rotation by cross_modal_shift.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.n_pairs < 10) throw ParameterError("n_pairs ≥ 10 required, got " + std::to_string(cfg.n_pairs));
  if (cfg.z_enc < 8) throw ParameterError("z_enc ≥ 8 required, got " + std::to_string(cfg.z_enc));
  if (cfg.n_active_classes < 1 || cfg.n_active_classes > kNumClasses) {
    throw ParameterError("n_active_classes must be in [1, 14], got " + std::to_string(cfg.n_active_classes));
  }
  const double sigma_img = cfg.image_noise_sigma.value_or(cfg.noise_sigma);
  const double sigma_rep = cfg.report_noise_sigma.value_or(cfg.noise_sigma);
  if (sigma_img < 0 || sigma_rep < 0) throw ParameterError("noise sigma must be non-negative");
  if (cfg.cross_modal_shift < 0 || cfg.cross_modal_shift > 1) throw ParameterError("cross_modal_shift must be in [0, 1]");
  if (cfg.val_fraction < 0 || cfg.test_fraction <= 0 || cfg.val_fraction + cfg.test_fraction >= 1) {
    throw ParameterError("split fractions must leave a non-empty train split");
  }

  const std::size_t d = cfg.z_enc;
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> anchors(kNumClasses, std::vector<double>(d));
  for (auto& a : anchors) {
    for (auto& v : a) v = rng.normal();
    a = detail::normalized(std::move(a));
  }
  const auto rotation = detail::random_orthogonal(d, rng);
  const double shift = cfg.cross_modal_shift;

  Dataset ds;
  ds.name = cfg.name;
  ds.z_enc = d;
  ds.provenance.seed = cfg.seed;
  std::vector<std::size_t> classes(kNumClasses);
  const std::size_t width = std::max<std::size_t>(5, std::to_string(cfg.n_pairs - 1).size());
  for (std::size_t i = 0; i < cfg.n_pairs; ++i) {
    for (std::size_t c = 0; c < kNumClasses; ++c) classes[c] = c;
    Labels labels{};
    std::vector<double> base(d, 0.0);
    for (std::size_t a = 0; a < cfg.n_active_classes; ++a) {
      const std::size_t j = a + rng.below(kNumClasses - a);
      std::swap(classes[a], classes[j]);
      labels[classes[a]] = 1;
    }
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (labels[c])
        for (std::size_t k = 0; k < d; ++k) base[k] += anchors[c][k];
    base = detail::normalized(std::move(base));

    std::vector<double> report = base;
    if (shift > 0.0) {
      for (std::size_t r = 0; r < d; ++r) {
        double rotated = 0.0;
        for (std::size_t k = 0; k < d; ++k) rotated += rotation[r][k] * base[k];
        report[r] = (1.0 - shift) * base[r] + shift * rotated;
      }
      report = detail::normalized(std::move(report));
    }

    std::string num = std::to_string(i);
    num.insert(0, width - std::min(num.size(), width), '0');
    PairedSample p;
    p.pair_id = cfg.name + "-p" + num;
    p.labels = labels;
    p.image = EmbeddingRecord{p.pair_id + "-img", p.pair_id, Modality::Image, {}, labels, std::nullopt, Split::Train};
    p.report = EmbeddingRecord{p.pair_id + "-rep", p.pair_id, Modality::Report, {}, labels,
                               synthetic_report_text(labels), Split::Train};
    p.image.vector.resize(d);
    p.report.vector.resize(d);
    for (std::size_t k = 0; k < d; ++k) p.image.vector[k] = static_cast<float>(base[k] + sigma_img * rng.normal());
    for (std::size_t k = 0; k < d; ++k) p.report.vector[k] = static_cast<float>(report[k] + sigma_rep * rng.normal());
    ds.pairs.push_back(std::move(p));
  }

  std::vector<std::size_t> order(cfg.n_pairs);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto n = static_cast<double>(cfg.n_pairs);
  const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.test_fraction * n)));
  const std::size_t n_val = cfg.val_fraction > 0
                                ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.val_fraction * n)))
                                : 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const Split s = r < n_test ? Split::Test : (r < n_test + n_val ? Split::Val : Split::Train);
    ds.pairs[order[r]].image.split = s;
    ds.pairs[order[r]].report.split = s;
  }
  ds.validate(true);
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

// Indices (into dataset.pairs) of `split`, shuffled per (seed, epoch) and
// chunked; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> iterate_batches(const Dataset& ds, Split split, std::size_t batch_size,
                                                             std::uint64_t seed, std::uint64_t epoch = 0) {
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  auto idx = ds.indices(split);
  Rng rng(Rng::mix(seed, epoch));
  rng.shuffle(idx.begin(), idx.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
  }
  return batches;
}

// Stacks the chosen modality's vectors of `rows` into a matrix.
inline Matrix stack_vectors(const Dataset& ds, const std::vector<std::size_t>& rows, Modality m) {
  Matrix out(rows.size(), ds.z_enc);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = m == Modality::Image ? ds.pairs[rows[i]].image.vector : ds.pairs[rows[i]].report.vector;
    std::copy(v.begin(), v.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix stack_labels(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), kNumClasses);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < kNumClasses; ++c) out(i, c) = ds.pairs[rows[i]].labels[c];
  return out;
}

}  // namespace xtra
