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

// Small helpers shared by the test binaries.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xtra.hpp"

namespace xtra::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = static_cast<float>(scale * rng.normal());
  return m;
}

inline Matrix random_unit_rows(std::size_t r, std::size_t c, Rng& rng) {
  return l2_normalize_rows(random_matrix(r, c, rng));
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("xtra_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline SynthConfig synth(std::size_t n, std::uint64_t seed, double sigma = 0.1, double shift = 1.0) {
  SynthConfig c;
  c.n_pairs = n;
  c.seed = seed;
  c.noise_sigma = sigma;
  c.cross_modal_shift = shift;
  return c;
}

// TEST images queried against TRAIN reports, both given as unit rows.
inline double cross_modal_map(const Dataset& ds, const Matrix& test_images, const Matrix& train_reports,
                              std::size_t k = 10) {
  const auto tr = ds.indices(Split::Train);
  const auto te = ds.indices(Split::Test);
  std::vector<IndexEntry> entries;
  for (auto r : tr) entries.push_back({ds.pairs[r].report.id, ds.pairs[r].pair_id, Modality::Report, ds.pairs[r].labels, {}, ds.name});
  const RetrievalIndex index(IndexTarget::R, ds.z_enc, entries, train_reports);
  std::vector<Labels> labels;
  for (auto r : te) labels.push_back(ds.pairs[r].labels);
  return map_table(rank_queries(index, test_images, labels, k), ds.class_names).average;
}

inline double raw_cross_modal_map(const Dataset& ds) {
  return cross_modal_map(ds, l2_normalize_rows(stack_vectors(ds, ds.indices(Split::Test), Modality::Image)),
                         l2_normalize_rows(stack_vectors(ds, ds.indices(Split::Train), Modality::Report)));
}

inline double aligned_cross_modal_map(const AlignmentModel<float>& model, const Dataset& ds) {
  return cross_modal_map(ds, project_rows(model, ds, ds.indices(Split::Test), Modality::Image),
                         project_rows(model, ds, ds.indices(Split::Train), Modality::Report));
}

}  // namespace xtra::testing
