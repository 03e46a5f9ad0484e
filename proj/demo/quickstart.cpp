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

// Library walkthrough: synthetic data, alignment, retrieval indices,
// augmented classification and report retrieval.
#include <cstdio>

#include "xtra.hpp"

using namespace xtra;

namespace {

double cross_modal_map(const Dataset& ds, const Matrix& test_images, const RetrievalIndex& reports) {
  std::vector<Labels> labels;
  for (auto r : ds.indices(Split::Test)) labels.push_back(ds.pairs[r].labels);
  return map_table(rank_queries(reports, test_images, labels, 10), ds.class_names).average;
}

}  // namespace

int main() {
  SynthConfig sc;
  sc.n_pairs = 1000;
  sc.z_enc = 64;
  sc.image_noise_sigma = 0.4;
  sc.report_noise_sigma = 0.05;
  sc.seed = 1;
  const Dataset ds = generate_synthetic(sc);
  std::printf("dataset: %zu pairs, train %zu / val %zu / test %zu\n", ds.pairs.size(), ds.count(Split::Train),
              ds.count(Split::Val), ds.count(Split::Test));

  ExperimentOptions opt;
  opt.alignment_train.seed = 1;
  opt.task_train.seed = 1;

  // Untrained heads versus the trained alignment, image -> report mAP@10.
  const auto untrained = AlignmentModel<float>::create(ds.z_enc, opt.alignment, 1);
  const auto before = build_index(untrained, ds, IndexTarget::R);
  const TrainedRetrieval t = build_retrieval(ds, opt);
  const auto test = ds.indices(Split::Test);
  std::printf("image -> report mAP@10: untrained %.3f, aligned %.3f\n",
              cross_modal_map(ds, project_rows(untrained, ds, test, Modality::Image), before),
              cross_modal_map(ds, project_rows(t.alignment, ds, test, Modality::Image), t.report_index));

  // Classifier on the aligned image alone, then with retrieved neighbours.
  const RetrievalSources sources{&t.image_index, &t.report_index};
  for (auto c : {Composition::None, Composition::XR}) {
    ClassifierOptions co;
    co.fusion = fusion_for(c, opt.fusion);
    const auto run = train_classifier(ds, t.alignment, sources, co, opt.task_train);
    const auto result = evaluate_classifier(run.model, ds, t.alignment, sources);
    std::printf("classifier (%s): TEST macro AUC %.4f after %zu epochs\n", to_string(c).c_str(),
                result.table("AUC").average, run.epochs_run);
  }

  // Nearest training report for one test image.
  const auto& pair = ds.pairs[test.front()];
  const auto hit = retrieve_report(pair.image, t.alignment, t.report_index, 3);
  std::printf("query %s [%s]\n  retrieved %s [%s]: %s\n  reference: %s\n", pair.image.id.c_str(),
              labels_string(pair.labels).c_str(), hit.report_id.c_str(), labels_string(hit.labels).c_str(),
              hit.text.value_or("").c_str(), pair.report.text.value_or("").c_str());
  return 0;
}
