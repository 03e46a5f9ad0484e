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

#include <fstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace xtra {
namespace {

constexpr const char* kFull = R"(seed = 7

[data]
name = "demo"
pairs = 500
dim = 32
noise_sigma = 0.2
image_noise_sigma = 0.6
shift = 0.5

[alignment]
loss = "clip"
max_epochs = 12
temperature = 0.1
content_weight = 0.5

[task]
composition = "random"
batch_size = 16
dropout = 0.25

[fusion]
strategy = "concat"
k = 5
n_heads = 8
similarity_bias = true

[index]
fraction = 0.5

[metrics]
retrieval_k = 20
rouge_beta = 1.2

[ablation]
compositions = ["x", "none"]
fractions = [0.25, 1.0]
seeds = [3, 4]
)";

TEST(RunConfig, DefaultsFromEmptyDocument) {
  const auto c = parse_run_config("");
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.fusion.k, 10u);
  EXPECT_EQ(c.fusion.n_heads, 4u);
  EXPECT_EQ(c.alignment_train.early_stop_tolerance, 3u);
  EXPECT_EQ(c.alignment.temperature, 0.07);
  EXPECT_FALSE(c.alignment.content_weight.has_value());
  EXPECT_EQ(c.loss_mode, LossMode::Content);
  EXPECT_EQ(c.composition, Composition::XR);
  EXPECT_EQ(c.ablation.compositions.size(), 5u);
}

TEST(RunConfig, ParsesEveryTable) {
  const auto c = parse_run_config(kFull);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.data.seed, 7u);
  EXPECT_EQ(c.alignment_train.seed, 7u);
  EXPECT_EQ(c.task_train.seed, 7u);
  EXPECT_EQ(c.data.name, "demo");
  EXPECT_EQ(c.data.n_pairs, 500u);
  EXPECT_EQ(c.data.z_enc, 32u);
  EXPECT_EQ(c.data.noise_sigma, 0.2);
  EXPECT_EQ(c.data.image_noise_sigma, 0.6);
  EXPECT_FALSE(c.data.report_noise_sigma.has_value());
  EXPECT_EQ(c.data.cross_modal_shift, 0.5);
  EXPECT_EQ(c.loss_mode, LossMode::ClipOnly);
  EXPECT_EQ(c.alignment_train.max_epochs, 12u);
  EXPECT_EQ(c.alignment.temperature, 0.1);
  EXPECT_EQ(c.alignment.content_weight, 0.5);
  EXPECT_EQ(c.composition, Composition::Random);
  EXPECT_EQ(c.task_train.batch_size, 16u);
  EXPECT_EQ(c.task_train.dropout_rate, 0.25);
  EXPECT_EQ(c.fusion.strategy, FusionStrategy::Concat);
  EXPECT_EQ(c.fusion.k, 5u);
  EXPECT_EQ(c.fusion.n_heads, 8u);
  EXPECT_TRUE(c.fusion.similarity_bias);
  EXPECT_EQ(c.index_fraction, 0.5);
  EXPECT_EQ(c.retrieval_k, 20u);
  EXPECT_EQ(c.rouge_beta, 1.2);
  EXPECT_EQ(c.ablation.compositions, (std::vector<Composition>{Composition::X, Composition::None}));
  EXPECT_EQ(c.ablation.fractions, (std::vector<double>{0.25, 1.0}));
  EXPECT_EQ(c.ablation.seeds, (std::vector<std::uint64_t>{3, 4}));
  const auto o = c.experiment_options();
  EXPECT_EQ(o.provenance.config_hash, hex64(c.hash()));
  EXPECT_EQ(o.provenance.seed, 7u);
}

TEST(RunConfig, UnknownKeyReportsLocation) {
  try {
    parse_run_config("seed = 1\n[fusion]\nk = 3\n  topk = 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_EQ(e.column(), 3u);
    EXPECT_NE(std::string(e.what()).find("fusion.topk"), std::string::npos);
  }
  EXPECT_THROW(parse_run_config("colour = 1\n"), ParseError);
  EXPECT_THROW(parse_run_config("[paths]\nout = \"x\"\n"), ParseError);
}

TEST(RunConfig, SyntaxErrorReportsLocation) {
  try {
    parse_run_config("seed = 1\n[data\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(RunConfig, TypeAndValueErrors) {
  EXPECT_THROW(parse_run_config("[fusion]\nk = \"ten\"\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[fusion]\nk = -1\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[fusion]\nk = 0\n"), ParameterError);
  EXPECT_THROW(parse_run_config("[fusion]\nstrategy = \"sum\"\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[alignment]\nloss = \"triplet\"\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[task]\ncomposition = \"both\"\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[index]\nfraction = 0.0\n"), ParameterError);
  EXPECT_THROW(parse_run_config("[data]\ndim = 30\n"), ParameterError);  // 30 % 4 heads
  EXPECT_THROW(parse_run_config("[ablation]\nfractions = \"all\"\n"), ValidationError);
  EXPECT_THROW(parse_run_config("[ablation]\ncompositions = [\"y\"]\n"), ValidationError);
  EXPECT_THROW(parse_run_config("data = 3\n"), ValidationError);
}

TEST(RunConfig, HashTracksEveryField) {
  const auto base = parse_run_config(kFull);
  const std::string text(kFull);
  auto changed = [&](const std::string& from, const std::string& to) {
    std::string t = text;
    const auto at = t.find(from);
    EXPECT_NE(at, std::string::npos) << from;
    t.replace(at, from.size(), to);
    return parse_run_config(t).hash();
  };
  EXPECT_EQ(parse_run_config(kFull).hash(), base.hash());
  EXPECT_NE(changed("seed = 7", "seed = 8"), base.hash());
  EXPECT_NE(changed("pairs = 500", "pairs = 501"), base.hash());
  EXPECT_NE(changed("k = 5", "k = 6"), base.hash());
  EXPECT_NE(changed("rouge_beta = 1.2", "rouge_beta = 1.3"), base.hash());
  EXPECT_NE(changed("seeds = [3, 4]", "seeds = [4, 3]"), base.hash());
  EXPECT_NE(changed("similarity_bias = true", "similarity_bias = false"), base.hash());
  EXPECT_NE(changed("image_noise_sigma = 0.6", "report_noise_sigma = 0.6"), base.hash());
}

TEST(RunConfig, HashIgnoresFormatting) {
  const auto a = parse_run_config("seed = 3\n[fusion]\nk = 4\n");
  const auto b = parse_run_config("# comment\n[fusion]\n k=4   \n\n[index]\nfraction = 1.0\n[data]\n[task]\n").hash();
  auto c = a;
  c.apply_seed(0);
  EXPECT_EQ(c.hash(), b);
  EXPECT_NE(a.hash(), b);
}

TEST(RunConfig, LoadFromFile) {
  const auto dir = testing::fresh_dir("config");
  {
    std::ofstream out(dir / "run.toml");
    out << kFull;
  }
  EXPECT_EQ(load_run_config(dir / "run.toml").hash(), parse_run_config(kFull).hash());
  EXPECT_THROW(load_run_config(dir / "missing.toml"), ArtifactError);
}

}  // namespace
}  // namespace xtra
