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

// Drives the xtra binary end to end through a shell.
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace xtra {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string output;  // stdout followed by stderr
};

Outcome xtra(const std::string& args) {
  const std::string cmd = std::string(XTRA_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, pipe)) > 0;) o.output.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

#define XTRA_OK(args)                            \
  do {                                           \
    const auto o_ = xtra(args);                  \
    ASSERT_EQ(o_.code, 0) << (args) << "\n" << o_.output; \
  } while (0)

constexpr const char* kTrainFlags = " --max-epochs 3 --batch-size 32 --seed 5";

// synth -> align -> index build (x, r) -> train in `dir`.
void build_pipeline(const fs::path& dir) {
  XTRA_OK("synth --pairs 300 --dim 32 --noise 0.3 --seed 5 -o " + q(dir / "ds.toml"));
  XTRA_OK("align --data " + q(dir / "ds.toml") + kTrainFlags + " -o " + q(dir / "align.ckpt"));
  for (const char* t : {"x", "r"}) {
    XTRA_OK("index build --data " + q(dir / "ds.toml") + " --model " + q(dir / "align.ckpt") + " --target " + t +
            " --seed 5 -o " + q(dir / ("index_" + std::string(t) + ".xidx")));
  }
  XTRA_OK("train --data " + q(dir / "ds.toml") + " --model " + q(dir / "align.ckpt") + " --index-x " +
          q(dir / "index_x.xidx") + " --index-r " + q(dir / "index_r.xidx") + " --k 4 --report-map" + kTrainFlags +
          " -o " + q(dir / "task.ckpt"));
}

std::string eval_args(const fs::path& dir, const fs::path& out) {
  return "eval --data " + q(dir / "ds.toml") + " --model " + q(dir / "align.ckpt") + " --index-x " +
         q(dir / "index_x.xidx") + " --index-r " + q(dir / "index_r.xidx") + " --task " + q(dir / "task.ckpt") +
         " -o " + q(out);
}

class Pipeline : public ::testing::Test {
 protected:
  // Per process, since ctest may run these tests concurrently.
  static fs::path dir() {
    return fs::temp_directory_path() / ("xtra_test_cli_pipeline_" + std::to_string(getpid()));
  }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    fs::create_directories(dir());
    build_pipeline(dir());
  }

  static void TearDownTestSuite() { fs::remove_all(dir()); }
};

TEST(Cli, SynthWritesTwoRecordsPerPair) {
  const auto dir = testing::fresh_dir("cli_synth");
  const auto o = xtra("synth --pairs 1000 --dim 64 --seed 7 -o " + q(dir / "a.toml"));
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_EQ(lines(slurp(dir / "a.jsonl")).size(), 2000u);
  EXPECT_NE(slurp(dir / "a.toml").find("config_hash"), std::string::npos);
}

TEST(Cli, SynthIsReproducible) {
  const auto a = testing::fresh_dir("cli_synth_a");
  const auto b = testing::fresh_dir("cli_synth_b");
  XTRA_OK("synth --pairs 200 --dim 16 --seed 3 -o " + q(a / "d.toml"));
  XTRA_OK("synth --pairs 200 --dim 16 --seed 3 -o " + q(b / "d.toml"));
  EXPECT_EQ(slurp(a / "d.jsonl"), slurp(b / "d.jsonl"));
  EXPECT_EQ(slurp(a / "d.toml"), slurp(b / "d.toml"));
  XTRA_OK("synth --pairs 200 --dim 16 --seed 4 -o " + q(b / "d.toml"));
  EXPECT_NE(slurp(a / "d.jsonl"), slurp(b / "d.jsonl"));
}

TEST(Cli, TooFewPairsIsUsageError) {
  const auto dir = testing::fresh_dir("cli_few");
  const auto o = xtra("synth --pairs 5 -o " + q(dir / "d.toml"));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("n_pairs ≥ 10"), std::string::npos) << o.output;
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(xtra("").code, 2);
  EXPECT_EQ(xtra("frobnicate").code, 2);
  EXPECT_EQ(xtra("synth --bogus").code, 2);
  EXPECT_EQ(xtra("align").code, 2);  // --data is required
  const auto help = xtra("--help");
  EXPECT_EQ(help.code, 0);
  for (const char* sub : {"synth", "validate", "align", "index", "train", "eval", "ablate", "cross-dataset"}) {
    EXPECT_NE(help.output.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, MissingArtifactNamesProducer) {
  const auto dir = testing::fresh_dir("cli_missing");
  auto o = xtra("align --data " + q(dir / "none.toml") + " -o " + q(dir / "a.ckpt"));
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.output.find("xtra synth"), std::string::npos) << o.output;
  XTRA_OK("synth --pairs 50 --dim 16 -o " + q(dir / "d.toml"));
  o = xtra("index build --data " + q(dir / "d.toml") + " --model " + q(dir / "a.ckpt") + " -o " + q(dir / "i.xidx"));
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.output.find("xtra align"), std::string::npos) << o.output;
}

TEST(Cli, MalformedDatasetIsValidationError) {
  const auto dir = testing::fresh_dir("cli_bad");
  XTRA_OK("synth --pairs 50 --dim 16 -o " + q(dir / "d.toml"));
  {
    std::ofstream out(dir / "d.jsonl", std::ios::app);
    out << "{\"id\": 3}\n";
  }
  const auto o = xtra("validate --data " + q(dir / "d.toml"));
  EXPECT_EQ(o.code, 3) << o.output;
}

TEST(Cli, ConfigFileAndFlagOverride) {
  const auto dir = testing::fresh_dir("cli_config");
  {
    std::ofstream out(dir / "run.toml");
    out << "seed = 9\n[data]\npairs = 40\ndim = 16\n";
  }
  XTRA_OK("synth --config " + q(dir / "run.toml") + " -o " + q(dir / "a.toml"));
  EXPECT_EQ(lines(slurp(dir / "a.jsonl")).size(), 80u);
  XTRA_OK("synth --config " + q(dir / "run.toml") + " --pairs 30 -o " + q(dir / "b.toml"));
  EXPECT_EQ(lines(slurp(dir / "b.jsonl")).size(), 60u);
  {
    std::ofstream out(dir / "bad.toml");
    out << "[data]\npairz = 40\n";
  }
  const auto o = xtra("synth --config " + q(dir / "bad.toml") + " -o " + q(dir / "c.toml"));
  EXPECT_EQ(o.code, 3);
  EXPECT_NE(o.output.find("line 2"), std::string::npos) << o.output;
}

TEST_F(Pipeline, IndexQueryPrintsRankedNeighbours) {
  const auto o = xtra("index query --index " + q(dir() / "index_r.xidx") + " --data " + q(dir() / "ds.toml") +
                      " --model " + q(dir() / "align.ckpt") + " --id synthetic-p00003-img --k 10");
  ASSERT_EQ(o.code, 0) << o.output;
  const auto rows = lines(o.output);
  ASSERT_EQ(rows.size(), 11u) << o.output;
  EXPECT_EQ(rows[0], "rank\tid\tsimilarity\tlabels");
  double prev = 2.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::istringstream in(rows[i]);
    std::size_t rank = 0;
    std::string id;
    double sim = 0.0;
    in >> rank >> id >> sim;
    EXPECT_EQ(rank, i);
    EXPECT_LE(sim, prev);
    prev = sim;
  }
}

TEST_F(Pipeline, EvalTwiceIsByteIdentical) {
  const auto a = dir() / "eval_a";
  const auto b = dir() / "eval_b";
  XTRA_OK(eval_args(dir(), a));
  XTRA_OK(eval_args(dir(), b));
  for (const char* f : {"table1_retrieval.csv", "table2_classification.csv", "table3_report_retrieval.csv",
                        "results.json"}) {
    const auto text = slurp(a / f);
    ASSERT_FALSE(text.empty()) << f;
    EXPECT_EQ(text, slurp(b / f)) << f;
  }
  for (const char* f : {"table1_retrieval.csv", "table2_classification.csv", "table3_report_retrieval.csv"}) {
    EXPECT_EQ(slurp(a / f).rfind("# xtra ", 0), 0u) << f;
  }
  EXPECT_NE(slurp(a / "results.json").find("config_hash"), std::string::npos);
  const auto t3 = lines(slurp(a / "table3_report_retrieval.csv"));
  EXPECT_EQ(t3[1], "metric,image_query,task");
}

TEST_F(Pipeline, EveryStageRerunsByteIdentical) {
  const auto again = dir() / "again";
  fs::create_directories(again);
  build_pipeline(again);
  for (const char* f : {"ds.toml", "ds.jsonl", "align.ckpt", "align.ckpt.log.json", "index_x.xidx", "index_r.xidx",
                        "task.ckpt", "task.ckpt.log.json"}) {
    EXPECT_EQ(slurp(dir() / f), slurp(again / f)) << f;
  }
}

TEST_F(Pipeline, MissingTaskNamesTrain) {
  const auto o = xtra("eval --data " + q(dir() / "ds.toml") + " --model " + q(dir() / "align.ckpt") + " --index-x " +
                      q(dir() / "index_x.xidx") + " --index-r " + q(dir() / "index_r.xidx") + " --task " +
                      q(dir() / "nope.ckpt") + " -o " + q(dir() / "eval_missing"));
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.output.find("xtra train"), std::string::npos) << o.output;
}

TEST_F(Pipeline, WrongIndexTargetIsRejected) {
  const auto o = xtra("eval --data " + q(dir() / "ds.toml") + " --model " + q(dir() / "align.ckpt") + " --index-x " +
                      q(dir() / "index_r.xidx") + " --index-r " + q(dir() / "index_r.xidx") + " -o " +
                      q(dir() / "eval_wrong"));
  EXPECT_EQ(o.code, 3) << o.output;
}

TEST_F(Pipeline, AblationJobsDoNotChangeOutput) {
  const std::string base = "ablate --data " + q(dir() / "ds.toml") + " --model " + q(dir() / "align.ckpt") +
                           " --compositions xr,none --fractions 0.5,1 --seeds 1 --k 4" + kTrainFlags;
  XTRA_OK(base + " -j 1 -o " + q(dir() / "abl1"));
  XTRA_OK(base + " -j 3 -o " + q(dir() / "abl3"));
  const auto csv = slurp(dir() / "abl1" / "ablation.csv");
  EXPECT_EQ(csv, slurp(dir() / "abl3" / "ablation.csv"));
  EXPECT_EQ(slurp(dir() / "abl1" / "ablation.json"), slurp(dir() / "abl3" / "ablation.json"));
  EXPECT_EQ(lines(csv).size(), 6u);
  const auto o = xtra("ablate --data " + q(dir() / "ds.toml") + " --model " + q(dir() / "align.ckpt") +
                      " --fractions 0 -o " + q(dir() / "abl_bad"));
  EXPECT_EQ(o.code, 2) << o.output;
}

TEST_F(Pipeline, IndexExtendAndCrossDataset) {
  XTRA_OK("synth --pairs 120 --dim 32 --noise 0.3 --seed 6 --name other -o " + q(dir() / "other.toml"));
  XTRA_OK("index extend --index " + q(dir() / "index_x.xidx") + " --data " + q(dir() / "other.toml") + " --model " +
          q(dir() / "align.ckpt") + " -o " + q(dir() / "index_x_ext.xidx"));
  const auto ext = RetrievalIndex::load(dir() / "index_x_ext.xidx");
  const auto orig = RetrievalIndex::load(dir() / "index_x.xidx");
  EXPECT_EQ(ext.size(), orig.size() + 84u);
  XTRA_OK("cross-dataset --source-data " + q(dir() / "ds.toml") + " --source-model " + q(dir() / "align.ckpt") +
          " --source-index-x " + q(dir() / "index_x.xidx") + " --source-index-r " + q(dir() / "index_r.xidx") +
          " --target-data " + q(dir() / "other.toml") + " --k 4" + kTrainFlags + " -o " + q(dir() / "cross"));
  for (const char* f : {"cross_scratch.csv", "cross_frozen.csv", "cross_finetune.csv", "cross_dataset.json"}) {
    EXPECT_TRUE(fs::exists(dir() / "cross" / f)) << f;
  }
  EXPECT_NE(slurp(dir() / "cross" / "cross_dataset.json").find("retrieval_provenance"), std::string::npos);
}

}  // namespace
}  // namespace xtra
