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

// xtra: command-line driver for the retrieval-augmentation pipeline.
//
//   synth -> align -> index build -> train -> eval
//
// Artifacts carry {tool version, config hash, seed}. Exit codes: 0 success,
// 2 usage, 3 validation, 4 missing or stale artifact, 5 internal error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xtra.hpp"

namespace fs = std::filesystem;
using namespace xtra;

namespace {

enum Exit { kOk = 0, kUsage = 2, kValidation = 3, kMissing = 4, kInternal = 5 };

void progress(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << "\n"; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

// Missing artifacts name the command that produces them.
void require_file(const fs::path& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) {
    throw ArtifactError("missing " + what + " '" + path.string() + "'; run `xtra " + producer + "` first");
  }
}

void require_current(const Provenance& p, const fs::path& path, const std::string& producer) {
  if (p.tool_version != kToolVersion) {
    throw ArtifactError("stale artifact '" + path.string() + "' (written by xtra " +
                        (p.tool_version.empty() ? std::string("?") : p.tool_version) + ", this is " + std::string(kToolVersion) +
                        "); re-run `xtra " + producer + "`");
  }
}

Dataset open_dataset(const fs::path& path) {
  require_file(path, "dataset", "synth");
  Dataset ds = load_dataset(path);
  ds.validate(true);
  return ds;
}

AlignmentModel<float> open_alignment(const fs::path& path, const Dataset* ds = nullptr) {
  require_file(path, "alignment checkpoint", "align");
  const Checkpoint c = load_checkpoint(path);
  require_current(Provenance::from_json(c.metadata.value("provenance", nlohmann::json::object())), path, "align");
  AlignmentModel<float> m = alignment_from_checkpoint(c);
  if (ds && m.z_enc != ds->z_enc) {
    throw DimensionError("alignment model z_enc " + std::to_string(m.z_enc) + " ≠ dataset z_enc " +
                         std::to_string(ds->z_enc));
  }
  return m;
}

RetrievalIndex open_index(const fs::path& path, std::optional<IndexTarget> expect = std::nullopt) {
  require_file(path, "index", "index build");
  RetrievalIndex idx = RetrievalIndex::load(path);
  require_current(idx.provenance(), path, "index build");
  if (expect && idx.target() != *expect) {
    throw ValidationError("index '" + path.string() + "' has target " + to_string(idx.target()) + ", expected " +
                          to_string(*expect));
  }
  return idx;
}

TaskModel open_task(const fs::path& path) {
  require_file(path, "task checkpoint", "train");
  const Checkpoint c = load_checkpoint(path);
  require_current(Provenance::from_json(c.metadata.value("provenance", nlohmann::json::object())), path, "train");
  return task_from_checkpoint(c);
}

// Options shared by every subcommand; flags override the config file.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "TOML run configuration")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "global seed (overrides the config file)");
  }

  RunConfig load() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) c.apply_seed(*seed);
    return c;
  }
};

struct TrainFlags {
  std::optional<double> lr;
  std::optional<std::size_t> batch, epochs, tolerance;
  std::optional<double> dropout;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--batch-size", batch, "mini-batch size");
    app->add_option("--max-epochs", epochs, "epoch limit");
    app->add_option("--tolerance", tolerance, "early stopping tolerance (epochs)");
    app->add_option("--dropout", dropout, "dropout rate");
  }

  void apply(TrainConfig& t) const {
    if (lr) t.learning_rate = *lr;
    if (batch) t.batch_size = *batch;
    if (epochs) t.max_epochs = *epochs;
    if (tolerance) t.early_stop_tolerance = *tolerance;
    if (dropout) t.dropout_rate = *dropout;
  }
};

struct FusionFlags {
  std::optional<std::string> composition, strategy;
  std::optional<std::size_t> k, heads;
  bool similarity_bias = false;

  void add(CLI::App* app) {
    app->add_option("--composition", composition, "neighbour composition: x, r, xr, random, none");
    app->add_option("--strategy", strategy, "fusion strategy: mha or concat");
    app->add_option("--k", k, "neighbours per branch");
    app->add_option("--heads", heads, "attention heads");
    app->add_flag("--similarity-bias", similarity_bias, "add retrieval similarity to attention logits");
  }

  void apply(RunConfig& c) const {
    if (composition) {
      const auto p = parse_composition(*composition);
      if (!p) throw ParameterError("--composition must be one of x, r, xr, random, none");
      c.composition = *p;
    }
    if (strategy) {
      const auto s = parse_fusion_strategy(*strategy);
      if (!s) throw ParameterError("--strategy must be mha or concat");
      c.fusion.strategy = *s;
    }
    if (k) c.fusion.k = *k;
    if (heads) c.fusion.n_heads = *heads;
    if (similarity_bias) c.fusion.similarity_bias = true;
  }
};

nlohmann::ordered_json stamp(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["provenance"] = cfg.provenance().to_json();
  j["config"] = cfg.to_json();
  return j;
}

// ---------------------------------------------------------------------------

struct SynthCmd {
  Common common;
  std::optional<std::size_t> pairs, dim, active;
  std::optional<double> noise, image_noise, report_noise, shift;
  std::optional<std::string> name;
  std::string out = "synthetic.toml";

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("synth", "generate a synthetic paired-embedding dataset");
    common.add(app);
    app->add_option("--pairs", pairs, "number of image/report pairs (≥ 10)");
    app->add_option("--dim", dim, "embedding dimension z_enc");
    app->add_option("--active-classes", active, "active classes per pair");
    app->add_option("--noise", noise, "noise sigma for both modalities");
    app->add_option("--image-noise", image_noise, "image noise sigma");
    app->add_option("--report-noise", report_noise, "report noise sigma");
    app->add_option("--shift", shift, "cross-modal shift in [0, 1]");
    app->add_option("--name", name, "dataset name");
    app->add_option("-o,--out", out, "manifest path; records go to the sibling .jsonl");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    if (pairs) cfg.data.n_pairs = *pairs;
    if (dim) cfg.data.z_enc = *dim;
    if (active) cfg.data.n_active_classes = *active;
    if (noise) cfg.data.noise_sigma = *noise;
    if (image_noise) cfg.data.image_noise_sigma = *image_noise;
    if (report_noise) cfg.data.report_noise_sigma = *report_noise;
    if (shift) cfg.data.cross_modal_shift = *shift;
    if (name) cfg.data.name = *name;
    Dataset ds = generate_synthetic(cfg.data);
    ds.provenance = cfg.provenance();
    const auto jsonl = save_dataset(ds, out);
    progress("synth", std::to_string(ds.pairs.size() * 2) + " records -> " + jsonl.string());
  }
};

struct ValidateCmd {
  std::string data;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("validate", "check a dataset for schema and invariant violations");
    app->add_option("--data", data, "dataset manifest (.toml) or JSONL file")->required();
    app->callback([this] { run(); });
  }

  void run() {
    const Dataset ds = open_dataset(data);
    std::ostringstream msg;
    msg << ds.name << ": " << ds.pairs.size() << " pairs, z_enc " << ds.z_enc << ", train " << ds.count(Split::Train)
        << " / val " << ds.count(Split::Val) << " / test " << ds.count(Split::Test);
    progress("validate", msg.str());
  }
};

struct AlignCmd {
  Common common;
  TrainFlags train;
  std::string data, out = "alignment.ckpt";
  std::optional<std::string> loss;
  std::optional<double> temperature, content_weight;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("align", "train the cross-modal alignment model");
    common.add(app);
    train.add(app);
    app->add_option("--data", data, "dataset manifest")->required();
    app->add_option("--loss", loss, "content or clip");
    app->add_option("--temperature", temperature, "contrastive temperature");
    app->add_option("--content-weight", content_weight, "weight of the content term (default: unweighted sum)");
    app->add_option("-o,--out", out, "checkpoint path; the log goes to <out>.log.json");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    train.apply(cfg.alignment_train);
    if (loss) {
      const auto m = parse_loss_mode(*loss);
      if (!m) throw ParameterError("--loss must be content or clip");
      cfg.loss_mode = *m;
    }
    if (temperature) cfg.alignment.temperature = *temperature;
    if (content_weight) cfg.alignment.content_weight = *content_weight;
    const Dataset ds = open_dataset(data);
    cfg.data.z_enc = ds.z_enc;
    cfg.validate();
    progress("align", "training " + to_string(cfg.loss_mode) + " alignment on " + ds.name);
    AlignmentRun run = train_alignment(ds, cfg.alignment_train, cfg.loss_mode, cfg.alignment);
    progress("align", "best epoch " + std::to_string(run.best_epoch) + " of " + std::to_string(run.epochs_run));
    auto meta = stamp(cfg);
    meta["dataset"] = ds.name;
    meta["loss"] = to_string(cfg.loss_mode);
    save_checkpoint(alignment_checkpoint(run.model, meta), out);
    auto log = stamp(cfg);
    log["training"] = run.log_json();
    write_json(out + ".log.json", log);
  }
};

struct IndexCmd {
  Common common;
  std::string data, model, out = "index.xidx", index_path, more, id;
  std::string target = "x";
  std::optional<double> fraction;
  std::size_t k = 10;
  bool exclude_own = false;
  CLI::App* build = nullptr;
  CLI::App* query = nullptr;
  CLI::App* extend = nullptr;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("index", "build, query or extend a retrieval index");
    app->require_subcommand(1);
    build = app->add_subcommand("build", "index the aligned TRAIN records of a dataset");
    common.add(build);
    build->add_option("--data", data, "dataset manifest")->required();
    build->add_option("--model", model, "alignment checkpoint")->required();
    build->add_option("--target", target, "x (images), r (reports) or xr (both)");
    build->add_option("--fraction", fraction, "keep a deterministic subsample of the TRAIN pairs");
    build->add_option("-o,--out", out, "index file");
    build->callback([this] { run_build(); });

    query = app->add_subcommand("query", "print the nearest neighbours of one record");
    query->add_option("--index", index_path, "index file")->required();
    query->add_option("--data", data, "dataset holding the query record")->required();
    query->add_option("--model", model, "alignment checkpoint")->required();
    query->add_option("--id", id, "record id")->required();
    query->add_option("--k", k, "number of neighbours");
    query->add_flag("--exclude-own", exclude_own, "skip entries of the query's own pair");
    query->callback([this] { run_query(); });

    extend = app->add_subcommand("extend", "add the TRAIN records of another dataset");
    common.add(extend);
    extend->add_option("--index", index_path, "existing index file")->required();
    extend->add_option("--data", more, "dataset to add")->required();
    extend->add_option("--model", model, "alignment checkpoint")->required();
    extend->add_option("-o,--out", out, "output index file");
    extend->callback([this] { run_extend(); });
  }

  void run_build() {
    RunConfig cfg = common.load();
    if (fraction) cfg.index_fraction = *fraction;
    const auto t = parse_index_target(target);
    if (!t) throw ParameterError("--target must be x, r or xr");
    const Dataset ds = open_dataset(data);
    cfg.data.z_enc = ds.z_enc;
    cfg.validate();
    const auto m = open_alignment(model, &ds);
    IndexBuildOptions opt;
    opt.fraction = cfg.index_fraction;
    opt.seed = cfg.seed;
    opt.provenance = cfg.provenance();
    const RetrievalIndex idx = build_index(m, ds, *t, opt);
    idx.save(out);
    progress("index", std::to_string(idx.size()) + " entries (target " + target + ") -> " + out);
  }

  void run_query() {
    const Dataset ds = open_dataset(data);
    const auto m = open_alignment(model, &ds);
    const RetrievalIndex idx = open_index(index_path);
    const EmbeddingRecord* rec = nullptr;
    for (const auto& p : ds.pairs) {
      if (p.image.id == id) rec = &p.image;
      if (p.report.id == id) rec = &p.report;
    }
    if (!rec) throw ValidationError("no record with id '" + id + "' in " + data);
    const AlignedVector q = project(m, *rec);
    std::optional<std::string_view> exclude;
    if (exclude_own) exclude = rec->pair_id;
    const NeighborSet ns = idx.query(q.values, k, exclude, rec->id);
    std::printf("rank\tid\tsimilarity\tlabels\n");
    for (std::size_t i = 0; i < ns.size(); ++i) {
      const auto& n = ns.neighbors[i];
      std::printf("%zu\t%s\t%.6f\t%s\n", i + 1, n.id.c_str(), n.similarity, labels_string(n.labels).c_str());
    }
  }

  void run_extend() {
    RunConfig cfg = common.load();
    const Dataset ds = open_dataset(more);
    const auto m = open_alignment(model, &ds);
    RetrievalIndex idx = extend_index(open_index(index_path), m, ds);
    idx.set_provenance(cfg.provenance());
    idx.save(out);
    progress("index", "extended to " + std::to_string(idx.size()) + " entries -> " + out);
  }
};

struct TrainCmd {
  Common common;
  TrainFlags train;
  FusionFlags fusion;
  std::string data, model, index_x, index_r, out = "task.ckpt";
  bool report_map = false;
  bool no_exclusion = false;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "train the (optionally augmented) classifier");
    common.add(app);
    train.add(app);
    fusion.add(app);
    app->add_option("--data", data, "dataset manifest")->required();
    app->add_option("--model", model, "alignment checkpoint")->required();
    app->add_option("--index-x", index_x, "image index (intra branch)");
    app->add_option("--index-r", index_r, "report index (inter branch)");
    app->add_flag("--report-map", report_map, "also learn the query map for augmented report retrieval");
    app->add_flag("--no-exclusion", no_exclusion, "let training queries retrieve their own pair");
    app->add_option("-o,--out", out, "task checkpoint; the log goes to <out>.log.json");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    train.apply(cfg.task_train);
    fusion.apply(cfg);
    const Dataset ds = open_dataset(data);
    cfg.data.z_enc = ds.z_enc;
    cfg.validate();
    const auto m = open_alignment(model, &ds);
    const FusionConfig f = fusion_for(cfg.composition, cfg.fusion);
    std::optional<RetrievalIndex> ix, ir;
    if (f.use_intra || report_map) ix = open_index(index_x.empty() ? "index_x.xidx" : index_x, IndexTarget::X);
    if (f.use_inter || report_map) ir = open_index(index_r.empty() ? "index_r.xidx" : index_r, IndexTarget::R);
    const RetrievalSources sources{ix ? &*ix : nullptr, ir ? &*ir : nullptr};
    ClassifierOptions co;
    co.fusion = f;
    co.random_control = cfg.composition == Composition::Random;
    co.exclude_own_pair = !no_exclusion;
    progress("train", "composition " + to_string(cfg.composition) + ", input dim " +
                          std::to_string(f.output_dim(ds.z_enc)));
    TaskTraining run = train_classifier(ds, m, sources, co, cfg.task_train);
    progress("train", "best epoch " + std::to_string(run.best_epoch) + " of " + std::to_string(run.epochs_run) +
                          ", VAL AUC " + std::to_string(run.log[run.best_epoch - 1].val_auc));
    auto log = stamp(cfg);
    log["training"] = run.log_json();
    if (report_map) {
      const auto rm = train_report_map(run.model, ds, m, sources, cfg.task_train);
      progress("train", "report map best epoch " + std::to_string(rm.best_epoch));
      log["report_map_best_epoch"] = rm.best_epoch;
    }
    auto meta = stamp(cfg);
    meta["composition"] = to_string(cfg.composition);
    save_checkpoint(task_checkpoint(run.model, meta), out);
    write_json(out + ".log.json", log);
  }
};

struct EvalCmd {
  Common common;
  std::string data, model, index_x = "index_x.xidx", index_r = "index_r.xidx", out_dir = "results";
  std::vector<std::string> tasks;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "emit retrieval, classification and report tables");
    common.add(app);
    app->add_option("--data", data, "dataset manifest")->required();
    app->add_option("--model", model, "alignment checkpoint")->required();
    app->add_option("--index-x", index_x, "image index");
    app->add_option("--index-r", index_r, "report index");
    app->add_option("--task", tasks, "task checkpoint(s); one AUC column each");
    app->add_option("-o,--out-dir", out_dir, "output directory");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    const Dataset ds = open_dataset(data);
    cfg.data.z_enc = ds.z_enc;
    cfg.validate();
    const Provenance prov = cfg.provenance();
    const auto m = open_alignment(model, &ds);
    const RetrievalIndex ix = open_index(index_x, IndexTarget::X);
    const RetrievalIndex ir = open_index(index_r, IndexTarget::R);
    const RetrievalSources sources{&ix, &ir};
    const fs::path dir(out_dir);
    nlohmann::ordered_json all = stamp(cfg);

    // Class-based retrieval mAP for the four source -> target directions.
    const auto test = ds.indices(Split::Test);
    std::vector<Labels> labels;
    for (std::size_t r : test) labels.push_back(ds.pairs[r].labels);
    const Matrix qx = project_rows(m, ds, test, Modality::Image);
    const Matrix qr = project_rows(m, ds, test, Modality::Report);
    ExperimentResult retrieval;
    retrieval.name = "retrieval";
    retrieval.provenance = prov;
    const std::pair<const char*, std::pair<const Matrix*, const RetrievalIndex*>> dirs[] = {
        {"x->x", {&qx, &ix}}, {"x->r", {&qx, &ir}}, {"r->r", {&qr, &ir}}, {"r->x", {&qr, &ix}}};
    for (const auto& [name, qi] : dirs) {
      ClassTable t = map_table(rank_queries(*qi.second, *qi.first, labels, cfg.retrieval_k), ds.class_names);
      t.metric = std::string("mAP ") + name;
      retrieval.tables.push_back(t);
    }
    write_text(dir / "table1_retrieval.csv", retrieval.to_csv());
    all["retrieval"] = retrieval.to_json();
    progress("eval", "x->r mAP " + std::to_string(retrieval.tables[1].average));

    // Classification AUC, one column per task model.
    std::vector<TaskModel> models;
    for (const auto& t : tasks) models.push_back(open_task(t));
    if (!models.empty()) {
      ExperimentResult cls;
      cls.name = "classification";
      cls.provenance = prov;
      all["classification"] = nlohmann::ordered_json::array();
      for (std::size_t i = 0; i < models.size(); ++i) {
        ExperimentResult r = evaluate_classifier(models[i], ds, m, sources, fs::path(tasks[i]).stem().string());
        r.provenance = prov;
        ClassTable t = r.tables.front();
        t.metric = "AUC " + fs::path(tasks[i]).stem().string();
        cls.tables.push_back(t);
        all["classification"].push_back(r.to_json());
        progress("eval", t.metric + " macro " + std::to_string(t.average));
      }
      write_text(dir / "table2_classification.csv", cls.to_csv());
    }

    // Report retrieval: baseline, then every task model with a report map.
    std::vector<std::pair<std::string, ReportEvaluation>> reports;
    reports.emplace_back("image_query", evaluate_report_retrieval(ds, Split::Test, m, ir));
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!models[i].report_map) continue;
      reports.emplace_back(fs::path(tasks[i]).stem().string(),
                           evaluate_report_retrieval(ds, Split::Test, m, ir, &models[i], &sources));
    }
    std::ostringstream csv;
    csv << prov.csv_comment() << "\nmetric";
    for (const auto& [name, ev] : reports) csv << "," << name;
    csv << "\n";
    auto row = [&](const std::string& metric, auto get) {
      csv << metric;
      char buf[32];
      for (const auto& [name, ev] : reports) {
        std::snprintf(buf, sizeof buf, ",%.6f", get(ev));
        csv << buf;
      }
      csv << "\n";
    };
    for (int n = 0; n < 4; ++n) row("BLEU-" + std::to_string(n + 1), [n](const ReportEvaluation& e) { return e.text.bleu[n]; });
    row("ROUGE-L", [](const ReportEvaluation& e) { return e.text.rouge_l; });
    row("METEOR (simplified)", [](const ReportEvaluation& e) { return e.text.meteor; });
    row("label-set exact match", [](const ReportEvaluation& e) { return e.exact_match; });
    write_text(dir / "table3_report_retrieval.csv", csv.str());
    all["report_retrieval"] = nlohmann::ordered_json::object();
    for (const auto& [name, ev] : reports) {
      all["report_retrieval"][name] = {{"bleu", ev.text.bleu}, {"rouge_l", ev.text.rouge_l},
                                       {"meteor_simplified", ev.text.meteor}, {"exact_match", ev.exact_match},
                                       {"retrieved", ev.retrieved_ids}};
    }
    progress("eval", "report BLEU-1 " + std::to_string(reports.front().second.text.bleu[0]));
    write_json(dir / "results.json", all);
  }
};

struct AblateCmd {
  Common common;
  TrainFlags train;
  FusionFlags fusion;
  std::string data, model, out_dir = "ablation";
  std::vector<std::string> compositions;
  std::vector<double> fractions;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("ablate", "run the composition x fraction x seed grid");
    common.add(app);
    train.add(app);
    fusion.add(app);
    app->add_option("--data", data, "dataset manifest")->required();
    app->add_option("--model", model, "alignment checkpoint")->required();
    app->add_option("--compositions", compositions, "subset of x, r, xr, random, none")->delimiter(',');
    app->add_option("--fractions", fractions, "index fractions in (0, 1]")->delimiter(',');
    app->add_option("--seeds", seeds, "seeds")->delimiter(',');
    app->add_option("-j,--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    app->add_option("-o,--out-dir", out_dir, "output directory");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    train.apply(cfg.task_train);
    fusion.apply(cfg);
    if (!compositions.empty()) {
      cfg.ablation.compositions.clear();
      for (const auto& s : compositions) {
        const auto p = parse_composition(s);
        if (!p) throw ParameterError("unknown composition '" + s + "'");
        cfg.ablation.compositions.push_back(*p);
      }
    }
    if (!fractions.empty()) cfg.ablation.fractions = fractions;
    if (!seeds.empty()) cfg.ablation.seeds = seeds;
    const Dataset ds = open_dataset(data);
    cfg.data.z_enc = ds.z_enc;
    cfg.validate();
    const auto m = open_alignment(model, &ds);
    const auto cells = ablation_cells(cfg.ablation);
    progress("ablate", std::to_string(cells.size()) + " cells on " + std::to_string(jobs) + " worker(s)");
    const auto results = run_ablations(ds, m, cfg.ablation, cfg.experiment_options(), jobs);
    const fs::path dir(out_dir);
    write_text(dir / "ablation.csv", ablation_csv(results, cfg.provenance()));
    auto j = stamp(cfg);
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& r : results) j["cells"].push_back(r.to_json());
    write_json(dir / "ablation.json", j);
  }
};

struct CrossCmd {
  Common common;
  TrainFlags train;
  FusionFlags fusion;
  std::string source_data, source_model, source_index_x, source_index_r, target_data, out_dir = "cross";
  std::string regime = "all";

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("cross-dataset", "reuse a source retrieval model on a target dataset");
    common.add(app);
    train.add(app);
    fusion.add(app);
    app->add_option("--source-data", source_data, "source dataset manifest")->required();
    app->add_option("--source-model", source_model, "source alignment checkpoint")->required();
    app->add_option("--source-index-x", source_index_x, "source image index")->required();
    app->add_option("--source-index-r", source_index_r, "source report index")->required();
    app->add_option("--target-data", target_data, "target dataset manifest")->required();
    app->add_option("--regime", regime, "scratch, frozen, finetune or all");
    app->add_option("-o,--out-dir", out_dir, "output directory");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig cfg = common.load();
    train.apply(cfg.task_train);
    fusion.apply(cfg);
    std::vector<Regime> regimes;
    if (regime == "all") {
      regimes = {Regime::Scratch, Regime::Frozen, Regime::Finetune};
    } else {
      const auto r = parse_regime(regime);
      if (!r) throw ParameterError("--regime must be scratch, frozen, finetune or all");
      regimes = {*r};
    }
    const Dataset source = open_dataset(source_data);
    const Dataset target = open_dataset(target_data);
    cfg.data.z_enc = target.z_enc;
    cfg.validate();
    SourceArtifacts art{&source, open_alignment(source_model, &source), open_index(source_index_x, IndexTarget::X),
                        open_index(source_index_r, IndexTarget::R)};
    const fs::path dir(out_dir);
    auto j = stamp(cfg);
    j["regimes"] = nlohmann::ordered_json::array();
    for (Regime r : regimes) {
      progress("cross-dataset", to_string(r) + ": " + source.name + " -> " + target.name);
      ExperimentResult res = run_cross_dataset(art, target, r, cfg.experiment_options());
      write_text(dir / ("cross_" + to_string(r) + ".csv"), res.to_csv());
      j["regimes"].push_back(res.to_json());
      progress("cross-dataset", to_string(r) + " macro AUC " + std::to_string(res.table("AUC").average));
    }
    write_json(dir / "cross_dataset.json", j);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xtra: cross-modal retrieval augmentation on precomputed embeddings"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  SynthCmd synth;
  ValidateCmd validate;
  AlignCmd align;
  IndexCmd index;
  TrainCmd train;
  EvalCmd eval;
  AblateCmd ablate;
  CrossCmd cross;
  synth.add(app);
  validate.add(app);
  align.add(app);
  index.add(app);
  train.add(app);
  eval.add(app);
  ablate.add(app);
  cross.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  } catch (const ParameterError& e) {
    std::cerr << "xtra: error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArtifactError& e) {
    std::cerr << "xtra: error: " << e.what() << "\n";
    return kMissing;
  } catch (const Error& e) {
    std::cerr << "xtra: error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "xtra: internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
