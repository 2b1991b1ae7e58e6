// faan: command-line front end (pretrain, train, eval, inspect-attention,
// make-synthetic). Every run resolves flags over an optional JSON config
// over defaults and records the result next to its outputs.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "faan/core/param_store.hpp"
#include "faan/data/dataset.hpp"
#include "faan/data/neighbor_index.hpp"
#include "faan/data/synthetic.hpp"
#include "faan/eval/metrics.hpp"
#include "faan/eval/scorers.hpp"
#include "faan/model/faan.hpp"
#include "faan/pretrain/transe.hpp"
#include "faan/train/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace faan;

struct Flags {
  std::string config, data, out, precision, variant, report_tsv, checkpoint, relation, query, tail, split,
      load_external, embeddings, extra_triples;
  std::uint64_t seed = 0;
  std::size_t k = 0, steps = 0, eval_every = 0, top = 0;
  bool oracle = false, anti_oracle = false, resume = false;
  CLI::App* app = nullptr;

  bool given(const char* name) const { return app->count(name) > 0; }
};

json default_run_config() {
  ModelConfig model;
  TrainConfig train;
  PretrainConfig pretrain;
  return json{{"data", ""},
              {"out", ""},
              {"seed", 42},
              {"precision", "f64"},
              {"reference_selection", "auto"},
              {"embeddings", ""},
              {"pretrain", pretrain},
              {"model", model},
              {"train", train}};
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

// defaults <- config file <- flags
json resolve(const Flags& f) {
  json cfg = default_run_config();
  if (!f.config.empty()) cfg.merge_patch(read_json(f.config));
  if (f.given("--data")) cfg["data"] = f.data;
  if (f.given("--out")) cfg["out"] = f.out;
  if (f.given("--seed")) cfg["seed"] = f.seed;
  if (f.given("--precision")) cfg["precision"] = f.precision;
  if (f.given("--k")) cfg["train"]["k"] = f.k;
  if (f.given("--steps")) cfg["train"]["max_steps"] = f.steps;
  if (f.given("--eval-every")) cfg["train"]["eval_every"] = f.eval_every;
  if (f.given("--embeddings")) cfg["embeddings"] = f.embeddings;
  if (f.given("--variant")) {
    const VariantConfig named = VariantConfig::named(f.variant);
    VariantConfig v = cfg["model"].contains("variant") ? cfg["model"]["variant"].get<VariantConfig>() : VariantConfig{};
    v.neighbor_mode = named.neighbor_mode;
    v.pair_mode = named.pair_mode;
    v.match_mode = named.match_mode;
    cfg["model"]["variant"] = v;
  }
  const auto precision = cfg.at("precision").get<std::string>();
  if (precision != "f32" && precision != "f64") throw Error("--precision must be f32 or f64");

  // Normalize through the typed configs so the record is complete.
  cfg["model"] = cfg.at("model").get<ModelConfig>();
  cfg["pretrain"] = cfg.at("pretrain").get<PretrainConfig>();
  cfg["pretrain"]["dim"] = cfg["model"]["dim"];
  cfg["train"]["seed"] = cfg.at("seed");
  std::string selection = cfg.at("reference_selection").get<std::string>();
  if (selection == "auto") {
    const auto data = cfg.at("data").get<std::string>();
    selection = !data.empty() && fs::exists(fs::path(data) / "synthetic_spec.json") ? "seeded_shuffle" : "file_order";
  }
  cfg["reference_selection"] = selection;
  cfg["train"]["reference_selection"] = selection;
  cfg["train"] = cfg.at("train").get<TrainConfig>();
  return cfg;
}

std::string require(const json& cfg, const char* key, const char* flag) {
  const auto v = cfg.value(key, std::string());
  if (v.empty()) throw Error(std::string("missing ") + flag);
  return v;
}

void write_run_config(const fs::path& dir, const json& cfg, const std::string& file = "run_config.json") {
  fs::create_directories(dir);
  atomic_write(dir / file, cfg.dump(2) + "\n");
}

NeighborIndex build_neighbors(const Dataset& data, const ModelConfig& model, std::uint64_t seed) {
  return NeighborIndex::build(data.store, data.num_entities(), model.max_neighbors, model.variant.include_inverse, seed);
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename Candidates>
std::string nearest(const std::string& name, const Candidates& names) {
  std::string best;
  std::size_t best_d = static_cast<std::size_t>(-1);
  for (const auto& n : names) {
    const std::size_t d = edit_distance(name, n);
    if (d < best_d) {
      best_d = d;
      best = n;
    }
  }
  return best;
}

RelationId lookup_task_relation(const Dataset& data, const std::string& name) {
  std::vector<std::string> task_names;
  for (const auto& t : data.tasks) task_names.push_back(data.vocab.relations.name(t.relation));
  const auto id = data.vocab.relations.find(name);
  if (!id || !data.find_task(*id)) {
    throw Error("unknown task relation '" + name + "'; did you mean '" + nearest(name, task_names) + "'?");
  }
  return *id;
}

EntityId lookup_entity(const Dataset& data, const std::string& name) {
  const auto id = data.vocab.entities.find(name);
  if (!id) {
    throw Error("unknown entity '" + name + "'; did you mean '" + nearest(name, data.vocab.entities.names()) + "'?");
  }
  return *id;
}

std::vector<Triple> read_triples_tsv(const fs::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Triple> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string h, r, t;
    if (!std::getline(ls, h, '\t') || !std::getline(ls, r, '\t') || !std::getline(ls, t, '\t')) {
      throw Error(path.string() + ":" + std::to_string(no) + ": expected head<TAB>relation<TAB>tail");
    }
    out.push_back({vocab.entities.id(h), vocab.relations.id(r), vocab.entities.id(t)});
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_make_synthetic(const Flags& f) {
  SyntheticSpec spec;
  json cfg;
  if (!f.config.empty()) {
    cfg = read_json(f.config);
    if (cfg.contains("synthetic")) spec = cfg.at("synthetic").get<SyntheticSpec>();
  }
  const std::uint64_t seed = f.given("--seed") ? f.seed : cfg.value("seed", std::uint64_t{42});
  const std::string out = f.given("--out") ? f.out : cfg.value("out", std::string());
  if (out.empty()) throw Error("missing --out");
  make_synthetic(spec, seed, out);
  std::cout << "synthetic dataset written to " << out << "\n";
  return 0;
}

EmbeddingTable obtain_embeddings(const json& cfg, const Dataset& data, const fs::path& out_dir, bool verbose) {
  const auto model = cfg.at("model").get<ModelConfig>();
  const auto path = cfg.value("embeddings", std::string());
  if (!path.empty()) {
    auto table = load_embeddings(path, data.num_entities(), model.dim);
    if (model.variant.neighbor_relation_source == NeighborRelationSource::Pretrained &&
        static_cast<std::size_t>(table.relations.rows()) != data.num_relations()) {
      throw Error(path + ": relation embeddings do not cover the dataset's relations");
    }
    return table;
  }
  PretrainConfig pc = cfg.at("pretrain").get<PretrainConfig>();
  pc.seed = cfg.at("seed").get<std::uint64_t>();
  const auto train = cfg.at("train").get<TrainConfig>();
  const auto triples = pretraining_triples(data, train.k, train.selection, pc.seed);
  const auto guard = LeakageGuard::from_dataset(data, train.k, train.selection, pc.seed);
  if (verbose) std::cout << "pretraining TransE on " << triples.size() << " triples\n";
  auto result = transe_pretrain(triples, data.num_entities(), data.num_relations(), pc, guard, &data.vocab);
  save_embeddings(out_dir / "embeddings.ckpt", result.table);
  return std::move(result.table);
}

int cmd_pretrain(const Flags& f) {
  json cfg = resolve(f);
  const fs::path out = require(cfg, "out", "--out");
  if (f.given("--load-external")) cfg["embeddings"] = f.load_external;
  const Dataset data = load_dataset(require(cfg, "data", "--data"));
  const auto model = cfg.at("model").get<ModelConfig>();
  fs::create_directories(out);

  if (!cfg.value("embeddings", std::string()).empty()) {
    const auto table = load_embeddings(cfg.at("embeddings").get<std::string>(), data.num_entities(), model.dim);
    save_embeddings(out / "embeddings.ckpt", table);
    write_run_config(out, cfg);
    std::cout << "validated external embeddings: " << table.entities.rows() << " x " << table.dim() << "\n";
    return 0;
  }

  PretrainConfig pc = cfg.at("pretrain").get<PretrainConfig>();
  pc.seed = cfg.at("seed").get<std::uint64_t>();
  const auto train = cfg.at("train").get<TrainConfig>();
  auto triples = pretraining_triples(data, train.k, train.selection, pc.seed);
  if (!f.extra_triples.empty()) {
    const auto extra = read_triples_tsv(f.extra_triples, data.vocab);
    triples.insert(triples.end(), extra.begin(), extra.end());
    cfg["extra_triples"] = f.extra_triples;
  }
  const auto guard = LeakageGuard::from_dataset(data, train.k, train.selection, pc.seed);
  const auto result = transe_pretrain(triples, data.num_entities(), data.num_relations(), pc, guard, &data.vocab);
  save_embeddings(out / "embeddings.ckpt", result.table);
  std::ostringstream log;
  log << "step\tloss\n";
  for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\n", i + 1, result.loss_history[i]);
    log << buf;
  }
  atomic_write(out / "pretrain_log.tsv", log.str());
  write_run_config(out, cfg);
  std::cout << "pretrained " << triples.size() << " triples for " << pc.steps << " steps; final loss "
            << (result.loss_history.empty() ? 0.0 : result.loss_history.back()) << "\n";
  return 0;
}

template <typename Scalar>
int run_train(const json& cfg, const Dataset& data, bool resume) {
  const fs::path out = cfg.at("out").get<std::string>();
  const auto model_cfg = cfg.at("model").get<ModelConfig>();
  const auto train_cfg = cfg.at("train").get<TrainConfig>();
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  write_run_config(out, cfg);
  const NeighborIndex neighbors = build_neighbors(data, model_cfg, seed);
  EmbeddingTable table;
  if (resume && cfg.value("embeddings", std::string()).empty() && fs::exists(out / "embeddings.ckpt")) {
    table = load_embeddings(out / "embeddings.ckpt", data.num_entities(), model_cfg.dim);
  } else {
    table = obtain_embeddings(cfg, data, out, true);
  }
  Model<Scalar> model(model_cfg, table, neighbors, seed);
  Trainer<Scalar> trainer(model, data, train_cfg);
  if (resume) {
    trainer.load_state(out / "state.ckpt");
    std::cout << "resumed at step " << trainer.current_step() << "\n";
  }
  const auto summary = trainer.run(out, [](const TrainLogRow& row) {
    std::printf("step %zu  loss %.4f  lr %.3g", row.step, row.loss, row.lr);
    if (row.validation) std::printf("  val MRR %.4f  Hits@10 %.4f", row.validation->mrr, row.validation->hits10);
    std::printf("\n");
    std::fflush(stdout);
  });
  std::cout << "finished at step " << summary.final_step;
  if (summary.validated) std::cout << "; best validation MRR " << summary.best_val_mrr << " at step " << summary.best_step;
  std::cout << "\nbest checkpoint: " << summary.best_checkpoint.string() << "\n";
  return 0;
}

int cmd_train(const Flags& f) {
  const json cfg = resolve(f);
  require(cfg, "out", "--out");
  const Dataset data = load_dataset(require(cfg, "data", "--data"));
  return cfg.at("precision") == "f32" ? run_train<float>(cfg, data, f.resume) : run_train<double>(cfg, data, f.resume);
}

struct LoadedModel {
  ModelConfig config;
  TrainConfig train;
  std::uint64_t seed = 0;
};

LoadedModel read_sidecar(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw Error("checkpoint not found: " + checkpoint.string());
  const auto side_path = sidecar_path(checkpoint);
  if (!fs::exists(side_path)) throw Error("checkpoint sidecar not found: " + side_path.string());
  const json side = read_json(side_path);
  LoadedModel lm;
  lm.config = side.at("model").get<ModelConfig>();
  lm.train = side.at("train").get<TrainConfig>();
  lm.seed = lm.train.seed;
  return lm;
}

Partition parse_split(const std::string& s) {
  const Partition p = parse_partition(s);
  if (p == Partition::Background) throw Error("--split must be train, dev or test");
  return p;
}

template <typename Scalar>
RankReport eval_with_model(const Flags& f, const Dataset& data, const LoadedModel& lm, const EvalOptions& eo,
                           Partition split) {
  const NeighborIndex neighbors = build_neighbors(data, lm.config, lm.seed);
  Model<Scalar> model(lm.config, load_checkpoint<Scalar>(f.checkpoint), neighbors);
  FaanScorer<Scalar> scorer(model);
  return evaluate_split(scorer, data, split, eo);
}

int cmd_eval(const Flags& f) {
  if (f.data.empty()) throw Error("missing --data");
  const Dataset data = load_dataset(f.data);
  const Partition split = parse_split(f.split);
  EvalOptions eo;
  json record{{"data", f.data}, {"split", f.split}};
  RankReport report;
  if (f.oracle || f.anti_oracle) {
    const auto key = SyntheticAnswerKey::load(fs::path(f.data) / "answer_key.json");
    eo.k = f.given("--k") ? f.k : 5;
    eo.seed = f.given("--seed") ? f.seed : 42;
    eo.selection = ReferenceSelection::SeededShuffle;
    OracleScorer scorer(key, data.vocab, f.anti_oracle);
    report = evaluate_split(scorer, data, split, eo);
    record["scorer"] = f.oracle ? "oracle" : "anti_oracle";
  } else {
    if (f.checkpoint.empty()) throw Error("missing --checkpoint");
    const LoadedModel lm = read_sidecar(f.checkpoint);
    eo.k = f.given("--k") ? f.k : lm.train.k;
    eo.seed = f.given("--seed") ? f.seed : lm.train.seed;
    eo.selection = lm.train.selection;
    int bytes = checkpoint_precision(f.checkpoint);
    if (f.given("--precision")) bytes = f.precision == "f32" ? 4 : 8;
    report = bytes == 4 ? eval_with_model<float>(f, data, lm, eo, split) : eval_with_model<double>(f, data, lm, eo, split);
    record["checkpoint"] = f.checkpoint;
    record["precision"] = bytes == 4 ? "f32" : "f64";
  }
  record["k"] = eo.k;
  record["seed"] = eo.seed;
  record["reference_selection"] = eo.selection == ReferenceSelection::FileOrder ? "file_order" : "seeded_shuffle";
  write_report_table(std::cout, report, data.vocab);
  if (!f.report_tsv.empty()) {
    std::ostringstream tsv;
    write_report_tsv(tsv, report, data.vocab);
    const fs::path path(f.report_tsv);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    atomic_write(path, tsv.str());
    atomic_write(path.string() + ".config.json", record.dump(2) + "\n");
  }
  return 0;
}

template <typename Scalar>
int run_inspect(const Flags& f, const Dataset& data, const LoadedModel& lm) {
  const RelationId relation = lookup_task_relation(data, f.relation);
  const EntityId head = lookup_entity(data, f.query);
  const std::size_t k = f.given("--k") ? f.k : lm.train.k;
  const std::uint64_t seed = f.given("--seed") ? f.seed : lm.train.seed;
  const TaskSplit ts = designate_references(*data.find_task(relation), k, lm.train.selection, seed);

  const NeighborIndex neighbors = build_neighbors(data, lm.config, lm.seed);
  Model<Scalar> model(lm.config, load_checkpoint<Scalar>(f.checkpoint), neighbors);
  EntityId tail = 0;
  if (!f.tail.empty()) {
    tail = lookup_entity(data, f.tail);
  } else {
    // Best-scoring candidate when no tail is named.
    const auto& cands = data.candidates.at(relation);
    const auto scores = model.score_candidates(model.encode_references(ts.references), head, cands);
    tail = cands[static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin())];
  }
  const auto report = model.inspect_attention(relation, ts.references, {head, tail});
  write_attention_tsv(std::cout, report, data.vocab, f.top);
  return 0;
}

int cmd_inspect(const Flags& f) {
  if (f.data.empty()) throw Error("missing --data");
  if (f.checkpoint.empty()) throw Error("missing --checkpoint");
  if (f.relation.empty() || f.query.empty()) throw Error("--relation and --query are required");
  const Dataset data = load_dataset(f.data);
  const LoadedModel lm = read_sidecar(f.checkpoint);
  return checkpoint_precision(f.checkpoint) == 4 ? run_inspect<float>(f, data, lm) : run_inspect<double>(f, data, lm);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FAAN few-shot knowledge graph completion"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run config");
    sub->add_option("--data", f.data, "dataset directory");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", f.seed, "master seed");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--k", f.k, "few-shot size K");
    sub->add_option("--variant", f.variant, "faan, a1, a2, a3, b1, b2, c1, c2 or c3");
    sub->add_option("--steps", f.steps, "training steps");
    sub->add_option("--eval-every", f.eval_every, "validation interval");
    sub->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--embeddings", f.embeddings, "pretrained embeddings (checkpoint or .bin)");
  };

  auto* synth = app.add_subcommand("make-synthetic", "write a synthetic dataset with planted structure");
  common(synth);
  auto* pre = app.add_subcommand("pretrain", "pretrain TransE entity and relation embeddings");
  common(pre);
  training(pre);
  pre->add_option("--load-external", f.load_external, "validate and import existing embeddings instead");
  pre->add_option("--extra-triples", f.extra_triples, "additional TSV triples to pretrain on");
  auto* train = app.add_subcommand("train", "meta-train FAAN");
  common(train);
  training(train);
  train->add_flag("--resume", f.resume, "continue from <out>/state.ckpt");
  auto* eval = app.add_subcommand("eval", "rank test queries and report MRR / Hits@N");
  common(eval);
  eval->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  eval->add_option("--split", f.split, "train, dev or test")->default_val("test");
  eval->add_option("--k", f.k, "few-shot size K");
  eval->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  eval->add_option("--report-tsv", f.report_tsv, "machine-readable report");
  eval->add_flag("--oracle", f.oracle, "rank with the synthetic answer key");
  eval->add_flag("--anti-oracle", f.anti_oracle, "rank with the negated answer key");
  auto* inspect = app.add_subcommand("inspect-attention", "dump neighbor and reference attention");
  common(inspect);
  inspect->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  inspect->add_option("--relation", f.relation, "task relation name");
  inspect->add_option("--query", f.query, "query head entity");
  inspect->add_option("--tail", f.tail, "candidate tail (default: best-scoring candidate)");
  inspect->add_option("--k", f.k, "few-shot size K");
  inspect->add_option("--top", f.top, "neighbors per entity (0 = all)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth->parsed()) {
      f.app = synth;
      return cmd_make_synthetic(f);
    }
    if (pre->parsed()) {
      f.app = pre;
      return cmd_pretrain(f);
    }
    if (train->parsed()) {
      f.app = train;
      return cmd_train(f);
    }
    if (eval->parsed()) {
      f.app = eval;
      return cmd_eval(f);
    }
    if (inspect->parsed()) {
      f.app = inspect;
      return cmd_inspect(f);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
