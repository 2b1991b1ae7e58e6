#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "faan/eval/scorers.hpp"
#include "faan/train/trainer.hpp"

namespace faan {

using nlohmann::json;

void TrainConfig::validate() const {
  if (k < 1) throw Error("K must be at least 1");
  if (query_batch_size < 1) throw Error("query_batch_size must be at least 1");
  if (negatives_per_query < 1) throw Error("negatives_per_query must be at least 1");
  if (max_steps < 1) throw Error("max_steps must be at least 1");
  if (warmup_steps > max_steps) throw Error("warmup_steps exceeds max_steps");
  if (log_every < 1) throw Error("log_every must be at least 1");
  if (!(margin > 0.0)) throw Error("margin must be positive");
  if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
  if (l2 < 0.0) throw Error("l2 must be nonnegative");
}

namespace {

const char* selection_name(ReferenceSelection s) {
  return s == ReferenceSelection::FileOrder ? "file_order" : "seeded_shuffle";
}

ReferenceSelection parse_selection(const std::string& s) {
  if (s == "file_order") return ReferenceSelection::FileOrder;
  if (s == "seeded_shuffle") return ReferenceSelection::SeededShuffle;
  throw Error("unknown reference selection '" + s + "' (valid: file_order, seeded_shuffle)");
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  j = json{{"k", c.k},
           {"query_batch_size", c.query_batch_size},
           {"negatives_per_query", c.negatives_per_query},
           {"negatives", c.negatives == NegativeStrategy::Uniform ? "uniform" : "candidates"},
           {"max_steps", c.max_steps},
           {"warmup_steps", c.warmup_steps},
           {"eval_every", c.eval_every},
           {"log_every", c.log_every},
           {"margin", c.margin},
           {"learning_rate", c.learning_rate},
           {"l2", c.l2},
           {"l2_entity_embeddings", c.l2_entity_embeddings},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"val_max_queries", c.val_max_queries},
           {"reference_selection", selection_name(c.selection)},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  c.k = j.value("k", c.k);
  c.query_batch_size = j.value("query_batch_size", c.query_batch_size);
  c.negatives_per_query = j.value("negatives_per_query", c.negatives_per_query);
  if (j.contains("negatives")) {
    const auto s = j.at("negatives").get<std::string>();
    if (s == "uniform") c.negatives = NegativeStrategy::Uniform;
    else if (s == "candidates") c.negatives = NegativeStrategy::Candidates;
    else throw Error("unknown negative strategy '" + s + "' (valid: uniform, candidates)");
  }
  c.max_steps = j.value("max_steps", c.max_steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.log_every = j.value("log_every", c.log_every);
  c.margin = j.value("margin", c.margin);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.l2 = j.value("l2", c.l2);
  c.l2_entity_embeddings = j.value("l2_entity_embeddings", c.l2_entity_embeddings);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.val_max_queries = j.value("val_max_queries", c.val_max_queries);
  if (j.contains("reference_selection")) c.selection = parse_selection(j.at("reference_selection").get<std::string>());
  c.seed = j.value("seed", c.seed);
}

double hinge_loss(std::span<const double> positive, std::span<const double> negative, double margin) {
  if (positive.size() != negative.size()) {
    throw Error("hinge_loss: " + std::to_string(negative.size()) + " negative scores for " +
                std::to_string(positive.size()) + " positive scores");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < positive.size(); ++i) total += std::max(0.0, margin + negative[i] - positive[i]);
  return total;
}

double lr_schedule(std::size_t step, double peak, std::size_t warmup_steps, std::size_t max_steps) {
  if (step > max_steps) return 0.0;
  if (step <= warmup_steps) {
    return warmup_steps == 0 ? peak : peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return peak * static_cast<double>(max_steps - step) / static_cast<double>(max_steps - warmup_steps);
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros_like(const ParamStore<Scalar>& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) continue;
    s.m.add(params.names()[i], Tensor<Scalar>(params[i].shape()));
    s.v.add(params.names()[i], Tensor<Scalar>(params[i].shape()));
  }
  return s;
}

template <typename Scalar>
void adam_step(ParamStore<Scalar>& params, AdamState<Scalar>& state, double lr, const AdamConfig& cfg, double l2,
               const std::function<bool(const std::string&)>& l2_mask) {
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) continue;
    const auto& name = params.names()[i];
    if (!state.m.contains(name)) throw Error("adam_step: no moments for '" + name + "'");
    const double decay = (!l2_mask || l2_mask(name)) ? l2 : 0.0;
    adam_update(p.value(), p.grad(), state.m.at(name).value(), state.v.at(name).value(), state.t, lr, cfg, decay);
  }
}

template <typename Scalar>
double l2_penalty(const ParamStore<Scalar>& params, double l2, const std::function<bool(const std::string&)>& mask) {
  if (l2 == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad() || (mask && !mask(params.names()[i]))) continue;
    total += static_cast<double>(params[i].value().squaredNorm());
  }
  return l2 * total;
}

template <typename Scalar>
double parameter_norm(const ParamStore<Scalar>& params) {
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].requires_grad()) total += static_cast<double>(params[i].value().squaredNorm());
  }
  return std::sqrt(total);
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".json";
}

template <typename Scalar>
void save_model(const std::filesystem::path& path, const Model<Scalar>& model, const json& sidecar) {
  json side = sidecar;
  side["model"] = model.config();
  side["precision_bytes"] = sizeof(Scalar);
  save_checkpoint(path, model.params());
  atomic_write(sidecar_path(path), side.dump(1) + "\n");
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Trainer<Scalar>::Trainer(Model<Scalar>& model, const Dataset& data, TrainConfig config)
    : model_(model), data_(data), config_(std::move(config)) {
  config_.validate();
  if (data_.tasks_in(Partition::Train).empty()) throw Error("dataset has no training tasks");
  adam_ = AdamState<Scalar>::zeros_like(model_.params());
}

template <typename Scalar>
bool Trainer<Scalar>::l2_applies(const std::string& name) const {
  return name != "entity_embedding" || config_.l2_entity_embeddings;
}

template <typename Scalar>
std::string Trainer<Scalar>::config_hash() const {
  const std::string text = json{{"model", model_.config()}, {"train", config_}}.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename Scalar>
double Trainer<Scalar>::step() {
  Rng episode_rng = Rng::substream(config_.seed, "episode", step_);
  Rng dropout_rng = Rng::substream(config_.seed, "dropout", step_);
  EpisodeOptions eo;
  eo.k = config_.k;
  eo.query_batch_size = config_.query_batch_size;
  eo.negatives = config_.negatives;
  eo.negatives_per_query = config_.negatives_per_query;
  const Episode episode = sample_episode(data_, Partition::Train, std::nullopt, eo, episode_rng);

  auto& params = model_.params();
  params.zero_grad();
  double hinge = 0.0;
  {
    Tape<Scalar> tape(true);
    try {
      const auto p = model_.bind(tape);
      ForwardContext ctx;
      ctx.training = true;
      ctx.rng = &dropout_rng;
      const auto scores = model_.score_episode(p, episode, ctx);
      const auto loss =
          hinge_loss(scores.positive, scores.negative, static_cast<Scalar>(config_.margin), config_.negatives_per_query);
      hinge = static_cast<double>(loss.scalar());
      if (!std::isfinite(hinge)) throw Error("non-finite loss");
      tape.backward(loss);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " at step " + std::to_string(step_) + "; offending episode:\n" +
                  describe_episode(data_, episode));
    }
  }
  auto mask = [this](const std::string& name) { return l2_applies(name); };
  const double penalty = l2_penalty(params, config_.l2, mask);
  const double lr = lr_schedule(step_ + 1, config_.learning_rate, config_.warmup_steps, config_.max_steps);
  adam_step(params, adam_, lr, AdamConfig{config_.adam_beta1, config_.adam_beta2, config_.adam_eps}, config_.l2, mask);
  ++step_;
  return hinge + penalty;
}

template <typename Scalar>
Metrics Trainer<Scalar>::validate(std::size_t threads) const {
  FaanScorer<Scalar> scorer(model_);
  EvalOptions eo;
  eo.k = config_.k;
  eo.selection = config_.selection;
  eo.seed = config_.seed;
  eo.max_queries_per_relation = config_.val_max_queries;
  eo.threads = threads;
  return evaluate_split(scorer, data_, Partition::Dev, eo).overall;
}

namespace {

std::string format_row(const TrainLogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g", row.step, row.loss, row.lr);
  std::string s = buf;
  if (row.validation) {
    const auto& m = *row.validation;
    std::snprintf(buf, sizeof(buf), "\t%.17g\t%.17g\t%.17g\t%.17g", m.mrr, m.hits1, m.hits5, m.hits10);
    s += buf;
  } else {
    s += "\t\t\t\t";
  }
  return s + "\n";
}

constexpr const char* kLogHeader = "step\tloss\tlr\tval_mrr\tval_hits1\tval_hits5\tval_hits10\n";

// Keeps the header and rows up to `step`, so a resumed run does not repeat rows.
void truncate_log(const std::filesystem::path& path, std::size_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept += line + "\n";
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find('\t'))) <= step) kept += line + "\n";
  }
  in.close();
  atomic_write(path, kept);
}

}  // namespace

template <typename Scalar>
TrainSummary Trainer<Scalar>::run(const std::optional<std::filesystem::path>& out_dir,
                                  const std::function<void(const TrainLogRow&)>& on_row) {
  TrainSummary summary;
  std::ofstream log;
  const bool has_dev = !data_.tasks_in(Partition::Dev).empty();
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    summary.log_path = *out_dir / "train_log.tsv";
    summary.best_checkpoint = *out_dir / "best.ckpt";
    if (step_ == 0 || !std::filesystem::exists(summary.log_path)) {
      atomic_write(summary.log_path, kLogHeader);
    } else {
      truncate_log(summary.log_path, step_);
    }
    log.open(summary.log_path, std::ios::app);
    if (!log) throw Error("cannot append to " + summary.log_path.string());
  }
  auto sidecar = [&](double mrr) {
    return json{{"config_hash", config_hash()}, {"step", step_}, {"val_mrr", mrr}, {"train", config_}};
  };

  while (step_ < config_.max_steps) {
    loss_sum_ += step();
    ++loss_count_;
    const bool eval_now = has_dev && config_.eval_every > 0 &&
                          (step_ % config_.eval_every == 0 || step_ == config_.max_steps);
    if (!(step_ % config_.log_every == 0 || eval_now || step_ == config_.max_steps)) continue;

    TrainLogRow row;
    row.step = step_;
    row.loss = loss_sum_ / static_cast<double>(loss_count_);
    row.lr = lr_schedule(step_, config_.learning_rate, config_.warmup_steps, config_.max_steps);
    loss_sum_ = 0.0;
    loss_count_ = 0;
    if (eval_now) {
      row.validation = validate();
      summary.validated = true;
      if (row.validation->mrr > best_val_mrr_) {
        best_val_mrr_ = row.validation->mrr;
        best_step_ = step_;
        if (out_dir) save_model(summary.best_checkpoint, model_, sidecar(best_val_mrr_));
      }
      if (out_dir) save_state(*out_dir / "state.ckpt");
    }
    if (log) {
      log << format_row(row);
      log.flush();
    }
    if (on_row) on_row(row);
  }
  if (out_dir && (!has_dev || best_val_mrr_ < 0.0)) {
    best_step_ = step_;
    save_model(summary.best_checkpoint, model_, sidecar(best_val_mrr_));
  }
  summary.final_step = step_;
  summary.best_step = best_step_;
  summary.best_val_mrr = best_val_mrr_;
  summary.validated = summary.validated || best_val_mrr_ >= 0.0;
  return summary;
}

template <typename Scalar>
void Trainer<Scalar>::save_state(const std::filesystem::path& path) const {
  ParamStore<Scalar> store = model_.params();
  for (const auto& name : adam_.m.names()) {
    store.add("adam.m/" + name, adam_.m.at(name));
    store.add("adam.v/" + name, adam_.v.at(name));
  }
  save_checkpoint(path, store);
  const json side{{"config_hash", config_hash()},
                  {"step", step_},
                  {"adam_t", adam_.t},
                  {"best_val_mrr", best_val_mrr_},
                  {"best_step", best_step_},
                  {"loss_sum", loss_sum_},
                  {"loss_count", loss_count_},
                  {"model", model_.config()},
                  {"train", config_}};
  atomic_write(sidecar_path(path), side.dump(1) + "\n");
}

template <typename Scalar>
void Trainer<Scalar>::load_state(const std::filesystem::path& path) {
  std::ifstream side_in(sidecar_path(path));
  if (!side_in) throw Error("missing state sidecar " + sidecar_path(path).string());
  const json side = json::parse(side_in);
  if (side.at("config_hash").get<std::string>() != config_hash()) {
    throw Error("state " + path.string() + " was written under a different configuration");
  }
  if (checkpoint_precision(path) != static_cast<int>(sizeof(Scalar))) {
    throw Error("state " + path.string() + " was written at a different precision");
  }
  const auto store = load_checkpoint<Scalar>(path);
  auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& src = store.at(name);
    if (src.shape() != params[i].shape()) throw Error("state tensor '" + name + "' has the wrong shape");
    params[i].value() = src.value();
  }
  for (const auto& name : adam_.m.names()) {
    adam_.m.at(name).value() = store.at("adam.m/" + name).value();
    adam_.v.at(name).value() = store.at("adam.v/" + name).value();
  }
  adam_.t = side.at("adam_t").get<std::size_t>();
  step_ = side.at("step").get<std::size_t>();
  best_val_mrr_ = side.at("best_val_mrr").get<double>();
  best_step_ = side.at("best_step").get<std::size_t>();
  loss_sum_ = side.at("loss_sum").get<double>();
  loss_count_ = side.at("loss_count").get<std::size_t>();
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParamStore<float>&, AdamState<float>&, double, const AdamConfig&, double,
                        const std::function<bool(const std::string&)>&);
template void adam_step(ParamStore<double>&, AdamState<double>&, double, const AdamConfig&, double,
                        const std::function<bool(const std::string&)>&);
template double l2_penalty(const ParamStore<float>&, double, const std::function<bool(const std::string&)>&);
template double l2_penalty(const ParamStore<double>&, double, const std::function<bool(const std::string&)>&);
template double parameter_norm(const ParamStore<float>&);
template double parameter_norm(const ParamStore<double>&);
template void save_model(const std::filesystem::path&, const Model<float>&, const json&);
template void save_model(const std::filesystem::path&, const Model<double>&, const json&);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace faan
