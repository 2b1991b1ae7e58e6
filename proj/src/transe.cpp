#include <cmath>
#include <fstream>
#include <sstream>

#include "faan/core/param_store.hpp"
#include "faan/core/rng.hpp"
#include "faan/pretrain/transe.hpp"
#include "json.hpp"

namespace faan {

using nlohmann::json;

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"dim", c.dim},           {"margin", c.margin},           {"learning_rate", c.learning_rate},
           {"steps", c.steps},       {"batch_size", c.batch_size},   {"neg_per_pos", c.neg_per_pos},
           {"norm", c.norm}};
}

void from_json(const json& j, PretrainConfig& c) {
  c.dim = j.value("dim", c.dim);
  c.margin = j.value("margin", c.margin);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.neg_per_pos = j.value("neg_per_pos", c.neg_per_pos);
  c.norm = j.value("norm", c.norm);
}

LeakageGuard LeakageGuard::from_dataset(const Dataset& data, std::size_t k, ReferenceSelection selection,
                                        std::uint64_t seed) {
  LeakageGuard g;
  for (const auto& task : data.tasks) {
    if (task.split == Partition::Train) continue;
    const auto split = designate_references(task, k, selection, seed);
    for (const auto& q : split.queries) g.held_out_.insert({q.head, task.relation, q.tail});
  }
  // A held-out triple that duplicates a reference stays allowed.
  for (const auto& task : data.tasks) {
    if (task.split == Partition::Train) continue;
    const auto split = designate_references(task, k, selection, seed);
    for (const auto& r : split.references) g.held_out_.erase({r.head, task.relation, r.tail});
  }
  return g;
}

void LeakageGuard::check(std::span<const Triple> triples, const Vocab* vocab) const {
  if (held_out_.empty()) return;
  std::vector<Triple> bad;
  for (const auto& t : triples) {
    if (held_out_.count(t)) bad.push_back(t);
  }
  if (bad.empty()) return;
  std::ostringstream os;
  os << "leakage: " << bad.size() << " validation/test query triple(s) in pretraining input:";
  for (std::size_t i = 0; i < bad.size() && i < 10; ++i) {
    os << ' ';
    if (vocab) {
      os << format_triple(*vocab, bad[i]);
    } else {
      os << '(' << bad[i].head << ", " << bad[i].relation << ", " << bad[i].tail << ')';
    }
  }
  if (bad.size() > 10) os << " ...";
  throw Error(os.str());
}

std::vector<Triple> pretraining_triples(const Dataset& data, std::size_t k, ReferenceSelection selection,
                                        std::uint64_t seed) {
  std::vector<Triple> out = data.store.select(Partition::Background);
  for (const auto& task : data.tasks) {
    if (task.split == Partition::Train) {
      for (const auto& p : task.pairs) out.push_back({p.head, task.relation, p.tail});
    } else {
      const auto split = designate_references(task, k, selection, seed);
      for (const auto& p : split.references) out.push_back({p.head, task.relation, p.tail});
    }
  }
  return out;
}

namespace {

void normalize_row(Matrix<double>& m, Index row) {
  const double n = m.row(row).norm();
  if (n > 0) m.row(row) /= n;
}

}  // namespace

PretrainResult transe_pretrain(std::span<const Triple> triples, std::size_t num_entities, std::size_t num_relations,
                               const PretrainConfig& config, const LeakageGuard& guard, const Vocab* vocab) {
  if (triples.empty()) throw Error("transe_pretrain: empty triple set");
  if (config.dim < 1) throw Error("transe_pretrain: dim must be positive");
  if (config.norm != 1 && config.norm != 2) throw Error("transe_pretrain: norm must be 1 or 2");
  if (num_entities < 2) throw Error("transe_pretrain: need at least two entities");
  guard.check(triples, vocab);
  for (const auto& t : triples) {
    if (t.head < 0 || t.tail < 0 || static_cast<std::size_t>(t.head) >= num_entities ||
        static_cast<std::size_t>(t.tail) >= num_entities || t.relation < 0 ||
        static_cast<std::size_t>(t.relation) >= num_relations) {
      throw Error("transe_pretrain: triple id out of range");
    }
  }

  const Index d = config.dim;
  const double bound = 6.0 / std::sqrt(static_cast<double>(d));
  Rng init = Rng::substream(config.seed, "transe.init");
  PretrainResult result;
  auto& E = result.table.entities;
  auto& R = result.table.relations;
  E.resize(static_cast<Index>(num_entities), d);
  R.resize(static_cast<Index>(num_relations), d);
  for (Index i = 0; i < R.size(); ++i) R.data()[i] = init.uniform(-bound, bound);
  for (Index i = 0; i < E.size(); ++i) E.data()[i] = init.uniform(-bound, bound);
  for (Index r = 0; r < R.rows(); ++r) normalize_row(R, r);
  for (Index e = 0; e < E.rows(); ++e) normalize_row(E, e);

  Rng rng = Rng::substream(config.seed, "transe.sample");
  Matrix<double> gE = Matrix<double>::Zero(E.rows(), d);
  Matrix<double> gR = Matrix<double>::Zero(R.rows(), d);
  std::vector<char> touched(num_entities, 0);
  std::vector<Index> touched_list;
  Eigen::RowVectorXd diff_pos(d), diff_neg(d), u_pos(d), u_neg(d);

  auto direction = [&](const Eigen::RowVectorXd& diff, Eigen::RowVectorXd& u) {
    if (config.norm == 2) {
      const double n = diff.norm();
      u = n > 0 ? Eigen::RowVectorXd(diff / n) : Eigen::RowVectorXd::Zero(d);
      return n;
    }
    u = diff.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    return diff.lpNorm<1>();
  };
  auto touch = [&](Index e) {
    if (!touched[static_cast<std::size_t>(e)]) {
      touched[static_cast<std::size_t>(e)] = 1;
      touched_list.push_back(e);
    }
  };

  const std::size_t batch = std::min(config.batch_size, triples.size());
  result.loss_history.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const Triple& pos = triples[rng.index(triples.size())];
      for (std::size_t n = 0; n < config.neg_per_pos; ++n) {
        Triple neg = pos;
        const bool corrupt_head = rng.uniform() < 0.5;
        EntityId& slot = corrupt_head ? neg.head : neg.tail;
        auto draw = static_cast<EntityId>(rng.index(num_entities - 1));
        slot = draw >= slot ? draw + 1 : draw;

        diff_pos = E.row(pos.head) + R.row(pos.relation) - E.row(pos.tail);
        diff_neg = E.row(neg.head) + R.row(neg.relation) - E.row(neg.tail);
        const double dp = direction(diff_pos, u_pos);
        const double dn = direction(diff_neg, u_neg);
        const double term = config.margin + dp - dn;
        if (term <= 0) continue;
        loss += term;
        gE.row(pos.head) += u_pos;
        gE.row(pos.tail) -= u_pos;
        gR.row(pos.relation) += u_pos;
        gE.row(neg.head) -= u_neg;
        gE.row(neg.tail) += u_neg;
        gR.row(neg.relation) -= u_neg;
        touch(pos.head);
        touch(pos.tail);
        touch(neg.head);
        touch(neg.tail);
      }
    }
    const double scale = config.learning_rate / static_cast<double>(batch);
    for (Index e : touched_list) {
      E.row(e) -= scale * gE.row(e);
      gE.row(e).setZero();
      normalize_row(E, e);
      touched[static_cast<std::size_t>(e)] = 0;
    }
    touched_list.clear();
    R -= scale * gR;
    gR.setZero();
    result.loss_history.push_back(loss / static_cast<double>(batch * config.neg_per_pos));
  }
  return result;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  ParamStore<double> store;
  store.add("entity_embedding", Tensor<double>::from_matrix(table.entities));
  store.add("relation_embedding", Tensor<double>::from_matrix(table.relations));
  save_checkpoint(path, store, 8);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, std::size_t expected_entities, Index expected_dim) {
  EmbeddingTable table;
  if (path.extension() == ".bin") {
    auto sidecar = path;
    sidecar.replace_extension(".json");
    std::ifstream meta_in(sidecar);
    if (!meta_in) throw Error("missing sidecar " + sidecar.string() + " for raw embedding matrix");
    const auto meta = nlohmann::json::parse(meta_in);
    const auto dim = meta.at("dim").get<Index>();
    const auto count = meta.at("count").get<Index>();
    if (dim < 1 || count < 0) throw Error(sidecar.string() + ": bad dim/count");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<float> raw(static_cast<std::size_t>(dim * count));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!in) throw Error(path.string() + ": file shorter than count x dim float32 values");
    if (in.peek() != std::char_traits<char>::eof()) throw Error(path.string() + ": trailing bytes after matrix");
    table.entities = Eigen::Map<const Matrix<float>>(raw.data(), count, dim).cast<double>();
  } else {
    auto store = load_checkpoint<double>(path);
    table.entities = store.at("entity_embedding").value();
    if (store.contains("relation_embedding")) table.relations = store.at("relation_embedding").value();
  }
  if (static_cast<std::size_t>(table.entities.rows()) != expected_entities) {
    throw Error(path.string() + ": embedding has " + std::to_string(table.entities.rows()) + " rows, dataset has " +
                std::to_string(expected_entities) + " entities");
  }
  if (expected_dim > 0 && table.entities.cols() != expected_dim) {
    throw Error(path.string() + ": embedding dim " + std::to_string(table.entities.cols()) + " != configured " +
                std::to_string(expected_dim));
  }
  if (!table.entities.allFinite()) throw Error(path.string() + ": non-finite embedding values");
  return table;
}

}  // namespace faan
