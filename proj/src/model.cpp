#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "faan/model/faan.hpp"

namespace faan {

RowVector task_relation_embed(const RowVector& h, const RowVector& t) {
  if (h.size() != t.size()) throw Error("task_relation_embed: dimension mismatch");
  return t - h;
}

double neighbor_relevance(const RowVector& r, const RowVector& r_nbr, const Eigen::MatrixXd& W, double b) {
  if (W.rows() != r.size() || W.cols() != r_nbr.size()) throw Error("neighbor_relevance: dimension mismatch");
  return (r * W).dot(r_nbr) + b;
}

double match_score(const RowVector& q, const RowVector& g) {
  if (q.size() != g.size()) throw Error("match_score: dimension mismatch");
  return q.dot(g);
}

Aggregate aggregate_references(const RowVector& q, const Eigen::MatrixXd& refs, MatchMode mode) {
  const Index k = refs.rows();
  if (k == 0) throw Error("empty reference set");
  if (refs.cols() != q.size()) throw Error("aggregate_references: dimension mismatch");
  Aggregate out;
  out.beta.assign(static_cast<std::size_t>(k), 0.0);
  const Eigen::VectorXd delta = refs * q.transpose();
  switch (mode) {
    case MatchMode::Adaptive: {
      const Eigen::ArrayXd e = (delta.array() - delta.maxCoeff()).exp();
      const Eigen::VectorXd beta = (e / e.sum()).matrix();
      for (Index i = 0; i < k; ++i) out.beta[static_cast<std::size_t>(i)] = beta(i);
      out.g = beta.transpose() * refs;
      break;
    }
    case MatchMode::Mean:
      std::fill(out.beta.begin(), out.beta.end(), 1.0 / static_cast<double>(k));
      out.g = refs.colwise().mean();
      break;
    case MatchMode::MaxRelevance: {
      Index best = 0;
      delta.maxCoeff(&best);
      out.beta[static_cast<std::size_t>(best)] = 1.0;
      out.g = refs.row(best);
      break;
    }
    case MatchMode::Lstm:
      throw Error("aggregate_references: the LSTM matcher needs model weights; use Model::match");
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<Index>>> parameter_layout(const ModelConfig& config,
                                                                         std::size_t num_entities,
                                                                         std::size_t num_relations) {
  const Index d = config.dim;
  const auto& v = config.variant;
  std::vector<std::pair<std::string, std::vector<Index>>> out;
  out.push_back({"entity_embedding", {static_cast<Index>(num_entities), d}});
  if (v.neighbor_relation_source == NeighborRelationSource::Pretrained && v.neighbor_mode != NeighborMode::MeanPool &&
      v.neighbor_mode != NeighborMode::FixedAttention) {
    out.push_back({"relation_embedding", {static_cast<Index>(num_relations), d}});
  }
  if (v.neighbor_mode == NeighborMode::Adaptive || v.neighbor_mode == NeighborMode::NeighborsOnly) {
    out.push_back({"nbr.W", {d, d}});
    out.push_back({"nbr.b", {}});
  }
  if (v.neighbor_mode == NeighborMode::FixedAttention) out.push_back({"nbr.fixed_attn", {d}});
  if (v.neighbor_mode != NeighborMode::NeighborsOnly) out.push_back({"nbr.W1", {d, d}});
  out.push_back({"nbr.W2", {d, d}});

  if (v.pair_mode == PairMode::Concat) {
    out.push_back({"pair.concat_w", {2 * d, d}});
    out.push_back({"pair.concat_b", {d}});
  } else {
    out.push_back({"pair.mask", {d}});
    if (v.pair_mode == PairMode::Transformer) out.push_back({"pair.pos", {3, d}});
    const Index f = config.ffn_multiplier * d;
    for (Index l = 0; l < config.layers; ++l) {
      const std::string p = "pair.layer" + std::to_string(l) + ".";
      for (const char* m : {"wq", "wk", "wv", "wo"}) {
        out.push_back({p + m, {d, d}});
        out.push_back({p + "b" + (m + 1), {d}});
      }
      out.push_back({p + "ln1_g", {d}});
      out.push_back({p + "ln1_b", {d}});
      out.push_back({p + "w_ff1", {d, f}});
      out.push_back({p + "b_ff1", {f}});
      out.push_back({p + "w_ff2", {f, d}});
      out.push_back({p + "b_ff2", {d}});
      out.push_back({p + "ln2_g", {d}});
      out.push_back({p + "ln2_b", {d}});
    }
  }
  if (v.match_mode == MatchMode::Lstm) {
    out.push_back({"lstm.wx", {d, 8 * d}});
    out.push_back({"lstm.wh", {2 * d, 8 * d}});
    out.push_back({"lstm.b", {8 * d}});
  }
  return out;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename Scalar>
Model<Scalar>::Model(ModelConfig config, const EmbeddingTable& pretrained, const NeighborIndex& neighbors,
                     std::uint64_t seed)
    : config_(std::move(config)), neighbors_(&neighbors) {
  config_.validate();
  if (pretrained.entities.cols() != config_.dim) {
    throw Error("pretrained embedding dim " + std::to_string(pretrained.entities.cols()) + " != model dim " +
                std::to_string(config_.dim));
  }
  if (static_cast<std::size_t>(pretrained.entities.rows()) != neighbors.num_entities()) {
    throw Error("pretrained embeddings cover " + std::to_string(pretrained.entities.rows()) +
                " entities, neighbor index " + std::to_string(neighbors.num_entities()));
  }
  init_parameters(pretrained, seed);
}

template <typename Scalar>
Model<Scalar>::Model(ModelConfig config, ParamStore<Scalar> params, const NeighborIndex& neighbors)
    : config_(std::move(config)), params_(std::move(params)), neighbors_(&neighbors) {
  config_.validate();
  check_layout();
}

template <typename Scalar>
void Model<Scalar>::init_parameters(const EmbeddingTable& pretrained, std::uint64_t seed) {
  const auto layout = parameter_layout(config_, static_cast<std::size_t>(pretrained.entities.rows()),
                                       static_cast<std::size_t>(pretrained.relations.rows()));
  Rng rng = Rng::substream(seed, "init");
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(config_.dim));
  for (const auto& [name, shape] : layout) {
    Tensor<Scalar> t(shape);
    auto& m = t.value();
    if (name == "entity_embedding") {
      m = pretrained.entities.template cast<Scalar>();
      t.set_requires_grad(!config_.variant.freeze_embeddings);
      params_.add(name, std::move(t));
      continue;
    }
    if (name == "relation_embedding") {
      if (pretrained.relations.cols() != config_.dim) {
        throw Error("pretrained relation embeddings are required for neighbor_relation_source=pretrained");
      }
      m = pretrained.relations.template cast<Scalar>();
      params_.add(name, std::move(t));
      continue;
    }
    if (name == "pair.mask" || name == "pair.pos" || name == "nbr.fixed_attn") {
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal(0.0, embed_std));
    } else if (ends_with(name, "_g")) {
      m.setOnes();
    } else if (shape.size() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    t.set_requires_grad(true);
    params_.add(name, std::move(t));
  }
}

template <typename Scalar>
void Model<Scalar>::check_layout() const {
  if (!params_.contains("entity_embedding")) throw Error("checkpoint lacks entity_embedding");
  const auto num_entities = static_cast<std::size_t>(params_.at("entity_embedding").rows());
  const std::size_t num_relations =
      params_.contains("relation_embedding") ? static_cast<std::size_t>(params_.at("relation_embedding").rows()) : 0;
  if (num_entities != neighbors_->num_entities()) {
    throw Error("checkpoint has " + std::to_string(num_entities) + " entities, dataset has " +
                std::to_string(neighbors_->num_entities()));
  }
  const auto layout = parameter_layout(config_, num_entities, num_relations);
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw Error("checkpoint lacks parameter '" + name + "' required by the config");
    const auto& t = params_.at(name);
    const auto [rows, cols] = Tensor<Scalar>::storage_dims(shape);
    if (t.shape() != shape || t.rows() != rows || t.cols() != cols) {
      throw Error("parameter '" + name + "' has the wrong shape");
    }
  }
  if (layout.size() != params_.size()) throw Error("checkpoint holds parameters the config does not use");
}

template <typename Scalar>
template <typename Store>
typename Model<Scalar>::Bound Model<Scalar>::bind_impl(Tape<Scalar>& tape, Store& params, const ModelConfig& config) {
  Bound b;
  auto get = [&](const std::string& name) { return params.contains(name) ? tape.parameter(params.at(name)) : V(); };
  b.entity = get("entity_embedding");
  b.relation = get("relation_embedding");
  b.W = get("nbr.W");
  b.b = get("nbr.b");
  b.W1 = get("nbr.W1");
  b.W2 = get("nbr.W2");
  b.fixed_attn = get("nbr.fixed_attn");
  b.mask = get("pair.mask");
  b.pos = get("pair.pos");
  b.concat_w = get("pair.concat_w");
  b.concat_b = get("pair.concat_b");
  if (config.variant.pair_mode != PairMode::Concat) {
    for (Index l = 0; l < config.layers; ++l) {
      const std::string p = "pair.layer" + std::to_string(l) + ".";
      Layer L;
      L.wq = get(p + "wq");
      L.bq = get(p + "bq");
      L.wk = get(p + "wk");
      L.bk = get(p + "bk");
      L.wv = get(p + "wv");
      L.bv = get(p + "bv");
      L.wo = get(p + "wo");
      L.bo = get(p + "bo");
      L.ln1_g = get(p + "ln1_g");
      L.ln1_b = get(p + "ln1_b");
      L.w_ff1 = get(p + "w_ff1");
      L.b_ff1 = get(p + "b_ff1");
      L.w_ff2 = get(p + "w_ff2");
      L.b_ff2 = get(p + "b_ff2");
      L.ln2_g = get(p + "ln2_g");
      L.ln2_b = get(p + "ln2_b");
      b.layers.push_back(L);
    }
  }
  b.lstm_wx = get("lstm.wx");
  b.lstm_wh = get("lstm.wh");
  b.lstm_b = get("lstm.b");
  return b;
}

template <typename Scalar>
typename Model<Scalar>::Bound Model<Scalar>::bind(Tape<Scalar>& tape) {
  return bind_impl(tape, params_, config_);
}

template <typename Scalar>
typename Model<Scalar>::Bound Model<Scalar>::bind(Tape<Scalar>& tape) const {
  return bind_impl(tape, params_, config_);
}

namespace {

template <typename Scalar>
Var<Scalar> apply_dropout(const Var<Scalar>& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training || rate == 0.0) return x;
  if (!ctx.rng) throw Error("training forward pass with dropout needs a random stream");
  return dropout(x, rate, true, *ctx.rng);
}

std::vector<Index> iota_index(Index start, Index count) {
  std::vector<Index> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_entities(const Bound& p, std::span<const EntityId> entities, const V& self,
                                           const V& task_relations, const ForwardContext& ctx) const {
  const auto n = static_cast<Index>(entities.size());
  const Index d = config_.dim;
  if (self.rows() != n || self.cols() != d || task_relations.rows() != n || task_relations.cols() != d) {
    throw Error("encode_entities: expected " + std::to_string(n) + "x" + std::to_string(d) + " inputs");
  }
  const auto& variant = config_.variant;

  std::vector<Index> owner, nbr_entity, nbr_relation, offsets{0};
  std::vector<NeighborRecord> records;
  Matrix<Scalar> empty_mask = Matrix<Scalar>::Zero(n, d);
  bool any_empty = false;
  for (Index s = 0; s < n; ++s) {
    const auto recs = neighbors_->neighbors(entities[static_cast<std::size_t>(s)]);
    for (const auto& r : recs) {
      owner.push_back(s);
      nbr_entity.push_back(r.entity);
      nbr_relation.push_back(r.relation);
      if (ctx.trace) records.push_back(r);
    }
    offsets.push_back(static_cast<Index>(owner.size()));
    if (recs.empty()) {
      any_empty = true;
      empty_mask.row(s).setOnes();
    }
  }

  V context;
  std::vector<double> alpha_trace;
  if (owner.empty()) {
    context = self;
  } else {
    Tape<Scalar>& tape = *self.tape();
    const V En = gather_rows(p.entity, nbr_entity);
    V alpha;
    if (variant.neighbor_mode == NeighborMode::MeanPool) {
      Matrix<Scalar> uniform(static_cast<Index>(owner.size()), 1);
      for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const Index len = offsets[s + 1] - offsets[s];
        for (Index j = offsets[s]; j < offsets[s + 1]; ++j) uniform(j, 0) = Scalar(1) / static_cast<Scalar>(len);
      }
      alpha = tape.constant(std::move(uniform));
    } else {
      V scores;
      if (variant.neighbor_mode == NeighborMode::FixedAttention) {
        scores = matmul_nt(En, p.fixed_attn);
      } else {
        V Rn;
        if (variant.neighbor_relation_source == NeighborRelationSource::Translated) {
          Rn = sub(En, gather_rows(self, owner));
        } else {
          Matrix<Scalar> sign(static_cast<Index>(owner.size()), d);
          std::size_t j = 0;
          for (Index s = 0; s < n; ++s) {
            for (const auto& r : neighbors_->neighbors(entities[static_cast<std::size_t>(s)])) {
              sign.row(static_cast<Index>(j++)).setConstant(r.direction == Direction::Out ? Scalar(1) : Scalar(-1));
            }
          }
          Rn = mask_mul(gather_rows(p.relation, nbr_relation), std::move(sign));
        }
        scores = add_row(rowwise_dot(gather_rows(matmul(task_relations, p.W), owner), Rn), p.b);
      }
      alpha = segment_softmax(scores, offsets);
    }
    if (ctx.trace) {
      const auto& a = alpha.value();
      alpha_trace.assign(a.data(), a.data() + a.size());
    }
    context = segment_weighted_sum(alpha, En, offsets);
    if (any_empty) context = add(context, mask_mul(self, std::move(empty_mask)));
  }

  if (ctx.trace) {
    ctx.trace->slots.assign(entities.begin(), entities.end());
    ctx.trace->offsets = offsets;
    ctx.trace->records = std::move(records);
    ctx.trace->alpha = std::move(alpha_trace);
  }

  V f = variant.neighbor_mode == NeighborMode::NeighborsOnly
            ? relu(matmul_nt(context, p.W2))
            : relu(add(matmul_nt(self, p.W1), matmul_nt(context, p.W2)));
  return apply_dropout(f, config_.dropout, ctx);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_pairs(const Bound& p, std::span<const EntityPair> pairs,
                                        const ForwardContext& ctx) const {
  const auto n = static_cast<Index>(pairs.size());
  if (n == 0) throw Error("encode_pairs: no pairs");
  std::vector<Index> heads, tails;
  std::vector<EntityId> slots;
  heads.reserve(pairs.size());
  tails.reserve(pairs.size());
  for (const auto& pr : pairs) {
    heads.push_back(pr.head);
    tails.push_back(pr.tail);
  }
  for (auto h : heads) slots.push_back(static_cast<EntityId>(h));
  for (auto t : tails) slots.push_back(static_cast<EntityId>(t));
  const V H = gather_rows(p.entity, heads);
  const V T = gather_rows(p.entity, tails);
  const V R = sub(T, H);
  const V F = encode_entities(p, slots, concat_rows({H, T}), concat_rows({R, R}), ctx);

  if (config_.variant.pair_mode == PairMode::Concat) {
    const V joined = concat_cols(gather_rows(F, iota_index(0, n)), gather_rows(F, iota_index(n, n)));
    return add_row(matmul(joined, p.concat_w), p.concat_b);
  }

  std::vector<Index> seq;
  seq.reserve(static_cast<std::size_t>(3 * n));
  for (Index i = 0; i < n; ++i) {
    seq.push_back(i);
    seq.push_back(2 * n);
    seq.push_back(n + i);
  }
  V x = gather_rows(concat_rows({F, p.mask}), std::move(seq));
  if (config_.variant.pair_mode == PairMode::Transformer) {
    std::vector<Index> pos(static_cast<std::size_t>(3 * n));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<Index>(i % 3);
    x = add(x, gather_rows(p.pos, std::move(pos)));
  }
  const double rate = config_.dropout;
  for (const auto& L : p.layers) {
    const V q = add_row(matmul(x, L.wq), L.bq);
    const V k = add_row(matmul(x, L.wk), L.bk);
    const V v = add_row(matmul(x, L.wv), L.bv);
    Matrix<Scalar> drop;
    if (ctx.training && rate > 0.0) {
      if (!ctx.rng) throw Error("training forward pass with dropout needs a random stream");
      drop = dropout_mask<Scalar>(n * config_.heads * 3, 3, rate, *ctx.rng);
    }
    const V attn = grouped_attention(q, k, v, Index{3}, config_.heads, std::move(drop));
    x = layer_norm_rows(add(x, add_row(matmul(attn, L.wo), L.bo)), L.ln1_g, L.ln1_b);
    V ff = add_row(matmul(relu(add_row(matmul(x, L.w_ff1), L.b_ff1)), L.w_ff2), L.b_ff2);
    ff = apply_dropout(ff, rate, ctx);
    x = layer_norm_rows(add(x, ff), L.ln2_g, L.ln2_b);
  }
  std::vector<Index> mid(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) mid[static_cast<std::size_t>(i)] = 3 * i + 1;
  return gather_rows(x, std::move(mid));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::match(const Bound& p, const V& queries, const V& references,
                                 const ForwardContext& ctx) const {
  const Index k = references.rows();
  const Index n = queries.rows();
  if (k == 0) throw Error("empty reference set");
  if (queries.cols() != references.cols()) throw Error("match: dimension mismatch");
  const Index d = queries.cols();
  auto record_beta = [&](const Matrix<Scalar>& beta) {
    if (ctx.trace) ctx.trace->beta = beta.template cast<double>();
  };

  switch (config_.variant.match_mode) {
    case MatchMode::Adaptive: {
      const V beta = softmax_rows(matmul_nt(queries, references));
      record_beta(beta.value());
      return rowwise_dot(queries, matmul(beta, references));
    }
    case MatchMode::Mean: {
      record_beta(Matrix<Scalar>::Constant(n, k, Scalar(1) / static_cast<Scalar>(k)));
      const V g = gather_rows(mean_rows(references), std::vector<Index>(static_cast<std::size_t>(n), 0));
      return rowwise_dot(queries, g);
    }
    case MatchMode::MaxRelevance: {
      const Matrix<Scalar> delta = queries.value() * references.value().transpose();
      std::vector<Index> best(static_cast<std::size_t>(n));
      Matrix<Scalar> onehot = Matrix<Scalar>::Zero(n, k);
      for (Index i = 0; i < n; ++i) {
        Index j = 0;
        delta.row(i).maxCoeff(&j);
        best[static_cast<std::size_t>(i)] = j;
        onehot(i, j) = Scalar(1);
      }
      record_beta(onehot);
      return rowwise_dot(queries, gather_rows(references, std::move(best)));
    }
    case MatchMode::Lstm: {
      Tape<Scalar>& tape = *queries.tape();
      const V mean = gather_rows(mean_rows(references), std::vector<Index>(static_cast<std::size_t>(n), 0));
      V h = tape.constant(Matrix<Scalar>::Zero(n, 2 * d));
      V c = tape.constant(Matrix<Scalar>::Zero(n, 2 * d));
      const V qx = matmul(queries, p.lstm_wx);
      V hq = queries;
      for (Index step = 0; step < config_.lstm_steps; ++step) {
        const V gates = add_row(add(qx, matmul(h, p.lstm_wh)), p.lstm_b);
        const V i = sigmoid(slice_cols(gates, 0, 2 * d));
        const V f = sigmoid(slice_cols(gates, 2 * d, 2 * d));
        const V g = tanh(slice_cols(gates, 4 * d, 2 * d));
        const V o = sigmoid(slice_cols(gates, 6 * d, 2 * d));
        c = add(cwise_mul(f, c), cwise_mul(i, g));
        const V hn = cwise_mul(o, tanh(c));
        hq = add(queries, slice_cols(hn, 0, d));
        const V beta = softmax_rows(matmul_nt(hq, references));
        record_beta(beta.value());
        h = concat_cols(hq, matmul(beta, references));
      }
      return rowwise_dot(hq, mean);
    }
  }
  throw Error("match: unknown mode");
}

template <typename Scalar>
typename Model<Scalar>::EpisodeScores Model<Scalar>::score_episode(const Bound& p, const Episode& episode,
                                                                   const ForwardContext& ctx) const {
  const auto k = static_cast<Index>(episode.references.size());
  const auto nq = static_cast<Index>(episode.queries.size());
  if (k == 0) throw Error("empty reference set");
  if (nq == 0) throw Error("episode has no queries");
  if (episode.negatives.size() != episode.queries.size() * episode.negatives_per_query) {
    throw Error("episode negatives do not match its queries");
  }
  std::vector<EntityPair> pairs(episode.references.begin(), episode.references.end());
  pairs.insert(pairs.end(), episode.queries.begin(), episode.queries.end());
  for (std::size_t i = 0; i < episode.negatives.size(); ++i) {
    pairs.push_back({episode.queries[i / episode.negatives_per_query].head, episode.negatives[i]});
  }
  const V z = encode_pairs(p, pairs, ctx);
  const V refs = gather_rows(z, iota_index(0, k));
  EpisodeScores out;
  out.negative = match(p, gather_rows(z, iota_index(k + nq, static_cast<Index>(episode.negatives.size()))), refs, ctx);
  out.positive = match(p, gather_rows(z, iota_index(k, nq)), refs, ctx);
  return out;
}

template <typename Scalar>
Matrix<Scalar> Model<Scalar>::encode_references(std::span<const EntityPair> references) const {
  if (references.empty()) throw Error("empty reference set");
  Tape<Scalar> tape(false);
  const Bound p = bind(tape);
  return encode_pairs(p, references, {}).value();
}

template <typename Scalar>
std::vector<Scalar> Model<Scalar>::score_candidates(const MatrixType& references, EntityId head,
                                                    std::span<const EntityId> candidates, std::size_t chunk) const {
  if (candidates.empty()) throw Error("score_candidates: empty candidate list");
  if (references.rows() == 0) throw Error("empty reference set");
  if (chunk == 0) chunk = candidates.size();
  std::vector<Scalar> out;
  out.reserve(candidates.size());
  std::vector<EntityPair> pairs;
  for (std::size_t start = 0; start < candidates.size(); start += chunk) {
    const std::size_t end = std::min(candidates.size(), start + chunk);
    pairs.clear();
    for (std::size_t i = start; i < end; ++i) pairs.push_back({head, candidates[i]});
    Tape<Scalar> tape(false);
    const Bound p = bind(tape);
    const V q = encode_pairs(p, pairs, {});
    const V phi = match(p, q, tape.constant(references), {});
    const auto& v = phi.value();
    out.insert(out.end(), v.data(), v.data() + v.size());
  }
  return out;
}

template <typename Scalar>
std::vector<double> Model<Scalar>::neighbor_attention(EntityId entity, const RowVector& task_relation) const {
  if (task_relation.size() != config_.dim) throw Error("neighbor_attention: dimension mismatch");
  Tape<Scalar> tape(false);
  const Bound p = bind(tape);
  ForwardTrace trace;
  ForwardContext ctx;
  ctx.trace = &trace;
  const EntityId ids[] = {entity};
  const V self = gather_rows(p.entity, {static_cast<Index>(entity)});
  const V r = tape.constant(task_relation.cast<Scalar>());
  encode_entities(p, ids, self, r, ctx);
  return trace.alpha;
}

template <typename Scalar>
AttentionReport Model<Scalar>::inspect_attention(RelationId relation, std::span<const EntityPair> references,
                                                 EntityPair query) const {
  if (references.empty()) throw Error("empty reference set");
  std::vector<EntityPair> pairs(references.begin(), references.end());
  pairs.push_back(query);
  const auto k = static_cast<Index>(references.size());
  const auto n = static_cast<std::size_t>(k + 1);

  Tape<Scalar> tape(false);
  const Bound p = bind(tape);
  ForwardTrace trace;
  ForwardContext ctx;
  ctx.trace = &trace;
  const V z = encode_pairs(p, pairs, ctx);
  const V phi = match(p, gather_rows(z, {k}), gather_rows(z, iota_index(0, k)), ctx);

  AttentionReport report;
  report.relation = relation;
  report.query = query;
  report.score = static_cast<double>(phi.scalar());
  for (std::size_t s = 0; s < trace.slots.size(); ++s) {
    const std::size_t pair = s % n;
    EntityAttention ea;
    ea.role = (pair + 1 == n ? std::string("query") : "ref" + std::to_string(pair + 1)) + (s < n ? ".head" : ".tail");
    ea.entity = trace.slots[s];
    for (auto j = trace.offsets[s]; j < trace.offsets[s + 1]; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      ea.neighbors.push_back({trace.records[ju], trace.alpha.empty() ? 0.0 : trace.alpha[ju]});
    }
    std::stable_sort(ea.neighbors.begin(), ea.neighbors.end(),
                     [](const NeighborWeight& a, const NeighborWeight& b) { return a.weight > b.weight; });
    report.entities.push_back(std::move(ea));
  }
  for (Index j = 0; j < k; ++j) {
    report.references.push_back({static_cast<std::size_t>(j), references[static_cast<std::size_t>(j)], trace.beta(0, j)});
  }
  std::stable_sort(report.references.begin(), report.references.end(),
                   [](const ReferenceWeight& a, const ReferenceWeight& b) { return a.weight > b.weight; });
  return report;
}

void write_attention_tsv(std::ostream& out, const AttentionReport& report, const Vocab& vocab, std::size_t top) {
  const auto& ents = vocab.entities;
  const auto& rels = vocab.relations;
  char buf[64];
  out << "# relation\t" << rels.name(report.relation) << "\tquery\t" << ents.name(report.query.head) << '\t'
      << ents.name(report.query.tail);
  std::snprintf(buf, sizeof(buf), "%.9g", report.score);
  out << "\tscore\t" << buf << '\n';
  for (const auto& ea : report.entities) {
    out << "# alpha\t" << ea.role << '\t' << ents.name(ea.entity) << '\n';
    const std::size_t rows = top > 0 ? std::min(top, ea.neighbors.size()) : ea.neighbors.size();
    for (std::size_t i = 0; i < rows; ++i) {
      const auto& nw = ea.neighbors[i];
      const char* arrow = nw.record.direction == Direction::Out ? " -> " : " <- ";
      std::snprintf(buf, sizeof(buf), "%.9f", nw.weight);
      out << rels.name(nw.record.relation) << arrow << ents.name(nw.record.entity) << '\t' << buf << '\n';
    }
  }
  out << "# beta\t" << report.references.size() << '\n';
  for (const auto& rw : report.references) {
    std::snprintf(buf, sizeof(buf), "%.9f", rw.weight);
    out << ents.name(rw.reference.head) << " , " << ents.name(rw.reference.tail) << '\t' << buf << '\n';
  }
}

template class Model<float>;
template class Model<double>;

}  // namespace faan
