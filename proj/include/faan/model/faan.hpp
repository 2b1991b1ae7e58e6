#ifndef FAAN_MODEL_FAAN_HPP
#define FAAN_MODEL_FAAN_HPP

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "faan/core/autodiff.hpp"
#include "faan/core/param_store.hpp"
#include "faan/core/rng.hpp"
#include "faan/data/dataset.hpp"
#include "faan/data/episode.hpp"
#include "faan/data/neighbor_index.hpp"
#include "faan/model/config.hpp"
#include "faan/pretrain/transe.hpp"

namespace faan {

using RowVector = Eigen::RowVectorXd;

// Single-vector forms of the model's building blocks. The batched model
// computes the same quantities; these exist for inspection and testing.

/// t - h.
RowVector task_relation_embed(const RowVector& h, const RowVector& t);

/// r W r_nbr^T + b.
double neighbor_relevance(const RowVector& r, const RowVector& r_nbr, const Eigen::MatrixXd& W, double b);

/// q . g
double match_score(const RowVector& q, const RowVector& g);

struct Aggregate {
  RowVector g;
  std::vector<double> beta;
};

/// Reference aggregation for one query; rows of `refs` are the encoded
/// references. MatchMode::Lstm needs trained weights and is only available
/// through Model::match.
Aggregate aggregate_references(const RowVector& q, const Eigen::MatrixXd& refs, MatchMode mode);

/// Captured intermediate values of one forward pass.
struct ForwardTrace {
  /// Entity per encoded slot and neighbor attention over its records.
  std::vector<EntityId> slots;
  std::vector<Index> offsets;
  std::vector<NeighborRecord> records;
  std::vector<double> alpha;
  /// queries x K reference weights of the last match() call.
  Eigen::MatrixXd beta;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  ///< dropout stream, required when training with dropout
  ForwardTrace* trace = nullptr;
};

struct NeighborWeight {
  NeighborRecord record;
  double weight = 0.0;
};

struct EntityAttention {
  std::string role;  ///< "query.head", "ref2.tail", ...
  EntityId entity = 0;
  std::vector<NeighborWeight> neighbors;  ///< descending weight
};

struct ReferenceWeight {
  std::size_t index = 0;
  EntityPair reference;
  double weight = 0.0;
};

struct AttentionReport {
  RelationId relation = 0;
  EntityPair query;
  double score = 0.0;
  std::vector<EntityAttention> entities;
  std::vector<ReferenceWeight> references;  ///< descending weight
};

/// TSV dump: an "alpha" block per entity (role, entity, relation, direction,
/// neighbor, weight) truncated to `top` rows when top > 0, then a "beta"
/// block with one row per reference.
void write_attention_tsv(std::ostream& out, const AttentionReport& report, const Vocab& vocab, std::size_t top = 0);

/// FAAN: adaptive neighbor encoder, Transformer pair encoder and adaptive
/// matching, plus the ablation variants selected by ModelConfig::variant.
///
/// Parameters live in a ParamStore so they can be checkpointed and
/// gradient-checked. Only the tensors the chosen variant uses are created.
template <typename Scalar>
class Model {
 public:
  using MatrixType = Matrix<Scalar>;
  using V = Var<Scalar>;

  /// Fresh parameters; entity (and relation) embeddings come from `pretrained`.
  Model(ModelConfig config, const EmbeddingTable& pretrained, const NeighborIndex& neighbors, std::uint64_t seed);
  /// Restores parameters, checking names and shapes against the config.
  Model(ModelConfig config, ParamStore<Scalar> params, const NeighborIndex& neighbors);

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<Scalar>& params() noexcept { return params_; }
  const ParamStore<Scalar>& params() const noexcept { return params_; }
  const NeighborIndex& neighbors() const noexcept { return *neighbors_; }
  Index dim() const noexcept { return config_.dim; }
  std::size_t num_entities() const { return static_cast<std::size_t>(params_.at("entity_embedding").rows()); }

  struct Layer {
    V wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w_ff1, b_ff1, w_ff2, b_ff2, ln2_g, ln2_b;
  };
  struct Bound {
    V entity, relation;
    V W, b, W1, W2, fixed_attn;
    V mask, pos, concat_w, concat_b;
    std::vector<Layer> layers;
    V lstm_wx, lstm_wh, lstm_b;
  };

  /// Parameter leaves on `tape`. The const overload never produces gradients.
  Bound bind(Tape<Scalar>& tape);
  Bound bind(Tape<Scalar>& tape) const;

  /// f() for the given entities; row i uses task relation task_relations.row(i).
  V encode_entities(const Bound& p, std::span<const EntityId> entities, const V& self, const V& task_relations,
                    const ForwardContext& ctx) const;
  /// Pair representations, one row per pair.
  V encode_pairs(const Bound& p, std::span<const EntityPair> pairs, const ForwardContext& ctx) const;
  /// Matching scores phi (n x 1) of query encodings against reference encodings.
  V match(const Bound& p, const V& queries, const V& references, const ForwardContext& ctx) const;

  struct EpisodeScores {
    V positive;  ///< nq x 1
    V negative;  ///< (nq * negatives_per_query) x 1, grouped per query
  };
  EpisodeScores score_episode(const Bound& p, const Episode& episode, const ForwardContext& ctx) const;

  /// Evaluation-mode encodings of reference pairs (K x d).
  MatrixType encode_references(std::span<const EntityPair> references) const;
  /// phi for (head, c) against encoded references, in candidate order.
  /// Deterministic and safe to call concurrently.
  std::vector<Scalar> score_candidates(const MatrixType& references, EntityId head,
                                       std::span<const EntityId> candidates, std::size_t chunk = 256) const;

  /// Neighbor attention of one entity under an arbitrary task relation.
  std::vector<double> neighbor_attention(EntityId entity, const RowVector& task_relation) const;

  AttentionReport inspect_attention(RelationId relation, std::span<const EntityPair> references,
                                    EntityPair query) const;

 private:
  template <typename Store>
  static Bound bind_impl(Tape<Scalar>& tape, Store& params, const ModelConfig& config);
  void init_parameters(const EmbeddingTable& pretrained, std::uint64_t seed);
  void check_layout() const;

  ModelConfig config_;
  ParamStore<Scalar> params_;
  const NeighborIndex* neighbors_;
};

/// Tensor names and shapes a config requires, in creation order.
std::vector<std::pair<std::string, std::vector<Index>>> parameter_layout(const ModelConfig& config,
                                                                         std::size_t num_entities,
                                                                         std::size_t num_relations);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace faan

#endif  // FAAN_MODEL_FAAN_HPP
