#ifndef FAAN_PRETRAIN_TRANSE_HPP
#define FAAN_PRETRAIN_TRANSE_HPP

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <vector>

#include "faan/core/tensor.hpp"
#include "faan/data/dataset.hpp"
#include "json.hpp"

namespace faan {

/// Pretrained entity and relation embeddings, one row per id.
struct EmbeddingTable {
  Matrix<double> entities;
  Matrix<double> relations;

  Index dim() const noexcept { return entities.cols(); }
};

/// ||h + r - t|| under the L1 or L2 norm. Lower means more plausible.
template <typename H, typename R, typename T>
double transe_score(const Eigen::MatrixBase<H>& h, const Eigen::MatrixBase<R>& r, const Eigen::MatrixBase<T>& t,
                    int norm = 2) {
  if (h.size() != r.size() || h.size() != t.size()) throw Error("transe_score: dimension mismatch");
  if (norm != 1 && norm != 2) throw Error("transe_score: norm must be 1 or 2");
  const auto diff = (h.derived().template cast<double>().reshaped() + r.derived().template cast<double>().reshaped() -
                     t.derived().template cast<double>().reshaped())
                        .eval();
  return norm == 1 ? diff.template lpNorm<1>() : diff.norm();
}

struct PretrainConfig {
  Index dim = 50;
  double margin = 1.0;
  double learning_rate = 0.01;
  std::size_t steps = 2000;
  std::size_t batch_size = 256;
  std::size_t neg_per_pos = 1;
  int norm = 2;
  std::uint64_t seed = 42;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Triples that must never reach pretraining: the dev and test query
/// triples (everything but their designated references).
class LeakageGuard {
 public:
  LeakageGuard() = default;
  static LeakageGuard from_dataset(const Dataset& data, std::size_t k, ReferenceSelection selection,
                                   std::uint64_t seed);
  /// Throws Error listing offending triples when any input is held out.
  void check(std::span<const Triple> triples, const Vocab* vocab = nullptr) const;
  std::size_t size() const noexcept { return held_out_.size(); }

 private:
  std::set<Triple> held_out_;
};

/// Background graph + train task triples + dev/test reference triples.
std::vector<Triple> pretraining_triples(const Dataset& data, std::size_t k, ReferenceSelection selection,
                                        std::uint64_t seed);

struct PretrainResult {
  EmbeddingTable table;
  /// Mean margin loss per positive, one entry per step.
  std::vector<double> loss_history;
};

/// Minibatch SGD on the margin ranking loss with corrupted heads or tails.
/// Entity rows are renormalized to unit length after every step.
PretrainResult transe_pretrain(std::span<const Triple> triples, std::size_t num_entities, std::size_t num_relations,
                               const PretrainConfig& config, const LeakageGuard& guard = {},
                               const Vocab* vocab = nullptr);

/// Checkpoint with tensors "entity_embedding" and "relation_embedding".
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);

/// Reads either a checkpoint written by save_embeddings or a raw row-major
/// float32 matrix (*.bin) with a sidecar JSON {"dim": d, "count": n}.
/// Validates the entity count, and the dim when expected_dim > 0.
EmbeddingTable load_embeddings(const std::filesystem::path& path, std::size_t expected_entities,
                               Index expected_dim = 0);

}  // namespace faan

#endif  // FAAN_PRETRAIN_TRANSE_HPP
