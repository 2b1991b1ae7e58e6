#ifndef FAAN_DATA_EPISODE_HPP
#define FAAN_DATA_EPISODE_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "faan/core/rng.hpp"
#include "faan/data/dataset.hpp"

namespace faan {

enum class NegativeStrategy : std::uint8_t {
  Uniform,     ///< t- drawn from all entities except the gold tail
  Candidates,  ///< t- drawn from the relation's candidate list
};

struct EpisodeOptions {
  std::size_t k = 5;
  std::size_t query_batch_size = 128;
  NegativeStrategy negatives = NegativeStrategy::Uniform;
  std::size_t negatives_per_query = 1;
};

/// One meta-training task instance: K references, a query batch and
/// corrupted tails. negatives[i * negatives_per_query + j] corrupts query i.
struct Episode {
  RelationId relation = 0;
  std::vector<EntityPair> references;
  std::vector<EntityPair> queries;
  std::vector<EntityId> negatives;
  std::size_t negatives_per_query = 1;
  std::span<const EntityId> candidates;
};

/// Samples an episode from `split`. With no relation given, one task of the
/// split is drawn uniformly.
Episode sample_episode(const Dataset& data, Partition split, std::optional<RelationId> relation,
                       const EpisodeOptions& options, Rng& rng);

std::string describe_episode(const Dataset& data, const Episode& episode);

}  // namespace faan

#endif  // FAAN_DATA_EPISODE_HPP
