#ifndef FAAN_DATA_NEIGHBOR_INDEX_HPP
#define FAAN_DATA_NEIGHBOR_INDEX_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "faan/data/dataset.hpp"

namespace faan {

enum class Direction : std::uint8_t { Out = 0, In = 1 };

struct NeighborRecord {
  RelationId relation = 0;
  EntityId entity = 0;
  Direction direction = Direction::Out;
  bool operator==(const NeighborRecord&) const = default;
};

/// Per-entity one-hop neighborhoods in the background graph, capped at M
/// records and fixed for the lifetime of the index.
class NeighborIndex {
 public:
  NeighborIndex() = default;

  /// Gathers (relation, neighbor, direction) records from background triples
  /// only. For triple (a, r, b): a gets (r, b, Out); with include_inverse, b
  /// also gets (r, a, In). Lists longer than max_neighbors are sampled
  /// uniformly without replacement, keeping their original relative order.
  static NeighborIndex build(const TripleStore& store, std::size_t num_entities, std::size_t max_neighbors,
                             bool include_inverse, std::uint64_t seed);

  std::span<const NeighborRecord> neighbors(EntityId entity) const;
  std::size_t num_entities() const noexcept { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t max_neighbors() const noexcept { return max_neighbors_; }
  bool include_inverse() const noexcept { return include_inverse_; }
  std::size_t total_records() const noexcept { return records_.size(); }

  bool operator==(const NeighborIndex&) const = default;

 private:
  std::vector<std::size_t> offsets_;
  std::vector<NeighborRecord> records_;
  std::size_t max_neighbors_ = 0;
  bool include_inverse_ = true;
};

}  // namespace faan

#endif  // FAAN_DATA_NEIGHBOR_INDEX_HPP
