#include <algorithm>
#include <numeric>

#include "faan/core/rng.hpp"
#include "faan/data/neighbor_index.hpp"

namespace faan {

NeighborIndex NeighborIndex::build(const TripleStore& store, std::size_t num_entities, std::size_t max_neighbors,
                                   bool include_inverse, std::uint64_t seed) {
  if (max_neighbors < 1) throw Error("neighbor cap M must be at least 1");
  std::vector<std::vector<NeighborRecord>> lists(num_entities);
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.partition[i] != Partition::Background) continue;
    const Triple& t = store.triples[i];
    if (t.head < 0 || static_cast<std::size_t>(t.head) >= num_entities || t.tail < 0 ||
        static_cast<std::size_t>(t.tail) >= num_entities) {
      throw Error("background triple references an entity outside the vocabulary");
    }
    lists[static_cast<std::size_t>(t.head)].push_back({t.relation, t.tail, Direction::Out});
    if (include_inverse) lists[static_cast<std::size_t>(t.tail)].push_back({t.relation, t.head, Direction::In});
  }

  NeighborIndex index;
  index.max_neighbors_ = max_neighbors;
  index.include_inverse_ = include_inverse;
  index.offsets_.reserve(num_entities + 1);
  index.offsets_.push_back(0);
  Rng rng = Rng::substream(seed, "neighbors");
  std::vector<std::size_t> pick;
  for (auto& list : lists) {
    if (list.size() <= max_neighbors) {
      index.records_.insert(index.records_.end(), list.begin(), list.end());
    } else {
      pick.resize(list.size());
      std::iota(pick.begin(), pick.end(), std::size_t{0});
      // Partial Fisher-Yates: the first max_neighbors slots are a uniform sample.
      for (std::size_t i = 0; i < max_neighbors; ++i) {
        const std::size_t j = i + rng.index(pick.size() - i);
        std::swap(pick[i], pick[j]);
      }
      std::sort(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(max_neighbors));
      for (std::size_t i = 0; i < max_neighbors; ++i) index.records_.push_back(list[pick[i]]);
    }
    index.offsets_.push_back(index.records_.size());
  }
  return index;
}

std::span<const NeighborRecord> NeighborIndex::neighbors(EntityId entity) const {
  if (entity < 0 || static_cast<std::size_t>(entity) >= num_entities()) {
    throw Error("entity id out of range in neighbor index: " + std::to_string(entity));
  }
  const auto e = static_cast<std::size_t>(entity);
  return {records_.data() + offsets_[e], offsets_[e + 1] - offsets_[e]};
}

}  // namespace faan
