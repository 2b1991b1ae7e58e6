#ifndef FAAN_DATA_DATASET_HPP
#define FAAN_DATA_DATASET_HPP

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "faan/core/tensor.hpp"

namespace faan {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  auto operator<=>(const Triple&) const = default;
};

struct EntityPair {
  EntityId head = 0;
  EntityId tail = 0;
  auto operator<=>(const EntityPair&) const = default;
};

/// Dense name <-> id table.
class NameTable {
 public:
  /// Appends a new name and returns its id. Throws on duplicates.
  std::int32_t add(std::string name);
  std::optional<std::int32_t> find(std::string_view name) const;
  /// Throws Error when the name is unknown.
  std::int32_t id(std::string_view name) const;
  const std::string& name(std::int32_t id) const;
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  struct Hash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
  };
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::int32_t, Hash, std::equal_to<>> ids_;
};

struct Vocab {
  NameTable entities;
  NameTable relations;
};

enum class Partition : std::uint8_t { Background, Train, Dev, Test };

std::string_view to_string(Partition p);
Partition parse_partition(std::string_view name);

/// All triples of the dataset, each flagged with the partition it belongs
/// to. Background triples form the background graph; the rest belong to
/// few-shot task relations.
struct TripleStore {
  std::vector<Triple> triples;
  std::vector<Partition> partition;

  void add(Triple t, Partition p) {
    triples.push_back(t);
    partition.push_back(p);
  }
  std::size_t size() const noexcept { return triples.size(); }
  std::size_t count(Partition p) const;
  std::vector<Triple> select(Partition p) const;
};

/// One few-shot task relation with its pairs in file order.
struct Task {
  RelationId relation = 0;
  Partition split = Partition::Train;
  std::vector<EntityPair> pairs;
};

/// Relation -> type-constrained candidate tails.
class CandidateMap {
 public:
  void set(RelationId relation, std::vector<EntityId> candidates);
  bool contains(RelationId relation) const { return map_.count(relation) != 0; }
  /// Throws when the relation has no list.
  const std::vector<EntityId>& at(RelationId relation) const;
  std::size_t size() const noexcept { return map_.size(); }

 private:
  std::unordered_map<RelationId, std::vector<EntityId>> map_;
};

struct DatasetStats {
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t triples = 0;
  std::size_t background_triples = 0;
  std::size_t tasks = 0;
  std::size_t train_tasks = 0;
  std::size_t dev_tasks = 0;
  std::size_t test_tasks = 0;
};

struct Dataset {
  std::filesystem::path root;
  Vocab vocab;
  TripleStore store;
  CandidateMap candidates;
  std::vector<Task> tasks;

  std::size_t num_entities() const noexcept { return vocab.entities.size(); }
  std::size_t num_relations() const noexcept { return vocab.relations.size(); }
  std::vector<const Task*> tasks_in(Partition split) const;
  const Task* find_task(RelationId relation) const;
  DatasetStats stats() const;
};

/// Dataset directory layout (see docs/data_format.md):
///   path_graph                   head TAB relation TAB tail per line
///   train_tasks.json, dev_tasks.json, test_tasks.json
///                                relation -> [[head, relation, tail], ...]
///   rel2candidates.json          relation -> [candidate, ...]
///   ent2ids.json, relation2ids.json  name -> dense integer id
struct LoadOptions {
  /// Require every train-split gold tail to be in its candidate list too
  /// (dev and test are always checked).
  bool check_train_candidates = false;
};

/// Loads and validates a dataset. Errors name the offending file and
/// line or record.
Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& options = {});

enum class ReferenceSelection : std::uint8_t {
  FileOrder,       ///< first K pairs in file order are the references
  SeededShuffle,   ///< first K pairs after a seeded shuffle
};

struct TaskSplit {
  std::vector<EntityPair> references;
  std::vector<EntityPair> queries;
};

/// Designates the K references of a task for evaluation; the remaining
/// pairs are its queries.
TaskSplit designate_references(const Task& task, std::size_t k, ReferenceSelection selection,
                               std::uint64_t seed);

std::string format_triple(const Vocab& vocab, const Triple& t);

}  // namespace faan

#endif  // FAAN_DATA_DATASET_HPP
