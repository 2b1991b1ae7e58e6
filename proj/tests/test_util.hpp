#ifndef FAAN_TESTS_TEST_UTIL_HPP
#define FAAN_TESTS_TEST_UTIL_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <unistd.h>

#include "faan/core/rng.hpp"
#include "faan/data/synthetic.hpp"
#include "faan/model/faan.hpp"
#include "faan/pretrain/transe.hpp"
#include "faan/train/trainer.hpp"

namespace faan::test {

namespace fs = std::filesystem;

inline fs::path fixture(const std::string& name) { return fs::path(FAAN_FIXTURES) / name; }

/// Fresh empty directory under the system temp dir, unique per process.
inline fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("faan_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Default-spec synthetic dataset written once per seed and process.
inline const fs::path& synthetic_dir(std::uint64_t seed) {
  static std::map<std::uint64_t, fs::path> dirs;
  auto it = dirs.find(seed);
  if (it == dirs.end()) {
    auto dir = scratch("synthetic_" + std::to_string(seed));
    make_synthetic(SyntheticSpec{}, seed, dir);
    it = dirs.emplace(seed, dir).first;
  }
  return it->second;
}

inline const Dataset& synthetic(std::uint64_t seed) {
  static std::map<std::uint64_t, Dataset> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, load_dataset(synthetic_dir(seed))).first;
  return it->second;
}

inline EmbeddingTable random_embeddings(std::size_t entities, std::size_t relations, Index dim,
                                        std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable t;
  t.entities.resize(static_cast<Index>(entities), dim);
  t.relations.resize(static_cast<Index>(relations), dim);
  for (Index i = 0; i < t.entities.size(); ++i) t.entities.data()[i] = rng.normal(0.0, 0.5);
  for (Index i = 0; i < t.relations.size(); ++i) t.relations.data()[i] = rng.normal(0.0, 0.5);
  return t;
}

/// d=8, M=4, one layer, two heads, no dropout.
inline ModelConfig tiny_config(const std::string& variant = "faan") {
  ModelConfig c;
  c.dim = 8;
  c.max_neighbors = 4;
  c.layers = 1;
  c.heads = 2;
  c.dropout = 0.0;
  c.variant = VariantConfig::named(variant);
  return c;
}

/// Desk-scale setup shared by the overfit, adaptivity and ablation checks:
/// d=16, one layer, frozen TransE embeddings.
struct DeskConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
};

inline DeskConfig desk_config(std::uint64_t seed, std::size_t steps, const std::string& variant = "faan") {
  DeskConfig c;
  c.model.dim = 16;
  c.model.layers = 1;
  c.model.heads = 8;
  c.model.max_neighbors = 10;
  c.model.dropout = 0.0;
  c.model.variant = VariantConfig::named(variant);
  c.model.variant.freeze_embeddings = true;

  c.pretrain.dim = 16;
  c.pretrain.steps = 10000;
  c.pretrain.batch_size = 512;
  c.pretrain.learning_rate = 0.05;
  c.pretrain.seed = seed;

  c.train.query_batch_size = 32;
  c.train.negatives_per_query = 8;
  c.train.learning_rate = 1e-2;
  c.train.margin = 1.0;
  c.train.warmup_steps = 100;
  c.train.adam_beta2 = 0.99;
  c.train.max_steps = steps;
  c.train.eval_every = steps;
  c.train.log_every = steps;
  c.train.selection = ReferenceSelection::SeededShuffle;
  c.train.seed = seed;
  return c;
}

inline EmbeddingTable pretrain_for(const Dataset& data, const DeskConfig& c) {
  const auto triples = pretraining_triples(data, c.train.k, c.train.selection, c.train.seed);
  const auto guard = LeakageGuard::from_dataset(data, c.train.k, c.train.selection, c.train.seed);
  return transe_pretrain(triples, data.num_entities(), data.num_relations(), c.pretrain, guard, &data.vocab).table;
}

inline NeighborIndex neighbors_for(const Dataset& data, const ModelConfig& m, std::uint64_t seed) {
  return NeighborIndex::build(data.store, data.num_entities(), m.max_neighbors, m.variant.include_inverse, seed);
}

}  // namespace faan::test

#endif  // FAAN_TESTS_TEST_UTIL_HPP
