#ifndef FAAN_MODEL_CONFIG_HPP
#define FAAN_MODEL_CONFIG_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "faan/core/tensor.hpp"
#include "json.hpp"

namespace faan {

enum class NeighborMode : std::uint8_t {
  Adaptive,        ///< bilinear relevance against the task relation
  MeanPool,        ///< A1: uniform weights
  FixedAttention,  ///< A2: task-independent scores from a learned vector
  NeighborsOnly,   ///< A3: drops the self term
};

enum class PairMode : std::uint8_t {
  Transformer,
  Concat,                 ///< B1: projection of [f(h); f(t)]
  TransformerNoPosition,  ///< B2
};

enum class MatchMode : std::uint8_t {
  Adaptive,      ///< query-attentive reference aggregation
  Mean,          ///< C1
  MaxRelevance,  ///< C2: single most relevant reference
  Lstm,          ///< C3: multi-step LSTM matcher
};

enum class NeighborRelationSource : std::uint8_t {
  Translated,  ///< e_nbr - e_self
  Pretrained,  ///< background relation embedding, negated for incoming edges
};

struct VariantConfig {
  NeighborMode neighbor_mode = NeighborMode::Adaptive;
  PairMode pair_mode = PairMode::Transformer;
  MatchMode match_mode = MatchMode::Adaptive;
  bool include_inverse = true;
  bool freeze_embeddings = false;
  NeighborRelationSource neighbor_relation_source = NeighborRelationSource::Translated;

  /// "faan" (the full model) or an ablation name a1..a3, b1, b2, c1..c3,
  /// case-insensitive. Throws Error listing valid names otherwise.
  static VariantConfig named(std::string_view name);
  static const std::vector<std::string>& names();

  bool operator==(const VariantConfig&) const = default;
};

struct ModelConfig {
  Index dim = 50;
  std::size_t max_neighbors = 50;
  Index layers = 3;
  Index heads = 4;
  Index ffn_multiplier = 4;
  double dropout = 0.1;
  Index lstm_steps = 2;
  VariantConfig variant;

  /// Throws Error on inconsistent values (heads must divide dim, ...).
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const VariantConfig& v);
void from_json(const nlohmann::json& j, VariantConfig& v);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

std::string_view to_string(NeighborMode m);
std::string_view to_string(PairMode m);
std::string_view to_string(MatchMode m);
std::string_view to_string(NeighborRelationSource s);

}  // namespace faan

#endif  // FAAN_MODEL_CONFIG_HPP
