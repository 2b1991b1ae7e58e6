#include <algorithm>
#include <cctype>

#include "faan/model/config.hpp"

namespace faan {

using nlohmann::json;

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& text, const std::pair<Enum, const char*> (&table)[N], const char* what) {
  for (const auto& [value, name] : table) {
    if (text == name) return value;
  }
  std::string valid;
  for (const auto& [value, name] : table) valid += std::string(valid.empty() ? "" : ", ") + name;
  throw Error(std::string("unknown ") + what + " '" + text + "' (valid: " + valid + ")");
}

template <typename Enum, std::size_t N>
const char* enum_name(Enum v, const std::pair<Enum, const char*> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (value == v) return name;
  }
  return "?";
}

constexpr std::pair<NeighborMode, const char*> kNeighborModes[] = {
    {NeighborMode::Adaptive, "adaptive"},
    {NeighborMode::MeanPool, "mean_pool"},
    {NeighborMode::FixedAttention, "fixed_attention"},
    {NeighborMode::NeighborsOnly, "neighbors_only"},
};
constexpr std::pair<PairMode, const char*> kPairModes[] = {
    {PairMode::Transformer, "transformer"},
    {PairMode::Concat, "concat"},
    {PairMode::TransformerNoPosition, "transformer_no_pos"},
};
constexpr std::pair<MatchMode, const char*> kMatchModes[] = {
    {MatchMode::Adaptive, "adaptive"},
    {MatchMode::Mean, "mean"},
    {MatchMode::MaxRelevance, "max_relevance"},
    {MatchMode::Lstm, "lstm"},
};
constexpr std::pair<NeighborRelationSource, const char*> kSources[] = {
    {NeighborRelationSource::Translated, "translated"},
    {NeighborRelationSource::Pretrained, "pretrained"},
};

}  // namespace

std::string_view to_string(NeighborMode m) { return enum_name(m, kNeighborModes); }
std::string_view to_string(PairMode m) { return enum_name(m, kPairModes); }
std::string_view to_string(MatchMode m) { return enum_name(m, kMatchModes); }
std::string_view to_string(NeighborRelationSource s) { return enum_name(s, kSources); }

const std::vector<std::string>& VariantConfig::names() {
  static const std::vector<std::string> n{"faan", "a1", "a2", "a3", "b1", "b2", "c1", "c2", "c3"};
  return n;
}

VariantConfig VariantConfig::named(std::string_view name) {
  std::string key(name);
  std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
  VariantConfig v;
  if (key == "faan") return v;
  if (key == "a1") v.neighbor_mode = NeighborMode::MeanPool;
  else if (key == "a2") v.neighbor_mode = NeighborMode::FixedAttention;
  else if (key == "a3") v.neighbor_mode = NeighborMode::NeighborsOnly;
  else if (key == "b1") v.pair_mode = PairMode::Concat;
  else if (key == "b2") v.pair_mode = PairMode::TransformerNoPosition;
  else if (key == "c1") v.match_mode = MatchMode::Mean;
  else if (key == "c2") v.match_mode = MatchMode::MaxRelevance;
  else if (key == "c3") v.match_mode = MatchMode::Lstm;
  else {
    std::string valid;
    for (const auto& n : names()) valid += (valid.empty() ? "" : ", ") + n;
    throw Error("invalid variant '" + std::string(name) + "'; valid variants: " + valid);
  }
  return v;
}

void ModelConfig::validate() const {
  if (dim < 1) throw Error("model dim must be positive");
  if (max_neighbors < 1) throw Error("max_neighbors must be at least 1");
  if (variant.pair_mode != PairMode::Concat) {
    if (layers < 1) throw Error("transformer needs at least one layer");
    if (heads < 1 || dim % heads != 0) {
      throw Error("heads (" + std::to_string(heads) + ") must divide dim (" + std::to_string(dim) + ")");
    }
    if (ffn_multiplier < 1) throw Error("ffn_multiplier must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must be in [0, 1)");
  if (variant.match_mode == MatchMode::Lstm && lstm_steps < 1) throw Error("lstm_steps must be at least 1");
}

void to_json(json& j, const VariantConfig& v) {
  j = json{{"neighbor_mode", to_string(v.neighbor_mode)},
           {"pair_mode", to_string(v.pair_mode)},
           {"match_mode", to_string(v.match_mode)},
           {"include_inverse", v.include_inverse},
           {"freeze_embeddings", v.freeze_embeddings},
           {"neighbor_relation_source", to_string(v.neighbor_relation_source)}};
}

void from_json(const json& j, VariantConfig& v) {
  if (j.contains("neighbor_mode")) v.neighbor_mode = parse_enum(j.at("neighbor_mode").get<std::string>(), kNeighborModes, "neighbor_mode");
  if (j.contains("pair_mode")) v.pair_mode = parse_enum(j.at("pair_mode").get<std::string>(), kPairModes, "pair_mode");
  if (j.contains("match_mode")) v.match_mode = parse_enum(j.at("match_mode").get<std::string>(), kMatchModes, "match_mode");
  v.include_inverse = j.value("include_inverse", v.include_inverse);
  v.freeze_embeddings = j.value("freeze_embeddings", v.freeze_embeddings);
  if (j.contains("neighbor_relation_source")) {
    v.neighbor_relation_source =
        parse_enum(j.at("neighbor_relation_source").get<std::string>(), kSources, "neighbor_relation_source");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"dim", c.dim},
           {"max_neighbors", c.max_neighbors},
           {"layers", c.layers},
           {"heads", c.heads},
           {"ffn_multiplier", c.ffn_multiplier},
           {"dropout", c.dropout},
           {"lstm_steps", c.lstm_steps},
           {"variant", c.variant}};
}

void from_json(const json& j, ModelConfig& c) {
  c.dim = j.value("dim", c.dim);
  c.max_neighbors = j.value("max_neighbors", c.max_neighbors);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
  c.dropout = j.value("dropout", c.dropout);
  c.lstm_steps = j.value("lstm_steps", c.lstm_steps);
  if (j.contains("variant")) {
    const auto& v = j.at("variant");
    c.variant = v.is_string() ? VariantConfig::named(v.get<std::string>()) : v.get<VariantConfig>();
  }
}

}  // namespace faan
