#ifndef FAAN_DATA_SYNTHETIC_HPP
#define FAAN_DATA_SYNTHETIC_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace faan {

/// Task relations planted in one split.
struct SyntheticSplitSpec {
  int monosemous = 0;  ///< same shift in every cluster
  int polysemous = 0;  ///< a different shift per cluster
};

/// Desk-scale polysemy testbed.
///
/// Entities form `clusters` groups laid out on a chain by a per-cluster
/// background relation ("c<k>_next"); a shared "related_to" relation adds
/// random noise edges. Every task relation maps the entity at chain
/// position i to position i + shift inside the same cluster, the shift
/// depending on the cluster for polysemous relations. Candidate lists are
/// all entities, so they mix clusters.
struct SyntheticSpec {
  int clusters = 2;
  int entities_per_cluster = 25;
  int noise_edges_per_entity = 1;
  int max_shift = 4;
  SyntheticSplitSpec train{4, 2};
  SyntheticSplitSpec dev{0, 1};
  SyntheticSplitSpec test{0, 1};

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// Writes a dataset directory (standard layout plus answer_key.json and
/// synthetic_spec.json). Output is byte-identical for a fixed seed.
void make_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Ground truth of a synthetic dataset.
class SyntheticAnswerKey {
 public:
  struct RelationRule {
    std::string split;
    bool polysemous = false;
    std::vector<int> shift_by_cluster;
  };

  static SyntheticAnswerKey load(const std::filesystem::path& path);

  int cluster_of(const std::string& entity) const;
  int position_of(const std::string& entity) const;
  const RelationRule& rule(const std::string& relation) const;
  const std::map<std::string, RelationRule>& rules() const noexcept { return rules_; }
  /// The tail implied by the rule, if the shifted position exists.
  std::optional<std::string> answer(const std::string& relation, const std::string& head) const;

  nlohmann::json to_json() const;
  static SyntheticAnswerKey from_json(const nlohmann::json& j);

 private:
  friend void make_synthetic(const SyntheticSpec&, std::uint64_t, const std::filesystem::path&);
  std::map<std::string, int> cluster_;
  std::map<std::string, int> position_;
  std::map<std::string, RelationRule> rules_;
  std::vector<std::vector<std::string>> members_;
};

}  // namespace faan

#endif  // FAAN_DATA_SYNTHETIC_HPP
