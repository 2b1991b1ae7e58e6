#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "faan/core/param_store.hpp"
#include "faan/core/rng.hpp"
#include "faan/data/synthetic.hpp"

namespace faan {

using nlohmann::json;

void SyntheticSpec::validate() const {
  if (clusters < 2) throw Error("synthetic spec: need at least 2 clusters");
  if (entities_per_cluster < 5) throw Error("synthetic spec: need at least 5 entities per cluster");
  if (max_shift < 1 || max_shift >= entities_per_cluster) {
    throw Error("synthetic spec: max_shift must be in [1, entities_per_cluster)");
  }
  if (noise_edges_per_entity < 0) throw Error("synthetic spec: noise_edges_per_entity must be >= 0");
  for (const auto* s : {&train, &dev, &test}) {
    if (s->monosemous < 0 || s->polysemous < 0) throw Error("synthetic spec: negative relation count");
  }
  if (train.monosemous + train.polysemous < 1) throw Error("synthetic spec: train split needs a task relation");
  if (train.polysemous + dev.polysemous + test.polysemous < 1) {
    throw Error("synthetic spec: plant at least one polysemous task relation");
  }
  if (max_shift < clusters) throw Error("synthetic spec: polysemous relations need max_shift >= clusters");
}

void to_json(json& j, const SyntheticSplitSpec& s) { j = json{{"monosemous", s.monosemous}, {"polysemous", s.polysemous}}; }

void from_json(const json& j, SyntheticSplitSpec& s) {
  s.monosemous = j.value("monosemous", s.monosemous);
  s.polysemous = j.value("polysemous", s.polysemous);
}

void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"clusters", s.clusters},
           {"entities_per_cluster", s.entities_per_cluster},
           {"noise_edges_per_entity", s.noise_edges_per_entity},
           {"max_shift", s.max_shift},
           {"train", s.train},
           {"dev", s.dev},
           {"test", s.test}};
}

void from_json(const json& j, SyntheticSpec& s) {
  s.clusters = j.value("clusters", s.clusters);
  s.entities_per_cluster = j.value("entities_per_cluster", s.entities_per_cluster);
  s.noise_edges_per_entity = j.value("noise_edges_per_entity", s.noise_edges_per_entity);
  s.max_shift = j.value("max_shift", s.max_shift);
  if (j.contains("train")) s.train = j.at("train").get<SyntheticSplitSpec>();
  if (j.contains("dev")) s.dev = j.at("dev").get<SyntheticSplitSpec>();
  if (j.contains("test")) s.test = j.at("test").get<SyntheticSplitSpec>();
}

namespace {

std::string entity_name(int cluster, int position) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "c%d_e%02d", cluster, position);
  return buf;
}

}  // namespace

void make_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
  spec.validate();
  Rng rng = Rng::substream(seed, "synthetic");
  const int n = spec.entities_per_cluster;

  SyntheticAnswerKey key;
  std::vector<std::string> entities;
  key.members_.resize(static_cast<std::size_t>(spec.clusters));
  for (int c = 0; c < spec.clusters; ++c) {
    for (int i = 0; i < n; ++i) {
      auto name = entity_name(c, i);
      key.cluster_[name] = c;
      key.position_[name] = i;
      key.members_[static_cast<std::size_t>(c)].push_back(name);
      entities.push_back(std::move(name));
    }
  }

  std::vector<std::string> relations;
  std::ostringstream graph;
  for (int c = 0; c < spec.clusters; ++c) {
    const std::string next = "c" + std::to_string(c) + "_next";
    const std::string skip = "c" + std::to_string(c) + "_skip";
    relations.push_back(next);
    relations.push_back(skip);
    for (int i = 0; i + 1 < n; ++i) graph << entity_name(c, i) << '\t' << next << '\t' << entity_name(c, i + 1) << '\n';
    for (int i = 0; i + 2 < n; ++i) graph << entity_name(c, i) << '\t' << skip << '\t' << entity_name(c, i + 2) << '\n';
  }
  if (spec.noise_edges_per_entity > 0) {
    relations.push_back("related_to");
    for (std::size_t e = 0; e < entities.size(); ++e) {
      for (int k = 0; k < spec.noise_edges_per_entity; ++k) {
        std::size_t other = rng.index(entities.size() - 1);
        if (other >= e) ++other;
        graph << entities[e] << "\trelated_to\t" << entities[other] << '\n';
      }
    }
  }

  json tasks_by_split = json::object();
  json candidates = json::object();
  const json all_entities = entities;
  const std::pair<const char*, const SyntheticSplitSpec*> splits[] = {
      {"train", &spec.train}, {"dev", &spec.dev}, {"test", &spec.test}};
  for (const auto& [split, counts] : splits) {
    json tasks = json::object();
    for (int kind = 0; kind < 2; ++kind) {
      const bool poly = kind == 1;
      const int count = poly ? counts->polysemous : counts->monosemous;
      for (int r = 0; r < count; ++r) {
        const std::string rel = std::string(split) + (poly ? "_poly_" : "_mono_") + std::to_string(r);
        SyntheticAnswerKey::RelationRule rule;
        rule.split = split;
        rule.polysemous = poly;
        if (poly) {
          std::vector<int> shifts(static_cast<std::size_t>(spec.max_shift));
          for (int s = 0; s < spec.max_shift; ++s) shifts[static_cast<std::size_t>(s)] = s + 1;
          std::shuffle(shifts.begin(), shifts.end(), rng.engine());
          rule.shift_by_cluster.assign(shifts.begin(), shifts.begin() + spec.clusters);
        } else {
          rule.shift_by_cluster.assign(static_cast<std::size_t>(spec.clusters),
                                       1 + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_shift))));
        }
        // Per-cluster shuffled pair lists, interleaved so any prefix mixes clusters.
        std::vector<std::vector<json>> per_cluster(static_cast<std::size_t>(spec.clusters));
        for (int c = 0; c < spec.clusters; ++c) {
          const int shift = rule.shift_by_cluster[static_cast<std::size_t>(c)];
          auto& list = per_cluster[static_cast<std::size_t>(c)];
          for (int i = 0; i + shift < n; ++i) list.push_back(json::array({entity_name(c, i), rel, entity_name(c, i + shift)}));
          std::shuffle(list.begin(), list.end(), rng.engine());
        }
        json triples = json::array();
        for (std::size_t i = 0;; ++i) {
          bool any = false;
          for (auto& list : per_cluster) {
            if (i < list.size()) {
              triples.push_back(list[i]);
              any = true;
            }
          }
          if (!any) break;
        }
        tasks[rel] = std::move(triples);
        candidates[rel] = all_entities;
        key.rules_[rel] = std::move(rule);
        relations.push_back(rel);
      }
    }
    tasks_by_split[split] = std::move(tasks);
  }

  json ent2ids = json::object();
  for (std::size_t i = 0; i < entities.size(); ++i) ent2ids[entities[i]] = i;
  json rel2ids = json::object();
  for (std::size_t i = 0; i < relations.size(); ++i) rel2ids[relations[i]] = i;

  std::filesystem::create_directories(out_dir);
  atomic_write(out_dir / "path_graph", graph.str());
  atomic_write(out_dir / "train_tasks.json", tasks_by_split["train"].dump() + "\n");
  atomic_write(out_dir / "dev_tasks.json", tasks_by_split["dev"].dump() + "\n");
  atomic_write(out_dir / "test_tasks.json", tasks_by_split["test"].dump() + "\n");
  atomic_write(out_dir / "rel2candidates.json", candidates.dump() + "\n");
  atomic_write(out_dir / "ent2ids.json", ent2ids.dump() + "\n");
  atomic_write(out_dir / "relation2ids.json", rel2ids.dump() + "\n");
  atomic_write(out_dir / "answer_key.json", key.to_json().dump(1) + "\n");
  json spec_json = spec;
  spec_json["seed"] = seed;
  atomic_write(out_dir / "synthetic_spec.json", spec_json.dump(1) + "\n");
}

// ---------------------------------------------------------------------------

SyntheticAnswerKey SyntheticAnswerKey::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open answer key " + path.string());
  return from_json(json::parse(in));
}

json SyntheticAnswerKey::to_json() const {
  json j;
  json ents = json::object();
  for (const auto& [name, c] : cluster_) ents[name] = json{{"cluster", c}, {"position", position_.at(name)}};
  json rels = json::object();
  for (const auto& [name, rule] : rules_) {
    rels[name] = json{{"split", rule.split}, {"polysemous", rule.polysemous}, {"shift_by_cluster", rule.shift_by_cluster}};
  }
  j["entities"] = std::move(ents);
  j["relations"] = std::move(rels);
  return j;
}

SyntheticAnswerKey SyntheticAnswerKey::from_json(const json& j) {
  SyntheticAnswerKey key;
  int max_cluster = -1;
  for (auto it = j.at("entities").begin(); it != j.at("entities").end(); ++it) {
    const int c = it.value().at("cluster").get<int>();
    key.cluster_[it.key()] = c;
    key.position_[it.key()] = it.value().at("position").get<int>();
    max_cluster = std::max(max_cluster, c);
  }
  key.members_.resize(static_cast<std::size_t>(max_cluster + 1));
  for (const auto& [name, c] : key.cluster_) key.members_[static_cast<std::size_t>(c)].push_back(name);
  for (auto& m : key.members_) {
    std::sort(m.begin(), m.end(), [&](const std::string& a, const std::string& b) {
      return key.position_.at(a) < key.position_.at(b);
    });
  }
  for (auto it = j.at("relations").begin(); it != j.at("relations").end(); ++it) {
    RelationRule rule;
    rule.split = it.value().at("split").get<std::string>();
    rule.polysemous = it.value().at("polysemous").get<bool>();
    rule.shift_by_cluster = it.value().at("shift_by_cluster").get<std::vector<int>>();
    key.rules_[it.key()] = std::move(rule);
  }
  return key;
}

int SyntheticAnswerKey::cluster_of(const std::string& entity) const {
  auto it = cluster_.find(entity);
  if (it == cluster_.end()) throw Error("answer key: unknown entity " + entity);
  return it->second;
}

int SyntheticAnswerKey::position_of(const std::string& entity) const {
  auto it = position_.find(entity);
  if (it == position_.end()) throw Error("answer key: unknown entity " + entity);
  return it->second;
}

const SyntheticAnswerKey::RelationRule& SyntheticAnswerKey::rule(const std::string& relation) const {
  auto it = rules_.find(relation);
  if (it == rules_.end()) throw Error("answer key: unknown relation " + relation);
  return it->second;
}

std::optional<std::string> SyntheticAnswerKey::answer(const std::string& relation, const std::string& head) const {
  const auto& r = rule(relation);
  const int c = cluster_of(head);
  const int target = position_of(head) + r.shift_by_cluster.at(static_cast<std::size_t>(c));
  const auto& members = members_.at(static_cast<std::size_t>(c));
  if (target < 0 || static_cast<std::size_t>(target) >= members.size()) return std::nullopt;
  return members[static_cast<std::size_t>(target)];
}

}  // namespace faan
