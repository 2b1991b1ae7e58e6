#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "faan/core/rng.hpp"
#include "faan/data/dataset.hpp"
#include "json.hpp"

namespace faan {

using nlohmann::json;

// ---------------------------------------------------------------------------
// NameTable

std::int32_t NameTable::add(std::string name) {
  if (ids_.count(name)) throw Error("duplicate name: " + name);
  const auto id = static_cast<std::int32_t>(names_.size());
  ids_.emplace(name, id);
  names_.push_back(std::move(name));
  return id;
}

std::optional<std::int32_t> NameTable::find(std::string_view name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::int32_t NameTable::id(std::string_view name) const {
  auto found = find(name);
  if (!found) throw Error("unknown name: " + std::string(name));
  return *found;
}

const std::string& NameTable::name(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
    throw Error("id out of range: " + std::to_string(id));
  }
  return names_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------

std::string_view to_string(Partition p) {
  switch (p) {
    case Partition::Background: return "background";
    case Partition::Train: return "train";
    case Partition::Dev: return "dev";
    case Partition::Test: return "test";
  }
  return "?";
}

Partition parse_partition(std::string_view name) {
  if (name == "background") return Partition::Background;
  if (name == "train") return Partition::Train;
  if (name == "dev" || name == "valid" || name == "validation") return Partition::Dev;
  if (name == "test") return Partition::Test;
  throw Error("unknown split '" + std::string(name) + "' (expected train, dev or test)");
}

std::size_t TripleStore::count(Partition p) const {
  return static_cast<std::size_t>(std::count(partition.begin(), partition.end(), p));
}

std::vector<Triple> TripleStore::select(Partition p) const {
  std::vector<Triple> out;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (partition[i] == p) out.push_back(triples[i]);
  }
  return out;
}

void CandidateMap::set(RelationId relation, std::vector<EntityId> candidates) {
  map_[relation] = std::move(candidates);
}

const std::vector<EntityId>& CandidateMap::at(RelationId relation) const {
  auto it = map_.find(relation);
  if (it == map_.end()) throw Error("no candidate list for relation id " + std::to_string(relation));
  return it->second;
}

std::vector<const Task*> Dataset::tasks_in(Partition split) const {
  std::vector<const Task*> out;
  for (const auto& t : tasks) {
    if (t.split == split) out.push_back(&t);
  }
  return out;
}

const Task* Dataset::find_task(RelationId relation) const {
  for (const auto& t : tasks) {
    if (t.relation == relation) return &t;
  }
  return nullptr;
}

DatasetStats Dataset::stats() const {
  DatasetStats s;
  s.entities = vocab.entities.size();
  s.relations = vocab.relations.size();
  s.triples = store.size();
  s.background_triples = store.count(Partition::Background);
  s.tasks = tasks.size();
  s.train_tasks = tasks_in(Partition::Train).size();
  s.dev_tasks = tasks_in(Partition::Dev).size();
  s.test_tasks = tasks_in(Partition::Test).size();
  return s;
}

std::string format_triple(const Vocab& vocab, const Triple& t) {
  return "(" + vocab.entities.name(t.head) + ", " + vocab.relations.name(t.relation) + ", " +
         vocab.entities.name(t.tail) + ")";
}

// ---------------------------------------------------------------------------
// Loading

namespace {

class LoadError : public Error {
 public:
  LoadError(const std::filesystem::path& file, const std::string& where, const std::string& what)
      : Error(file.filename().string() + (where.empty() ? "" : " " + where) + ": " + what) {}
};

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path, "", "missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError(path, "", std::string("malformed JSON: ") + e.what());
  }
}

NameTable read_id_map(const std::filesystem::path& path) {
  json j = read_json(path);
  if (!j.is_object()) throw LoadError(path, "", "expected an object of name -> id");
  std::vector<std::string> by_id(j.size());
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_integer()) throw LoadError(path, "record '" + it.key() + "'", "id is not an integer");
    const auto id = it.value().get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= by_id.size()) {
      throw LoadError(path, "record '" + it.key() + "'", "id " + std::to_string(id) + " is not dense in [0, " +
                                                             std::to_string(by_id.size()) + ")");
    }
    if (seen[static_cast<std::size_t>(id)]) {
      throw LoadError(path, "record '" + it.key() + "'", "id " + std::to_string(id) + " assigned twice");
    }
    seen[static_cast<std::size_t>(id)] = true;
    by_id[static_cast<std::size_t>(id)] = it.key();
  }
  NameTable table;
  for (auto& name : by_id) table.add(std::move(name));
  return table;
}

EntityId resolve_entity(const Vocab& v, const std::string& name, const std::filesystem::path& file,
                        const std::string& where) {
  auto id = v.entities.find(name);
  if (!id) throw LoadError(file, where, "unknown entity '" + name + "'");
  return *id;
}

RelationId resolve_relation(const Vocab& v, const std::string& name, const std::filesystem::path& file,
                            const std::string& where) {
  auto id = v.relations.find(name);
  if (!id) throw LoadError(file, where, "unknown relation '" + name + "'");
  return *id;
}

void load_tasks(Dataset& d, const std::filesystem::path& path, Partition split,
                std::unordered_set<RelationId>& task_relations) {
  json j = read_json(path);
  if (!j.is_object()) throw LoadError(path, "", "expected an object of relation -> triples");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string where_rel = "relation '" + it.key() + "'";
    const RelationId rel = resolve_relation(d.vocab, it.key(), path, where_rel);
    if (!task_relations.insert(rel).second) {
      throw LoadError(path, where_rel, "task relation appears in more than one split");
    }
    if (!it.value().is_array()) throw LoadError(path, where_rel, "expected an array of triples");
    Task task;
    task.relation = rel;
    task.split = split;
    std::size_t record = 0;
    for (const auto& tr : it.value()) {
      const std::string where = where_rel + " record " + std::to_string(record++);
      if (!tr.is_array() || tr.size() != 3 || !tr[0].is_string() || !tr[1].is_string() || !tr[2].is_string()) {
        throw LoadError(path, where, "expected [head, relation, tail] strings");
      }
      if (tr[1].get<std::string>() != it.key()) {
        throw LoadError(path, where, "triple relation '" + tr[1].get<std::string>() + "' differs from its task");
      }
      const EntityId h = resolve_entity(d.vocab, tr[0].get<std::string>(), path, where);
      const EntityId t = resolve_entity(d.vocab, tr[2].get<std::string>(), path, where);
      task.pairs.push_back({h, t});
      d.store.add({h, rel, t}, split);
    }
    d.tasks.push_back(std::move(task));
  }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& options) {
  Dataset d;
  d.root = root;
  d.vocab.entities = read_id_map(root / "ent2ids.json");
  d.vocab.relations = read_id_map(root / "relation2ids.json");

  std::unordered_set<RelationId> task_relations;
  load_tasks(d, root / "train_tasks.json", Partition::Train, task_relations);
  load_tasks(d, root / "dev_tasks.json", Partition::Dev, task_relations);
  load_tasks(d, root / "test_tasks.json", Partition::Test, task_relations);

  {
    const auto path = root / "path_graph";
    std::ifstream in(path);
    if (!in) throw LoadError(path, "", "missing file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = "line " + std::to_string(line_no);
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
        throw LoadError(path, where, "expected head TAB relation TAB tail");
      }
      const EntityId h = resolve_entity(d.vocab, line.substr(0, t1), path, where);
      const RelationId r = resolve_relation(d.vocab, line.substr(t1 + 1, t2 - t1 - 1), path, where);
      const EntityId t = resolve_entity(d.vocab, line.substr(t2 + 1), path, where);
      if (task_relations.count(r)) {
        throw LoadError(path, where, "task relation '" + d.vocab.relations.name(r) +
                                         "' must not appear in the background graph");
      }
      d.store.add({h, r, t}, Partition::Background);
    }
  }

  {
    const auto path = root / "rel2candidates.json";
    json j = read_json(path);
    if (!j.is_object()) throw LoadError(path, "", "expected an object of relation -> candidates");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string where = "relation '" + it.key() + "'";
      // Candidate lists may cover relations absent from this vocabulary.
      auto rel = d.vocab.relations.find(it.key());
      if (!rel) continue;
      if (!it.value().is_array()) throw LoadError(path, where, "expected an array of entity names");
      std::vector<EntityId> cands;
      cands.reserve(it.value().size());
      for (const auto& c : it.value()) {
        if (!c.is_string()) throw LoadError(path, where, "candidate is not a string");
        cands.push_back(resolve_entity(d.vocab, c.get<std::string>(), path, where));
      }
      if (cands.empty()) throw LoadError(path, where, "empty candidate list");
      d.candidates.set(*rel, std::move(cands));
    }
    for (const auto& task : d.tasks) {
      const std::string where = "relation '" + d.vocab.relations.name(task.relation) + "'";
      if (!d.candidates.contains(task.relation)) throw LoadError(path, where, "no candidate list");
      const bool check = task.split != Partition::Train || options.check_train_candidates;
      if (!check) continue;
      const auto& cands = d.candidates.at(task.relation);
      std::unordered_set<EntityId> cset(cands.begin(), cands.end());
      for (std::size_t i = 0; i < task.pairs.size(); ++i) {
        if (!cset.count(task.pairs[i].tail)) {
          throw LoadError(path, where, "gold tail '" + d.vocab.entities.name(task.pairs[i].tail) + "' of " +
                                           std::string(to_string(task.split)) + " record " + std::to_string(i) +
                                           " is not a candidate");
        }
      }
    }
  }
  return d;
}

TaskSplit designate_references(const Task& task, std::size_t k, ReferenceSelection selection, std::uint64_t seed) {
  if (task.pairs.size() <= k) {
    throw Error("insufficient triples for K-shot episode (relation id " + std::to_string(task.relation) + " has " +
                std::to_string(task.pairs.size()) + ", K=" + std::to_string(k) + ")");
  }
  std::vector<std::size_t> order(task.pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (selection == ReferenceSelection::SeededShuffle) {
    Rng rng = Rng::substream(seed, "references", static_cast<std::uint64_t>(task.relation));
    std::shuffle(order.begin(), order.end(), rng.engine());
  }
  TaskSplit out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < k ? out.references : out.queries).push_back(task.pairs[order[i]]);
  }
  return out;
}

}  // namespace faan
