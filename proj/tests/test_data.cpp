#include <algorithm>
#include <set>

#include "doctest.h"
#include "faan/data/dataset.hpp"
#include "faan/data/episode.hpp"
#include "faan/data/neighbor_index.hpp"
#include "faan/data/synthetic.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace faan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path mini_copy(const std::string& name) {
  const auto dir = test::scratch(name);
  fs::copy(test::fixture("mini"), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

std::string load_error(const fs::path& dir) {
  try {
    load_dataset(dir);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

}  // namespace

TEST_CASE("mini fixture loads with the expected counts") {
  const Dataset d = load_dataset(test::fixture("mini"));
  const auto s = d.stats();
  CHECK(s.entities == 8);
  CHECK(s.relations == 5);
  CHECK(s.triples == 12);
  CHECK(s.background_triples == 6);
  CHECK(s.tasks == 3);
  CHECK(s.train_tasks == 1);
  CHECK(s.dev_tasks == 1);
  CHECK(s.test_tasks == 1);

  const RelationId tr = d.vocab.relations.id("tr");
  const Task* task = d.find_task(tr);
  REQUIRE(task != nullptr);
  CHECK(task->split == Partition::Train);
  REQUIRE(task->pairs.size() == 2);
  CHECK(task->pairs[0] == EntityPair{d.vocab.entities.id("a"), d.vocab.entities.id("c")});
  CHECK(d.candidates.at(tr).size() == 3);
  // The unused relation in rel2candidates is skipped.
  CHECK(d.candidates.size() == 3);
  CHECK(d.store.count(Partition::Background) == 6);
  CHECK(d.store.count(Partition::Test) == 2);
}

TEST_CASE("every evaluation gold tail is a candidate") {
  for (std::uint64_t seed : {1u, 2u}) {
    const Dataset& d = test::synthetic(seed);
    for (auto split : {Partition::Dev, Partition::Test}) {
      for (const Task* t : d.tasks_in(split)) {
        const auto& c = d.candidates.at(t->relation);
        for (const auto& p : t->pairs) CHECK(std::find(c.begin(), c.end(), p.tail) != c.end());
      }
    }
  }
}

TEST_CASE("loader errors name the file and the record") {
  {
    auto dir = mini_copy("err_missing");
    fs::remove(dir / "rel2candidates.json");
    auto e = load_error(dir);
    CHECK(contains(e, "rel2candidates.json"));
    CHECK(contains(e, "missing file"));
  }
  {
    auto dir = mini_copy("err_json");
    write(dir / "dev_tasks.json", "{\"dv\": [");
    auto e = load_error(dir);
    CHECK(contains(e, "dev_tasks.json"));
    CHECK(contains(e, "malformed JSON"));
  }
  {
    auto dir = mini_copy("err_entity");
    write(dir / "path_graph", "a\tp\tb\nb\tp\tzz\n");
    auto e = load_error(dir);
    CHECK(contains(e, "path_graph line 2"));
    CHECK(contains(e, "unknown entity 'zz'"));
  }
  {
    auto dir = mini_copy("err_columns");
    write(dir / "path_graph", "a\tp\n");
    CHECK(contains(load_error(dir), "expected head TAB relation TAB tail"));
  }
  {
    auto dir = mini_copy("err_task_in_graph");
    write(dir / "path_graph", "a\ttr\tb\n");
    CHECK(contains(load_error(dir), "must not appear in the background graph"));
  }
  {
    auto dir = mini_copy("err_candidate");
    write(dir / "rel2candidates.json", R"({"tr": ["c", "d"], "dv": ["e", "f"], "ts": ["g"]})");
    auto e = load_error(dir);
    CHECK(contains(e, "relation 'ts'"));
    CHECK(contains(e, "gold tail 'h'"));
  }
  {
    auto dir = mini_copy("err_no_list");
    write(dir / "rel2candidates.json", R"({"tr": ["c", "d"], "dv": ["e", "f"]})");
    CHECK(contains(load_error(dir), "no candidate list"));
  }
  {
    auto dir = mini_copy("err_ids");
    write(dir / "relation2ids.json", R"({"p": 0, "q": 1, "tr": 2, "dv": 3, "ts": 7})");
    CHECK(contains(load_error(dir), "not dense"));
  }
  {
    auto dir = mini_copy("err_two_splits");
    write(dir / "test_tasks.json", R"({"dv": [["e", "dv", "g"]]})");
    CHECK(contains(load_error(dir), "more than one split"));
  }
  {
    auto dir = mini_copy("err_mismatch");
    write(dir / "train_tasks.json", R"({"tr": [["a", "p", "c"]]})");
    CHECK(contains(load_error(dir), "differs from its task"));
  }
}

TEST_CASE("train candidate check is optional") {
  auto dir = mini_copy("train_cands");
  write(dir / "rel2candidates.json", R"({"tr": ["e"], "dv": ["e", "f"], "ts": ["g", "h"]})");
  CHECK_NOTHROW(load_dataset(dir));
  LoadOptions strict;
  strict.check_train_candidates = true;
  CHECK_THROWS_AS(load_dataset(dir, strict), Error);
}

TEST_CASE("reference designation") {
  const Dataset& d = test::synthetic(1);
  const Task* t = d.tasks_in(Partition::Test).front();
  auto fo = designate_references(*t, 5, ReferenceSelection::FileOrder, 0);
  REQUIRE(fo.references.size() == 5);
  CHECK(fo.queries.size() == t->pairs.size() - 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(fo.references[i] == t->pairs[i]);

  auto a = designate_references(*t, 5, ReferenceSelection::SeededShuffle, 3);
  auto b = designate_references(*t, 5, ReferenceSelection::SeededShuffle, 3);
  auto c = designate_references(*t, 5, ReferenceSelection::SeededShuffle, 4);
  CHECK(a.references == b.references);
  CHECK(a.queries == b.queries);
  CHECK(a.references != c.references);
  std::set<EntityPair> all(a.references.begin(), a.references.end());
  all.insert(a.queries.begin(), a.queries.end());
  CHECK(all.size() == t->pairs.size());

  Task small{t->relation, Partition::Test, {t->pairs.begin(), t->pairs.begin() + 3}};
  CHECK_THROWS_WITH_AS(designate_references(small, 3, ReferenceSelection::FileOrder, 0),
                       doctest::Contains("insufficient triples for K-shot episode"), Error);
}

TEST_CASE("neighbor index reads the background graph with inverse edges") {
  const Dataset d = load_dataset(test::fixture("mini"));
  auto idx = NeighborIndex::build(d.store, d.num_entities(), 50, true, 1);
  const auto b = d.vocab.entities.id("b");
  const auto p = d.vocab.relations.id("p");
  auto nb = idx.neighbors(b);
  // a -p-> b and b -p-> c; the task triple (b, tr, d) is not background.
  REQUIRE(nb.size() == 2);
  CHECK(std::count(nb.begin(), nb.end(), NeighborRecord{p, d.vocab.entities.id("c"), Direction::Out}) == 1);
  CHECK(std::count(nb.begin(), nb.end(), NeighborRecord{p, d.vocab.entities.id("a"), Direction::In}) == 1);
  CHECK(idx.total_records() == 12);

  auto out_only = NeighborIndex::build(d.store, d.num_entities(), 50, false, 1);
  CHECK(out_only.total_records() == 6);
  CHECK(out_only.neighbors(d.vocab.entities.id("h")).empty());
}

TEST_CASE("neighbor lists are capped deterministically") {
  TripleStore store;
  for (EntityId t = 1; t <= 30; ++t) store.add({0, 0, t}, Partition::Background);
  auto a = NeighborIndex::build(store, 31, 10, true, 5);
  auto b = NeighborIndex::build(store, 31, 10, true, 5);
  auto c = NeighborIndex::build(store, 31, 10, true, 6);
  CHECK(a.neighbors(0).size() == 10);
  CHECK(a.neighbors(7).size() == 1);
  CHECK(a == b);
  CHECK(!(a == c));
  // Sampled records keep their original relative order.
  auto nb = a.neighbors(0);
  for (std::size_t i = 1; i < nb.size(); ++i) CHECK(nb[i - 1].entity < nb[i].entity);
  std::set<EntityId> distinct;
  for (const auto& r : nb) distinct.insert(r.entity);
  CHECK(distinct.size() == 10);
}

TEST_CASE("episodes respect their contracts") {
  const Dataset& d = test::synthetic(1);
  EpisodeOptions o;
  o.k = 5;
  o.query_batch_size = 16;
  o.negatives_per_query = 3;
  for (auto strategy : {NegativeStrategy::Uniform, NegativeStrategy::Candidates}) {
    o.negatives = strategy;
    Rng rng(11);
    for (int i = 0; i < 50; ++i) {
      Episode ep = sample_episode(d, Partition::Train, std::nullopt, o, rng);
      const Task* task = d.find_task(ep.relation);
      REQUIRE(task != nullptr);
      CHECK(task->split == Partition::Train);
      CHECK(ep.references.size() == 5);
      CHECK(ep.queries.size() == std::min<std::size_t>(16, task->pairs.size() - 5));
      CHECK(ep.negatives.size() == ep.queries.size() * 3);
      std::set<EntityPair> refs(ep.references.begin(), ep.references.end());
      CHECK(refs.size() == 5);
      for (std::size_t q = 0; q < ep.queries.size(); ++q) {
        CHECK(refs.count(ep.queries[q]) == 0);
        for (std::size_t j = 0; j < 3; ++j) {
          const EntityId neg = ep.negatives[q * 3 + j];
          CHECK(neg != ep.queries[q].tail);
          if (strategy == NegativeStrategy::Candidates) {
            CHECK(std::find(ep.candidates.begin(), ep.candidates.end(), neg) != ep.candidates.end());
          }
        }
      }
    }
  }
  Rng r1(3), r2(3);
  auto e1 = sample_episode(d, Partition::Train, std::nullopt, o, r1);
  auto e2 = sample_episode(d, Partition::Train, std::nullopt, o, r2);
  CHECK(e1.queries == e2.queries);
  CHECK(e1.negatives == e2.negatives);
  CHECK(describe_episode(d, e1).find(d.vocab.relations.name(e1.relation)) != std::string::npos);

  const Dataset mini = load_dataset(test::fixture("mini"));
  Rng r3(1);
  CHECK_THROWS_WITH_AS(sample_episode(mini, Partition::Train, std::nullopt, o, r3),
                       doctest::Contains("insufficient triples"), Error);
}

TEST_CASE("synthetic datasets are byte-deterministic per seed") {
  const auto a = test::scratch("syn_a");
  const auto b = test::scratch("syn_b");
  const auto c = test::scratch("syn_c");
  make_synthetic(SyntheticSpec{}, 17, a);
  make_synthetic(SyntheticSpec{}, 17, b);
  make_synthetic(SyntheticSpec{}, 18, c);
  std::size_t files = 0;
  bool any_diff = false;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename();
    CHECK(test::read_file(a / name) == test::read_file(b / name));
    any_diff |= test::read_file(a / name) != test::read_file(c / name);
    ++files;
  }
  CHECK(files >= 9);
  CHECK(any_diff);
  CHECK_NOTHROW(load_dataset(a));
}

TEST_CASE("synthetic answer key agrees with the planted triples") {
  const auto& dir = test::synthetic_dir(2);
  const Dataset& d = test::synthetic(2);
  const auto key = SyntheticAnswerKey::load(dir / "answer_key.json");
  const SyntheticSpec spec;
  int polysemous_eval = 0;
  for (const auto& task : d.tasks) {
    const std::string rel = d.vocab.relations.name(task.relation);
    const auto& rule = key.rule(rel);
    CHECK(rule.split == to_string(task.split));
    CHECK(rule.shift_by_cluster.size() == static_cast<std::size_t>(spec.clusters));
    if (rule.polysemous) {
      CHECK(rule.shift_by_cluster[0] != rule.shift_by_cluster[1]);
      if (task.split != Partition::Train) ++polysemous_eval;
    }
    std::set<int> clusters;
    for (const auto& p : task.pairs) {
      const auto h = d.vocab.entities.name(p.head);
      const auto t = d.vocab.entities.name(p.tail);
      CHECK(key.answer(rel, h) == t);
      CHECK(key.cluster_of(h) == key.cluster_of(t));
      clusters.insert(key.cluster_of(h));
    }
    CHECK(clusters.size() == 2);
    // Candidate lists span both clusters.
    std::set<int> cand_clusters;
    for (EntityId c : d.candidates.at(task.relation)) cand_clusters.insert(key.cluster_of(d.vocab.entities.name(c)));
    CHECK(cand_clusters.size() == 2);
  }
  CHECK(polysemous_eval >= 1);
  CHECK(d.num_entities() == 50);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec s;
  s.clusters = 1;
  CHECK_THROWS_AS(s.validate(), Error);
  s = SyntheticSpec{};
  s.entities_per_cluster = 4;
  CHECK_THROWS_AS(s.validate(), Error);
  s = SyntheticSpec{};
  s.max_shift = 1;
  CHECK_THROWS_AS(s.validate(), Error);
  s = SyntheticSpec{};
  json j = s;
  CHECK(j.get<SyntheticSpec>().max_shift == s.max_shift);
}
