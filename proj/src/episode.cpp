#include <algorithm>
#include <numeric>
#include <sstream>

#include "faan/data/episode.hpp"

namespace faan {

Episode sample_episode(const Dataset& data, Partition split, std::optional<RelationId> relation,
                       const EpisodeOptions& options, Rng& rng) {
  if (options.k < 1) throw Error("K must be at least 1");
  if (options.negatives_per_query < 1) throw Error("negatives_per_query must be at least 1");
  const Task* task = nullptr;
  if (relation) {
    task = data.find_task(*relation);
    if (!task || task->split != split) {
      throw Error("relation id " + std::to_string(*relation) + " is not a task of the " +
                  std::string(to_string(split)) + " split");
    }
  } else {
    const auto tasks = data.tasks_in(split);
    if (tasks.empty()) throw Error("split " + std::string(to_string(split)) + " has no tasks");
    task = tasks[rng.index(tasks.size())];
  }
  if (task->pairs.size() <= options.k) {
    throw Error("insufficient triples for K-shot episode: relation '" +
                data.vocab.relations.name(task->relation) + "' has " + std::to_string(task->pairs.size()) +
                " triples, K=" + std::to_string(options.k));
  }

  std::vector<std::size_t> order(task->pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());

  Episode ep;
  ep.relation = task->relation;
  ep.negatives_per_query = options.negatives_per_query;
  ep.candidates = data.candidates.at(task->relation);
  for (std::size_t i = 0; i < options.k; ++i) ep.references.push_back(task->pairs[order[i]]);
  const std::size_t nq = std::min(options.query_batch_size, order.size() - options.k);
  for (std::size_t i = 0; i < nq; ++i) ep.queries.push_back(task->pairs[order[options.k + i]]);

  const std::size_t num_entities = data.num_entities();
  for (const auto& q : ep.queries) {
    for (std::size_t j = 0; j < options.negatives_per_query; ++j) {
      EntityId neg = q.tail;
      if (options.negatives == NegativeStrategy::Uniform) {
        if (num_entities < 2) throw Error("cannot corrupt a tail with fewer than two entities");
        // Uniform over E \ {gold}: draw from n-1 slots and skip the gold id.
        auto draw = static_cast<EntityId>(rng.index(num_entities - 1));
        neg = draw >= q.tail ? draw + 1 : draw;
      } else {
        const auto& cands = ep.candidates;
        const auto others = static_cast<std::size_t>(
            std::count_if(cands.begin(), cands.end(), [&](EntityId c) { return c != q.tail; }));
        if (others == 0) throw Error("candidate list offers no negative for relation '" +
                                     data.vocab.relations.name(task->relation) + "'");
        std::size_t pick = rng.index(others);
        for (EntityId c : cands) {
          if (c == q.tail) continue;
          if (pick-- == 0) {
            neg = c;
            break;
          }
        }
      }
      ep.negatives.push_back(neg);
    }
  }
  return ep;
}

std::string describe_episode(const Dataset& data, const Episode& ep) {
  const auto& ents = data.vocab.entities;
  std::ostringstream os;
  os << "relation: " << data.vocab.relations.name(ep.relation) << "\nreferences:";
  for (const auto& r : ep.references) os << " (" << ents.name(r.head) << ", " << ents.name(r.tail) << ")";
  os << "\nqueries:";
  for (std::size_t i = 0; i < ep.queries.size(); ++i) {
    const auto& q = ep.queries[i];
    os << " (" << ents.name(q.head) << ", " << ents.name(q.tail) << " / neg";
    for (std::size_t j = 0; j < ep.negatives_per_query; ++j) {
      os << ' ' << ents.name(ep.negatives[i * ep.negatives_per_query + j]);
    }
    os << ")";
  }
  os << '\n';
  return os.str();
}

}  // namespace faan
