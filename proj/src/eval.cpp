#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <ostream>
#include <thread>

#include "faan/eval/metrics.hpp"

namespace faan {

Metrics compute_metrics(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("compute_metrics: no ranks");
  Metrics m;
  for (std::size_t r : ranks) {
    if (r < 1) throw Error("compute_metrics: rank below 1");
    m.mrr += 1.0 / static_cast<double>(r);
    m.hits1 += r <= 1;
    m.hits5 += r <= 5;
    m.hits10 += r <= 10;
  }
  const auto n = static_cast<double>(ranks.size());
  m.mrr /= n;
  m.hits1 /= n;
  m.hits5 /= n;
  m.hits10 /= n;
  m.count = ranks.size();
  return m;
}

std::size_t default_eval_threads() {
  if (const char* env = std::getenv("FAAN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = count;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

RankReport evaluate_split(const LinkScorer& scorer, const Dataset& data, Partition split,
                          const EvalOptions& options) {
  const std::size_t threads = options.threads > 0 ? options.threads : default_eval_threads();
  RankReport report;
  std::vector<std::size_t> all_ranks;
  for (const Task* task : data.tasks_in(split)) {
    const std::string& name = data.vocab.relations.name(task->relation);
    if (!data.candidates.contains(task->relation)) throw Error("relation '" + name + "' has no candidate list");
    const auto& candidates = data.candidates.at(task->relation);
    if (candidates.empty()) throw Error("relation '" + name + "' has an empty candidate list");
    const TaskSplit ts = designate_references(*task, options.k, options.selection, options.seed);
    std::span<const EntityPair> queries(ts.queries);
    if (options.max_queries_per_relation > 0 && queries.size() > options.max_queries_per_relation) {
      queries = queries.first(options.max_queries_per_relation);
    }
    const QueryScorer score = scorer.bind(task->relation, ts.references);

    std::vector<QueryRank> ranks(queries.size());
    parallel_for(queries.size(), threads, [&](std::size_t i) {
      const EntityPair& q = queries[i];
      auto it = std::find(candidates.begin(), candidates.end(), q.tail);
      std::vector<double> scores;
      std::size_t gold_index = 0;
      if (it != candidates.end()) {
        scores = score(q.head, candidates);
        gold_index = static_cast<std::size_t>(it - candidates.begin());
      } else {
        // Gold outside the type-constrained list (possible for train tasks).
        std::vector<EntityId> extended(candidates);
        extended.push_back(q.tail);
        scores = score(q.head, extended);
        gold_index = candidates.size();
      }
      if (scores.size() != candidates.size() + (it == candidates.end())) {
        throw Error("scorer returned the wrong number of scores for relation '" + name + "'");
      }
      ranks[i] = {task->relation, q.head, q.tail, rank_of_gold<double>(scores, gold_index), scores.size()};
    });

    if (ranks.empty()) continue;
    std::vector<std::size_t> rel_ranks;
    for (const auto& r : ranks) rel_ranks.push_back(r.rank);
    report.per_relation.push_back({task->relation, candidates.size(), compute_metrics(rel_ranks)});
    all_ranks.insert(all_ranks.end(), rel_ranks.begin(), rel_ranks.end());
    report.queries.insert(report.queries.end(), ranks.begin(), ranks.end());
  }
  if (all_ranks.empty()) throw Error("split " + std::string(to_string(split)) + " has no queries to evaluate");
  report.overall = compute_metrics(all_ranks);
  return report;
}

void write_report_tsv(std::ostream& out, const RankReport& report, const Vocab& vocab) {
  char buf[160];
  out << "relation\tn_candidates\tn_queries\tmrr\thits1\thits5\thits10\n";
  auto row = [&](const std::string& name, std::size_t cands, const Metrics& m) {
    std::snprintf(buf, sizeof(buf), "\t%zu\t%zu\t%.6f\t%.6f\t%.6f\t%.6f\n", cands, m.count, m.mrr, m.hits1, m.hits5,
                  m.hits10);
    out << name << buf;
  };
  std::size_t total_cands = 0;
  for (const auto& r : report.per_relation) {
    row(vocab.relations.name(r.relation), r.candidates, r.metrics);
    total_cands += r.candidates;
  }
  row("OVERALL", total_cands, report.overall);
}

void write_report_table(std::ostream& out, const RankReport& report, const Vocab& vocab) {
  std::size_t width = 8;
  for (const auto& r : report.per_relation) width = std::max(width, vocab.relations.name(r.relation).size());
  char buf[160];
  auto row = [&](const std::string& name, const std::string& cands, const Metrics& m) {
    std::snprintf(buf, sizeof(buf), "  %8s %8zu %7.3f %7.3f %7.3f %7.3f\n", cands.c_str(), m.count, m.mrr, m.hits1,
                  m.hits5, m.hits10);
    out << name << std::string(width - name.size(), ' ') << buf;
  };
  out << "relation" << std::string(width - 8, ' ') << "     cands  queries     MRR  Hits@1  Hits@5 Hits@10\n";
  for (const auto& r : report.per_relation) row(vocab.relations.name(r.relation), std::to_string(r.candidates), r.metrics);
  row("OVERALL", "", report.overall);
}

}  // namespace faan
