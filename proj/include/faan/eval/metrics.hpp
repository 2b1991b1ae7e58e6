#ifndef FAAN_EVAL_METRICS_HPP
#define FAAN_EVAL_METRICS_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "faan/data/dataset.hpp"

namespace faan {

/// 1 + #{scores > gold} + #{scores == gold, other index}: the gold entity
/// ranks last among ties.
template <typename Scalar>
std::size_t rank_of_gold(std::span<const Scalar> scores, std::size_t gold_index) {
  if (scores.empty()) throw Error("rank_of_gold: empty score list");
  if (gold_index >= scores.size()) throw Error("rank_of_gold: gold index out of range");
  const Scalar g = scores[gold_index];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != gold_index && scores[i] >= g) ++rank;
  }
  return rank;
}

struct Metrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits5 = 0.0;
  double hits10 = 0.0;
  std::size_t count = 0;
};

/// Throws on an empty list or a rank below 1.
Metrics compute_metrics(std::span<const std::size_t> ranks);

struct QueryRank {
  RelationId relation = 0;
  EntityId head = 0;
  EntityId gold = 0;
  std::size_t rank = 0;
  std::size_t candidates = 0;
};

struct RelationMetrics {
  RelationId relation = 0;
  std::size_t candidates = 0;
  Metrics metrics;
};

struct RankReport {
  std::vector<QueryRank> queries;
  std::vector<RelationMetrics> per_relation;  ///< in task order
  Metrics overall;
};

/// Scores a query head against every candidate tail, in candidate order.
using QueryScorer = std::function<std::vector<double>(EntityId head, std::span<const EntityId> candidates)>;

/// Anything that ranks candidate tails given a relation's references.
class LinkScorer {
 public:
  virtual ~LinkScorer() = default;
  /// Prepares reference-dependent state once per relation. The returned
  /// scorer must be safe to call from several threads at once.
  virtual QueryScorer bind(RelationId relation, std::span<const EntityPair> references) const = 0;
};

struct EvalOptions {
  std::size_t k = 5;
  ReferenceSelection selection = ReferenceSelection::FileOrder;
  std::uint64_t seed = 0;
  /// Per-relation cap on queries (first N); 0 means all.
  std::size_t max_queries_per_relation = 0;
  /// 0 picks FAAN_THREADS or the hardware concurrency.
  std::size_t threads = 0;
};

/// Threads for evaluation: FAAN_THREADS when set to a positive integer,
/// otherwise the hardware concurrency.
std::size_t default_eval_threads();

/// Ranks every query of `split` among its relation's candidates. Results do
/// not depend on the thread count.
RankReport evaluate_split(const LinkScorer& scorer, const Dataset& data, Partition split,
                          const EvalOptions& options);

/// Columns relation, n_candidates, n_queries, mrr, hits1, hits5, hits10 and
/// a final OVERALL row.
void write_report_tsv(std::ostream& out, const RankReport& report, const Vocab& vocab);
void write_report_table(std::ostream& out, const RankReport& report, const Vocab& vocab);

}  // namespace faan

#endif  // FAAN_EVAL_METRICS_HPP
