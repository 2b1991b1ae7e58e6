#ifndef FAAN_EVAL_SCORERS_HPP
#define FAAN_EVAL_SCORERS_HPP

#include <memory>

#include "faan/data/synthetic.hpp"
#include "faan/eval/metrics.hpp"
#include "faan/model/faan.hpp"

namespace faan {

/// Ranks with a FAAN model; references are encoded once per relation.
template <typename Scalar>
class FaanScorer : public LinkScorer {
 public:
  explicit FaanScorer(const Model<Scalar>& model, std::size_t chunk = 256) : model_(model), chunk_(chunk) {}

  QueryScorer bind(RelationId, std::span<const EntityPair> references) const override {
    auto refs = std::make_shared<const Matrix<Scalar>>(model_.encode_references(references));
    return [this, refs](EntityId head, std::span<const EntityId> candidates) {
      const auto s = model_.score_candidates(*refs, head, candidates, chunk_);
      return std::vector<double>(s.begin(), s.end());
    };
  }

 private:
  const Model<Scalar>& model_;
  std::size_t chunk_;
};

/// Perfect ranker for synthetic data: 1 for the answer-key tail, 0 otherwise.
/// `negate` flips the sign, which ranks every gold tail last.
class OracleScorer : public LinkScorer {
 public:
  OracleScorer(const SyntheticAnswerKey& key, const Vocab& vocab, bool negate = false)
      : key_(key), vocab_(vocab), sign_(negate ? -1.0 : 1.0) {}

  QueryScorer bind(RelationId relation, std::span<const EntityPair>) const override {
    const std::string rel = vocab_.relations.name(relation);
    return [this, rel](EntityId head, std::span<const EntityId> candidates) {
      const auto answer = key_.answer(rel, vocab_.entities.name(head));
      std::vector<double> scores(candidates.size(), 0.0);
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (answer && vocab_.entities.name(candidates[i]) == *answer) scores[i] = sign_;
      }
      return scores;
    };
  }

 private:
  const SyntheticAnswerKey& key_;
  const Vocab& vocab_;
  double sign_;
};

}  // namespace faan

#endif  // FAAN_EVAL_SCORERS_HPP
