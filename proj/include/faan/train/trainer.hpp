#ifndef FAAN_TRAIN_TRAINER_HPP
#define FAAN_TRAIN_TRAINER_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "faan/core/autodiff.hpp"
#include "faan/core/param_store.hpp"
#include "faan/data/episode.hpp"
#include "faan/eval/metrics.hpp"
#include "faan/model/faan.hpp"
#include "json.hpp"

namespace faan {

struct TrainConfig {
  std::size_t k = 5;
  std::size_t query_batch_size = 128;
  std::size_t negatives_per_query = 1;
  NegativeStrategy negatives = NegativeStrategy::Uniform;
  std::size_t max_steps = 300000;
  std::size_t warmup_steps = 10000;
  std::size_t eval_every = 10000;
  std::size_t log_every = 100;
  double margin = 5.0;
  double learning_rate = 5e-5;
  double l2 = 0.0;
  /// Entity embeddings are left out of the L2 penalty unless this is set.
  bool l2_entity_embeddings = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Validation queries per relation (first N); 0 means all.
  std::size_t val_max_queries = 1000;
  ReferenceSelection selection = ReferenceSelection::FileOrder;
  std::uint64_t seed = 42;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Sum over pairs of max(0, margin + neg - pos). Negative i belongs to
/// positive i / negatives_per_query.
template <typename Scalar>
Var<Scalar> hinge_loss(const Var<Scalar>& positive, const Var<Scalar>& negative, Scalar margin,
                       std::size_t negatives_per_query = 1) {
  if (positive.cols() != 1 || negative.cols() != 1) throw Error("hinge_loss: expected score columns");
  if (negatives_per_query == 0 ||
      static_cast<std::size_t>(negative.rows()) != static_cast<std::size_t>(positive.rows()) * negatives_per_query) {
    throw Error("hinge_loss: " + std::to_string(negative.rows()) + " negative scores for " +
                std::to_string(positive.rows()) + " positive scores");
  }
  std::vector<Index> owner(static_cast<std::size_t>(negative.rows()));
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = static_cast<Index>(i / negatives_per_query);
  return sum(relu(add_scalar(sub(negative, gather_rows(positive, std::move(owner))), margin)));
}

double hinge_loss(std::span<const double> positive, std::span<const double> negative, double margin);

/// Linear warmup from 0 to peak over [0, warmup], then linear decay to 0 at
/// max_steps. Steps past max_steps give 0.
double lr_schedule(std::size_t step, double peak, std::size_t warmup_steps, std::size_t max_steps);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update at time t >= 1, with grad += 2 * l2 * w.
template <typename Scalar>
void adam_update(Matrix<Scalar>& w, const Matrix<Scalar>& grad, Matrix<Scalar>& m, Matrix<Scalar>& v, std::size_t t,
                 double lr, const AdamConfig& cfg, double l2 = 0.0) {
  if (grad.rows() != w.rows() || grad.cols() != w.cols() || m.rows() != w.rows() || m.cols() != w.cols() ||
      v.rows() != w.rows() || v.cols() != w.cols()) {
    throw Error("adam_update: shape mismatch");
  }
  if (t == 0) throw Error("adam_update: time step starts at 1");
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, static_cast<double>(t)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, static_cast<double>(t)));
  const auto step = static_cast<Scalar>(lr);
  const auto eps = static_cast<Scalar>(cfg.eps);
  const auto decay = static_cast<Scalar>(2.0 * l2);
  for (Index i = 0; i < w.size(); ++i) {
    const Scalar g = grad.data()[i] + decay * w.data()[i];
    Scalar& mi = m.data()[i];
    Scalar& vi = v.data()[i];
    mi = b1 * mi + (Scalar(1) - b1) * g;
    vi = b2 * vi + (Scalar(1) - b2) * g * g;
    w.data()[i] -= step * (mi / c1) / (std::sqrt(vi / c2) + eps);
  }
}

/// Adam moments for every gradient-tracking tensor of a store.
template <typename Scalar>
struct AdamState {
  ParamStore<Scalar> m;
  ParamStore<Scalar> v;
  std::size_t t = 0;

  static AdamState zeros_like(const ParamStore<Scalar>& params);
};

/// Applies one update to every tensor that tracks gradients. `l2_mask`
/// selects the tensors the penalty applies to.
template <typename Scalar>
void adam_step(ParamStore<Scalar>& params, AdamState<Scalar>& state, double lr, const AdamConfig& cfg, double l2,
               const std::function<bool(const std::string&)>& l2_mask = {});

/// l2 * sum of squared values over the masked tensors.
template <typename Scalar>
double l2_penalty(const ParamStore<Scalar>& params, double l2, const std::function<bool(const std::string&)>& mask);

/// Sum of squares over all gradient-tracking tensors, as a norm.
template <typename Scalar>
double parameter_norm(const ParamStore<Scalar>& params);

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<Metrics> validation;
};

struct TrainSummary {
  std::size_t final_step = 0;
  std::size_t best_step = 0;
  double best_val_mrr = -1.0;
  bool validated = false;
  std::filesystem::path best_checkpoint;
  std::filesystem::path log_path;
};

/// Episodic meta-training loop. Every step draws its episode and dropout
/// masks from streams keyed by (seed, step), so a run resumed from a state
/// checkpoint continues exactly as the uninterrupted run would have.
template <typename Scalar>
class Trainer {
 public:
  Trainer(Model<Scalar>& model, const Dataset& data, TrainConfig config);

  const TrainConfig& config() const noexcept { return config_; }
  std::size_t current_step() const noexcept { return step_; }
  double best_val_mrr() const noexcept { return best_val_mrr_; }
  std::size_t best_step() const noexcept { return best_step_; }

  /// One optimizer update; returns hinge loss plus L2 penalty for the step.
  double step();
  /// Link prediction on the dev split under the configured protocol.
  Metrics validate(std::size_t threads = 0) const;

  /// Runs to max_steps. With an output directory: appends rows to
  /// train_log.tsv, keeps best.ckpt (highest validation MRR) and a resumable
  /// state.ckpt refreshed at every validation.
  TrainSummary run(const std::optional<std::filesystem::path>& out_dir,
                   const std::function<void(const TrainLogRow&)>& on_row = {});

  /// Parameters, Adam moments and loop counters with a JSON sidecar.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

  std::string config_hash() const;

 private:
  bool l2_applies(const std::string& name) const;

  Model<Scalar>& model_;
  const Dataset& data_;
  TrainConfig config_;
  AdamState<Scalar> adam_;
  std::size_t step_ = 0;
  double best_val_mrr_ = -1.0;
  std::size_t best_step_ = 0;
  double loss_sum_ = 0.0;
  std::size_t loss_count_ = 0;
};

/// Writes a checkpoint and its sidecar (config hash, step, validation MRR,
/// model config) atomically.
template <typename Scalar>
void save_model(const std::filesystem::path& path, const Model<Scalar>& model, const nlohmann::json& sidecar);

/// Sidecar path for a checkpoint: "<path>.json".
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace faan

#endif  // FAAN_TRAIN_TRAINER_HPP
