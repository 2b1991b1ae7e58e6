#ifndef FAAN_CORE_GRAD_CHECK_HPP
#define FAAN_CORE_GRAD_CHECK_HPP

#include <cstdint>
#include <functional>
#include <string>

#include "faan/core/autodiff.hpp"
#include "faan/core/param_store.hpp"

namespace faan {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Builds the scalar loss on the given tape from the parameters.
using LossBuilder = std::function<Var<double>(Tape<double>&, ParamStore<double>&)>;

/// Compares reverse-mode gradients against central differences.
///
/// Checks every coordinate of every gradient-tracking tensor, or a seeded
/// sample of `max_coords_per_tensor` of them when that is positive. The
/// error per coordinate is |a - n| / max(|a|, |n|, floor); the floor keeps
/// rounding noise on gradients that are zero in exact arithmetic from
/// dominating. The builder must be
/// deterministic; parameter values are restored afterwards.
GradCheckResult grad_check(const LossBuilder& loss_fn, ParamStore<double>& params, double eps = 1e-5,
                           Index max_coords_per_tensor = 0, std::uint64_t seed = 0, double floor = 1e-8);

}  // namespace faan

#endif  // FAAN_CORE_GRAD_CHECK_HPP
