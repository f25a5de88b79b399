#pragma once

#include <cstdint>
#include <vector>

#include "dnbp/tape.hpp"

namespace dnbp {

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step_count = 0;
  float learning_rate = 1e-3f;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam(const ParamStore& params, float learning_rate);

/// One bias-corrected Adam update. Throws NumericError (and leaves both the
/// parameters and the state untouched) if any gradient is non-finite.
void adam_step(ParamStore& params, const Gradients& grads, AdamState& state);

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

}  // namespace dnbp
