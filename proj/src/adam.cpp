#include "dnbp/adam.hpp"

#include <cmath>

#include "dnbp/error.hpp"

namespace dnbp {

AdamState make_adam(const ParamStore& params, float learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.value.shape, 0.0f);
    s.second_moment.emplace_back(p.value.shape, 0.0f);
  }
  return s;
}

void adam_step(ParamStore& params, const Gradients& grads, AdamState& state) {
  if (static_cast<int>(grads.grads.size()) != params.size() ||
      static_cast<int>(state.first_moment.size()) != params.size())
    throw ShapeError("adam_step: parameter, gradient and moment counts disagree");
  if (!(state.learning_rate >= 0.0f) || !(state.beta1 > 0.0) || !(state.beta2 > 0.0) || !(state.epsilon > 0.0))
    throw Error("adam_step: hyperparameters must be positive");
  for (int i = 0; i < params.size(); ++i) {
    if (grads[i].shape != params[i].value.shape)
      throw ShapeError("adam_step: gradient shape mismatch for '" + params[i].name + "'");
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for '" + params[i].name + "'");
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params[i].value.data;
    auto& m = state.first_moment[i].data;
    auto& v = state.second_moment[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double mhat = mk / c1;
      const double vhat = vk / c2;
      p[k] -= static_cast<float>(state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double n = grads.global_norm();
  if (n > max_norm) grads.scale(static_cast<float>(max_norm / n));
  return n;
}

}  // namespace dnbp
