#include "sparling/optim.hpp"

#include <cmath>

namespace sparling {

void adam_step(std::vector<Parameter*>& params, OptimizerState& state) {
  if (state.first_moment.empty()) {
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(state.beta1);
  const float b2 = static_cast<float>(state.beta2);
  const float step_size = static_cast<float>(state.learning_rate / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(state.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    if (m.shape() != p.value.shape()) {
      throw ShapeError("adam_step: moment shape " + shape_str(m.shape()) + " does not match parameter '" +
                       p.name + "' " + shape_str(p.value.shape()));
    }
    if (p.frozen) continue;
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const float gk = p.grad[k];
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      p.value[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
}

}  // namespace sparling
