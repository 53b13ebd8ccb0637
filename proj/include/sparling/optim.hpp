#pragma once

#include <cstdint>
#include <vector>

#include "sparling/graph.hpp"

namespace sparling {

/// Adam moments and hyperparameters for a fixed list of parameters.
struct OptimizerState {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// One bias-corrected Adam update over `params` using their accumulated
/// gradients. Frozen parameters are left untouched. Moments are allocated
/// on the first call.
void adam_step(std::vector<Parameter*>& params, OptimizerState& state);

}  // namespace sparling
