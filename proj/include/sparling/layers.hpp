#pragma once

#include <vector>

#include "sparling/graph.hpp"

namespace sparling {

enum class Mode { Train, Eval };

/// Running statistics carried across calls of one batch-norm layer.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
  float momentum = 0.9f;
  float epsilon = 1e-5f;

  BatchNormStats() = default;
  explicit BatchNormStats(int channels) : mean(Shape{channels}, 0.0f), var(Shape{channels}, 1.0f) {}
};

namespace ops {

/// "Same" cross-correlation: x[B,H,W,Cin] * k[kh,kw,Cin,Cout] + b[Cout].
NodeId conv2d(Graph& g, NodeId input, NodeId kernel, NodeId bias);

/// Normalizes over every axis but the last. Train mode uses batch
/// statistics and updates `stats`; eval mode uses `stats`.
NodeId batchnorm(Graph& g, NodeId input, NodeId gamma, NodeId beta, BatchNormStats& stats, Mode mode);

NodeId relu(Graph& g, NodeId x);
NodeId sigmoid(Graph& g, NodeId x);
NodeId add(Graph& g, NodeId a, NodeId b);
NodeId add_scalar(Graph& g, NodeId x, float c);
NodeId scale(Graph& g, NodeId x, float c);
NodeId mean_all(Graph& g, NodeId x);
NodeId sum_all(Graph& g, NodeId x);
NodeId reshape(Graph& g, NodeId x, Shape shape);

/// Non-overlapping size×size max pooling of x[B,H,W,C]; H and W must be
/// multiples of size. Ties route gradient to the first maximum in scan order.
NodeId maxpool2d(Graph& g, NodeId x, int size);

/// Concatenates two [B,H,W,*] tensors along the channel axis.
NodeId concat_channels(Graph& g, NodeId a, NodeId b);

/// x[B,In] · w[In,Out] + b[Out].
NodeId dense(Graph& g, NodeId x, NodeId weight, NodeId bias);

/// Mean cross-entropy over the B·L slots of logits[B,L,K]; targets has B·L
/// entries in [0,K).
NodeId softmax_xent(Graph& g, NodeId logits, const std::vector<int>& targets);

/// KL(Bernoulli(rho) || Bernoulli(mean)) in nats for a scalar node `mean`,
/// with mean clamped to [1e-7, 1-1e-7].
NodeId kl_bernoulli(Graph& g, NodeId mean, double rho);

/// Parameter nodes for one residual unit.
struct ResidualParams {
  NodeId conv1_kernel, conv1_bias, bn1_gamma, bn1_beta;
  NodeId conv2_kernel, conv2_bias, bn2_gamma, bn2_beta;
};

/// relu(x + bn2(conv2(relu(bn1(conv1(x)))))).
NodeId residual_block(Graph& g, NodeId x, const ResidualParams& p, BatchNormStats& bn1,
                      BatchNormStats& bn2, Mode mode);

}  // namespace ops
}  // namespace sparling
