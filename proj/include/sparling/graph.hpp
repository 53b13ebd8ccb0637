#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "sparling/tensor.hpp"

namespace sparling {

using NodeId = std::size_t;

/// A trainable tensor with its accumulated gradient. Frozen parameters are
/// recorded as constants and never receive gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Graph;

/// Propagates the gradient of node `self` into its inputs.
using BackwardFn = std::function<void(Graph& graph, NodeId self)>;

/// Append-only tape for reverse-mode differentiation. Nodes are stored in
/// creation order, which is a topological order; backward() walks it in
/// reverse and visits each node once.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  /// Leaf that never receives gradient (inputs, sparsity thresholds).
  NodeId constant(Tensor value, std::string tag = "constant");
  /// Leaf that receives gradient.
  NodeId variable(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  NodeId parameter(Parameter& param);

  /// Records an operation. `backward` is dropped when no input needs gradient.
  NodeId record(std::string op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor& grad(NodeId id) const;
  /// Mutable gradient buffer, allocated on first use.
  Tensor& grad_buffer(NodeId id);
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reverse accumulation from a scalar loss. Parameter leaves add their
  /// gradient into the bound Parameter::grad.
  void backward(NodeId loss);

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace sparling
