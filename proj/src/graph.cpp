#include "sparling/graph.hpp"

namespace sparling {

NodeId Graph::constant(Tensor value, std::string tag) {
  nodes_.push_back(Node{std::move(tag), {}, std::move(value), {}, {}, nullptr, false});
  return nodes_.size() - 1;
}

NodeId Graph::variable(Tensor value) {
  nodes_.push_back(Node{"variable", {}, std::move(value), {}, {}, nullptr, grad_enabled_});
  return nodes_.size() - 1;
}

NodeId Graph::parameter(Parameter& param) {
  const bool trainable = grad_enabled_ && !param.frozen;
  nodes_.push_back(Node{trainable ? "parameter" : "constant", {}, param.value, {}, {},
                        trainable ? &param : nullptr, trainable});
  return nodes_.size() - 1;
}

NodeId Graph::record(std::string op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (NodeId in : inputs) needs = needs || nodes_.at(in).requires_grad;
  }
  Node node{std::move(op), std::move(inputs), std::move(value), {}, {}, nullptr, needs};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  return n.grad;
}

Tensor& Graph::grad_buffer(NodeId id) {
  Node& n = nodes_.at(id);
  if (n.grad.shape() != n.value.shape() || n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(NodeId loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(value(loss).shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  if (nodes_[loss].requires_grad) {
    grad_buffer(loss)[0] = 1.0f;
  }
  for (NodeId i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    // A node nobody wrote into has zero gradient and contributes nothing.
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto dst = p.grad.data();
      auto src = nodes_[i].grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  // Constants and unreached nodes report an explicit zero gradient.
  for (Node& n : nodes_) {
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  }
}

}  // namespace sparling
