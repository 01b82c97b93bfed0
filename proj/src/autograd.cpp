#include "cseg/autograd.hpp"

#include <stdexcept>

namespace cseg {

Var GradTape::leaf(Tensor value) {
  const bool track = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, {}, track});
  return Var{nodes_.size() - 1};
}

Var GradTape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var GradTape::record(Tensor value, std::vector<Var> inputs, BackwardRule rule) {
  bool track = false;
  for (auto in : inputs) {
    if (in.id >= nodes_.size()) throw std::out_of_range("op input is not on this tape");
    track = track || nodes_[in.id].needs_grad;
  }
  Node node{std::move(value), std::move(inputs), {}, track};
  if (track) node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

std::vector<Tensor> GradTape::backward(Var loss, std::vector<std::size_t>* visit_order) const {
  if (loss.id >= nodes_.size()) throw std::out_of_range("loss is not on this tape");
  const Tensor& loss_value = nodes_[loss.id].value;
  if (loss_value.size() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_string(loss_value.shape()));
  }

  std::vector<Tensor> grads(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].needs_grad && nodes_[i].inputs.empty()) grads[i] = Tensor(nodes_[i].value.shape(), 0.0);
  }
  if (!nodes_[loss.id].needs_grad) return grads;

  grads[loss.id] = Tensor(loss_value.shape(), 1.0);
  std::vector<Tensor*> grad_in;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.rule || grads[i].empty()) continue;
    grad_in.clear();
    for (auto in : node.inputs) {
      if (!nodes_[in.id].needs_grad) {
        grad_in.push_back(nullptr);
        continue;
      }
      if (grads[in.id].empty()) grads[in.id] = Tensor(nodes_[in.id].value.shape(), 0.0);
      grad_in.push_back(&grads[in.id]);
    }
    node.rule(*this, node.value, grads[i], grad_in);
    if (visit_order) visit_order->push_back(i);
    // Intermediate gradients are no longer needed once propagated.
    if (!node.inputs.empty()) grads[i] = Tensor();
  }
  return grads;
}

}  // namespace cseg
