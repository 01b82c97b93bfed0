#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

class GradTape;

// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
};

// Local gradient rule of one recorded operation. `out` is the op's recorded
// value and `grad_out` the gradient w.r.t. it; `grad_in[i]` is the accumulator for input i, or
// nullptr when that input does not need a gradient.
using BackwardRule = std::function<void(const GradTape& tape, const Tensor& out, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

// Ordered record of executed operations. Values live on the tape until it is
// destroyed; backward() replays the record in reverse.
class GradTape {
 public:
  // Leaf holding `value`; tracked for gradients iff value.requires_grad().
  Var leaf(Tensor value);
  Var constant(Tensor value);

  // Records an op output. The rule is kept only if some input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardRule rule);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the scalar `loss`, indexed by node id. Only entries for
  // tracked leaves are populated; tracked leaves that do not influence the
  // loss get exact zeros. If `visit_order` is given, the ids of
  // ops whose rule ran are appended in the order visited.
  std::vector<Tensor> backward(Var loss, std::vector<std::size_t>* visit_order = nullptr) const;

 private:
  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    BackwardRule rule;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

}  // namespace cseg
