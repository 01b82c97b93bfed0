#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cseg/autograd.hpp"
#include "cseg/random.hpp"
#include "cseg/tensor.hpp"

namespace cseg::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Relative error with a floor so that gradients near zero are compared in
// absolute terms.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Builds a scalar loss on a fresh tape from tracked leaves holding `inputs`.
using LossBuilder = std::function<Var(GradTape&, const std::vector<Var>&)>;

struct FdReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Central differences with step h over every element of every input (or
// every `stride`-th one), compared against the tape's gradients.
inline FdReport finite_difference_check(const std::vector<Tensor>& inputs, const LossBuilder& build, double h = 1e-5,
                                        std::size_t stride = 1) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    GradTape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return tape.value(build(tape, vars)).item();
  };
  GradTape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(Tensor(x).set_requires_grad(true)));
  const auto grads = tape.backward(build(tape, vars));

  FdReport report;
  std::vector<Tensor> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); i += stride) {
      const double orig = work[k][i];
      work[k][i] = orig + h;
      const double up = evaluate(work);
      work[k][i] = orig - h;
      const double down = evaluate(work);
      work[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      report.max_rel = std::max(report.max_rel, rel_error(grads[vars[k].id][i], numeric));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace cseg::testing
