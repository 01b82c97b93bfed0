#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "cseg/autograd.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

// t+, f+, f-, t-. Integral for hard counts, real-valued for soft counts.
struct ConfusionCounts {
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  double tn = 0.0;

  double total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

enum class LossKind { bce, tversky };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view text);

struct LossSpec {
  LossKind kind = LossKind::bce;
  double beta = 0.5;
  double epsilon = 1e-6;

  void validate() const;
};

inline constexpr double kBceClamp = 1e-7;

// Soft counts: tp = sum(p*y), fp = sum(p*(1-y)), fn = sum((1-p)*y),
// tn = sum((1-p)*(1-y)). Reduce to hard counts on binary predictions.
ConfusionCounts soft_confusion(const Tensor& pred, const Tensor& target);

// 2tp / (2tp + fp + fn); 1.0 when tp = fp = fn = 0.
double dsc(const ConfusionCounts& c);

// tp / (tp + beta*fp + (1-beta)*fn); 1.0 when tp = fp = fn = 0, 0.0 for any
// other zero denominator.
double tversky_index(const ConfusionCounts& c, double beta);

// Mean pixel BCE with predictions clamped to [1e-7, 1 - 1e-7].
double bce_loss(const Tensor& pred, const Tensor& target);

// 1 - (tp + eps) / (tp + beta*fp + (1-beta)*fn + eps) over soft counts of the
// whole tensor.
double tversky_loss(const Tensor& pred, const Tensor& target, double beta, double epsilon);

double loss_value(const LossSpec& spec, const Tensor& pred, const Tensor& target);

// Differentiable versions; `pred` is a tape value, `target` a constant.
Var bce_loss(GradTape& tape, Var pred, const Tensor& target);
Var tversky_loss(GradTape& tape, Var pred, const Tensor& target, double beta, double epsilon);
Var loss(GradTape& tape, const LossSpec& spec, Var pred, const Tensor& target);

}  // namespace cseg
