#include "cseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cseg {

namespace {

void check_pair(const Tensor& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument(std::string(op) + ": prediction shape " + shape_string(pred.shape()) +
                                " does not match target shape " + shape_string(target.shape()));
  }
}

double clamp_prob(double p) { return std::clamp(p, kBceClamp, 1.0 - kBceClamp); }

double tversky_smoothed(const ConfusionCounts& c, double beta, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("tversky_loss: epsilon must be positive");
  return (c.tp + epsilon) / (c.tp + beta * c.fp + (1.0 - beta) * c.fn + epsilon);
}

}  // namespace

std::string_view to_string(LossKind kind) { return kind == LossKind::bce ? "bce" : "tversky"; }

LossKind parse_loss_kind(std::string_view text) {
  if (text == "bce") return LossKind::bce;
  if (text == "tversky") return LossKind::tversky;
  throw std::invalid_argument("unknown loss kind '" + std::string(text) + "' (expected bce or tversky)");
}

void LossSpec::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("loss: beta must lie in [0,1]");
  if (kind == LossKind::tversky && !(epsilon > 0.0)) {
    throw std::invalid_argument("loss: tversky epsilon must be positive");
  }
}

ConfusionCounts soft_confusion(const Tensor& pred, const Tensor& target) {
  check_pair(pred, target, "soft_confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], y = target[i];
    c.tp += p * y;
    c.fp += p * (1.0 - y);
    c.fn += (1.0 - p) * y;
    c.tn += (1.0 - p) * (1.0 - y);
  }
  return c;
}

double dsc(const ConfusionCounts& c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  if (denom == 0.0) return 1.0;
  return 2.0 * c.tp / denom;
}

double tversky_index(const ConfusionCounts& c, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("tversky_index: beta must lie in [0,1]");
  if (c.tp == 0.0 && c.fp == 0.0 && c.fn == 0.0) return 1.0;
  const double denom = c.tp + beta * c.fp + (1.0 - beta) * c.fn;
  if (denom == 0.0) return 0.0;
  return c.tp / denom;
}

double bce_loss(const Tensor& pred, const Tensor& target) {
  check_pair(pred, target, "bce_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred[i]), y = target[i];
    acc += -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(pred.size());
}

double tversky_loss(const Tensor& pred, const Tensor& target, double beta, double epsilon) {
  check_pair(pred, target, "tversky_loss");
  return 1.0 - tversky_smoothed(soft_confusion(pred, target), beta, epsilon);
}

double loss_value(const LossSpec& spec, const Tensor& pred, const Tensor& target) {
  return spec.kind == LossKind::bce ? bce_loss(pred, target) : tversky_loss(pred, target, spec.beta, spec.epsilon);
}

Var bce_loss(GradTape& tape, Var pred, const Tensor& target) {
  const double value = bce_loss(tape.value(pred), target);
  return tape.record(Tensor::scalar(value), {pred},
                     [pred, target](const GradTape& t, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       const Tensor& p = t.value(pred);
                       Tensor& gp = *grad[0];
                       const double scale = gout[0] / static_cast<double>(p.size());
                       for (std::size_t i = 0; i < p.size(); ++i) {
                         // Zero slope where the clamp is active.
                         if (p[i] < kBceClamp || p[i] > 1.0 - kBceClamp) continue;
                         const double y = target[i];
                         gp[i] += scale * (-y / p[i] + (1.0 - y) / (1.0 - p[i]));
                       }
                     });
}

Var tversky_loss(GradTape& tape, Var pred, const Tensor& target, double beta, double epsilon) {
  const ConfusionCounts c = soft_confusion(tape.value(pred), target);
  const double value = 1.0 - tversky_smoothed(c, beta, epsilon);
  return tape.record(
      Tensor::scalar(value), {pred},
      [target, c, beta, epsilon](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
        // L = 1 - N/D with N = tp + eps, D = tp + beta*fp + (1-beta)*fn + eps.
        // dtp/dp = y, dfp/dp = 1-y, dfn/dp = -y.
        const double num = c.tp + epsilon;
        const double den = c.tp + beta * c.fp + (1.0 - beta) * c.fn + epsilon;
        const double d_tp = -(den - num) / (den * den);
        const double d_fp = num * beta / (den * den);
        const double d_fn = num * (1.0 - beta) / (den * den);
        Tensor& gp = *grad[0];
        const double g = gout[0];
        for (std::size_t i = 0; i < gp.size(); ++i) {
          const double y = target[i];
          gp[i] += g * (d_tp * y + d_fp * (1.0 - y) - d_fn * y);
        }
      });
}

Var loss(GradTape& tape, const LossSpec& spec, Var pred, const Tensor& target) {
  return spec.kind == LossKind::bce ? bce_loss(tape, pred, target)
                                    : tversky_loss(tape, pred, target, spec.beta, spec.epsilon);
}

}  // namespace cseg
