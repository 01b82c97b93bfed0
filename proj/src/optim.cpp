#include "cseg/optim.hpp"

#include <cmath>
#include <numeric>

#include "cseg/eval.hpp"

namespace cseg {

namespace {

void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::uint64_t t, const AdamParams& h) {
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
  }
}

void check_alignment(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty() && state.v.empty() && state.t == 0) {
    for (auto* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match the parameter set");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape()) {
      throw std::invalid_argument("adam_step: gradient " + std::to_string(i) + " has shape " +
                                  shape_string(grads[i].shape()) + ", parameter has " +
                                  shape_string(params[i]->shape()));
    }
  }
}

void step_all(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
              const AdamParams& hyper) {
  check_alignment(params, grads, state);
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) adam_update(*params[i], grads[i], state.m[i], state.v[i], state.t, hyper);
}

}  // namespace

AdamState AdamState::for_model(const Model& model) {
  AdamState s;
  for (const auto& p : model.params()) {
    s.m.emplace_back(p.value.shape(), 0.0);
    s.v.emplace_back(p.value.shape(), 0.0);
  }
  return s;
}

void adam_step(Model& model, const std::vector<Tensor>& grads, AdamState& state, const AdamParams& params) {
  std::vector<Tensor*> ptrs;
  for (auto& p : model.params()) ptrs.push_back(&p.value);
  step_all(ptrs, grads, state, params);
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamParams& hyper) {
  std::vector<Tensor*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  step_all(ptrs, grads, state, hyper);
}

std::string_view to_string(SelectionMetric m) {
  return m == SelectionMetric::validation_dice ? "validation_dice" : "validation_loss";
}

SelectionMetric parse_selection_metric(std::string_view text) {
  if (text == "validation_dice") return SelectionMetric::validation_dice;
  if (text == "validation_loss") return SelectionMetric::validation_loss;
  throw std::invalid_argument("unknown selection metric '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  loss.validate();
}

namespace {

Tensor stack_field(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                   std::size_t count, bool masks) {
  const SegSample& s0 = samples[order[first]];
  const std::size_t rows = s0.rows(), cols = s0.cols(), plane = rows * cols;
  Tensor out({count, 1, rows, cols});
  for (std::size_t i = 0; i < count; ++i) {
    const SegSample& s = samples[order[first + i]];
    const Tensor& src = masks ? s.mask : s.image;
    if (src.size() != plane) throw std::invalid_argument("batch: sample " + s.sample_id + " has different extents");
    std::copy(src.values().begin(), src.values().end(), out.data() + i * plane);
  }
  return out;
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

void check_extents(const Model& model, const std::vector<SegSample>& samples, const char* which) {
  for (const auto& s : samples) {
    if (s.rows() != model.config().input_rows || s.cols() != model.config().input_cols) {
      throw std::invalid_argument(std::string("train: ") + which + " sample " + s.sample_id + " is " +
                                  std::to_string(s.rows()) + "x" + std::to_string(s.cols()) + ", model expects " +
                                  std::to_string(model.config().input_rows) + "x" +
                                  std::to_string(model.config().input_cols));
    }
  }
}

constexpr std::size_t kEvalBatch = 8;

}  // namespace

Tensor stack_images(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                    std::size_t count) {
  return stack_field(samples, order, first, count, false);
}

Tensor stack_masks(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                   std::size_t count) {
  return stack_field(samples, order, first, count, true);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  Rng rng(mix_seed(seed, {0x5348554646ULL, static_cast<std::uint64_t>(epoch)}));
  auto order = identity_order(n);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

double dice_at_half(const Model& model, const std::vector<SegSample>& samples) {
  const auto order = identity_order(samples.size());
  ConfusionCounts counts;
  for (std::size_t first = 0; first < samples.size(); first += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, samples.size() - first);
    const Tensor pred = model.predict(stack_images(samples, order, first, count));
    counts += hard_confusion(binarize(pred, 0.5), stack_masks(samples, order, first, count));
  }
  return dsc(counts);
}

double validation_metric(const Model& model, const std::vector<SegSample>& val, const TrainConfig& config) {
  if (config.selection_metric == SelectionMetric::validation_dice) return dice_at_half(model, val);
  const auto order = identity_order(val.size());
  double total = 0.0;
  for (std::size_t first = 0; first < val.size(); first += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, val.size() - first);
    const Tensor pred = model.predict(stack_images(val, order, first, count));
    total += loss_value(config.loss, pred, stack_masks(val, order, first, count)) * static_cast<double>(count);
  }
  return total / static_cast<double>(val.size());
}

TrainResult train(const Model& initial, const std::vector<SegSample>& train_set, const std::vector<SegSample>& val_set,
                  const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
  check_extents(initial, train_set, "training");
  check_extents(initial, val_set, "validation");

  Model model = initial;
  AdamState state = AdamState::for_model(model);
  const AdamParams hyper{config.learning_rate, 0.9, 0.999, 1e-8};
  const bool higher_is_better = config.selection_metric == SelectionMetric::validation_dice;

  TrainResult result{initial, 0, {}};
  double best_metric = 0.0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = epoch_order(config.seed, epoch, train_set.size());
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size, ++batch_index) {
      const std::size_t count = std::min(config.batch_size, order.size() - first);
      Rng dropout_rng(mix_seed(config.seed, {0x44524f50ULL, static_cast<std::uint64_t>(epoch), batch_index}));

      GradTape tape;
      std::vector<Var> handles;
      handles.reserve(model.params().size());
      for (const auto& p : model.params()) handles.push_back(tape.leaf(Tensor(p.value).set_requires_grad(true)));
      const Var x = tape.constant(stack_images(train_set, order, first, count));
      const Var pred = model.forward(tape, handles, x, true, dropout_rng);
      const Var l = loss(tape, config.loss, pred, stack_masks(train_set, order, first, count));
      const double value = tape.value(l).item();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index),
                            epoch, batch_index);
      }
      loss_sum += value * static_cast<double>(count);

      auto grads = tape.backward(l);
      std::vector<Tensor> param_grads;
      param_grads.reserve(handles.size());
      for (auto h : handles) param_grads.push_back(std::move(grads[h.id]));
      adam_step(model, param_grads, state, hyper);
    }

    const double metric = validation_metric(model, val_set, config);
    result.history.push_back({epoch, loss_sum / static_cast<double>(train_set.size()), metric});
    const bool better = result.best_epoch == 0 || (higher_is_better ? metric > best_metric : metric < best_metric);
    if (better) {
      best_metric = metric;
      result.best_epoch = epoch;
      result.best = model;
    }
  }
  return result;
}

}  // namespace cseg
