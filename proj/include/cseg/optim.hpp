#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cseg/losses.hpp"
#include "cseg/synthdata.hpp"
#include "cseg/unet.hpp"

namespace cseg {

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment accumulators shaped like the model parameters.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  static AdamState for_model(const Model& model);
};

// One bias-corrected Adam update of every parameter; increments t.
void adam_step(Model& model, const std::vector<Tensor>& grads, AdamState& state, const AdamParams& params = {});

// Same update on a bare tensor list (used for scalar toy problems).
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamParams& hyper = {});

enum class SelectionMetric { validation_dice, validation_loss };

std::string_view to_string(SelectionMetric m);
SelectionMetric parse_selection_metric(std::string_view text);

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 1e-3;
  std::size_t batch_size = 4;
  LossSpec loss;
  std::uint64_t seed = 1;
  SelectionMetric selection_metric = SelectionMetric::validation_dice;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double validation_metric = 0.0;
};

struct TrainResult {
  Model best;
  int best_epoch = 0;
  std::vector<EpochRecord> history;
};

// Raised when the training loss turns non-finite.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

// Stacks samples[first, first+count) of the given order into [B,1,H,W].
Tensor stack_images(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                    std::size_t count);
Tensor stack_masks(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                   std::size_t count);

// Visiting order of training samples in an epoch; pure in (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

// Validation score; higher is better for dice, lower for loss.
double validation_metric(const Model& model, const std::vector<SegSample>& val, const TrainConfig& config);

// Dice of pooled hard counts at threshold 0.5.
double dice_at_half(const Model& model, const std::vector<SegSample>& samples);

// Trains `model` with Adam, evaluating the selection metric after every epoch
// and returning the parameters of the best epoch (earliest on ties).
TrainResult train(const Model& model, const std::vector<SegSample>& train_set, const std::vector<SegSample>& val_set,
                  const TrainConfig& config);

}  // namespace cseg
