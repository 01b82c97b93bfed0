#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cseg/autograd.hpp"
#include "cseg/random.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

struct UNetConfig {
  std::vector<std::size_t> encoder_filters{16, 32, 64, 128, 256, 512};
  std::vector<std::size_t> decoder_filters{256, 128, 64, 32, 32};
  std::size_t kernel_extent = 3;
  double dropout_rate = 0.2;
  std::size_t input_rows = 256;
  std::size_t input_cols = 256;

  // Encoder/decoder layout of the reference architecture at the given input size.
  static UNetConfig full(std::size_t rows, std::size_t cols);
  // Scaled-down layout (8-16-32-64 / 32-16-8) used for desk-scale runs.
  static UNetConfig desk(std::size_t rows, std::size_t cols);

  // Required divisor of the input extents: 2^(pooling stages).
  std::size_t divisor() const;
  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  std::string describe() const;

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// U-Net parameters in a stable, uniquely named order plus the config they
// were built from.
class Model {
 public:
  Model(UNetConfig config, std::vector<NamedTensor> params);

  const UNetConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& params() { return params_; }
  std::size_t parameter_count() const;
  const Tensor& param(const std::string& name) const;

  // Copy with every parameter rounded through 32-bit float.
  Model quantized_f32() const;

  // Runs the network on `batch` ([B,1,H,W] or [1,H,W]) and returns the
  // sigmoid output of matching shape. Dropout draws from `rng` when training.
  Tensor forward(const Tensor& batch, bool training, Rng& rng) const;
  // Inference (dropout off); deterministic.
  Tensor predict(const Tensor& batch) const;

  // Records the forward pass on `tape`. `params` are the tape handles of this
  // model's parameters in registry order.
  Var forward(GradTape& tape, const std::vector<Var>& params, Var input, bool training, Rng& rng) const;

 private:
  UNetConfig config_;
  std::vector<NamedTensor> params_;
};

// Encoder: one block of two 'same' convolutions + ReLU per encoder_filters
// entry, 2x2 max pooling after all but the last block, dropout on the last
// block's output. Decoder: per decoder_filters entry, upsample2, concatenate
// the matching encoder block output, two convolutions + ReLU. Head: 1x1
// convolution to one channel followed by sigmoid. Kernels get He-uniform
// initialization (fan-in scaled), biases zero.
Model build_unet(const UNetConfig& config, Rng& rng);

// Closed-form parameter count for a config.
std::size_t unet_parameter_count(const UNetConfig& config);

}  // namespace cseg
