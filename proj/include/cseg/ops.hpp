#pragma once

#include "cseg/autograd.hpp"
#include "cseg/random.hpp"

// Differentiable operations recorded on a GradTape. Spatial ops accept either
// a single feature map [C,H,W] or a batch [N,C,H,W]; the output keeps the
// input's rank.
namespace cseg::ops {

// Zero-padded "same" convolution, stride 1. kernels: [Cout,Cin,kH,kW] with
// odd kH, kW; bias: [Cout].
Var conv2d(GradTape& tape, Var input, Var kernels, Var bias);

Var relu(GradTape& tape, Var input);

// 2x2 max pooling, stride 2. Gradient goes to the first maximum of each
// window in row-major order.
Var maxpool2(GradTape& tape, Var input);

// Nearest-neighbour 2x upsampling.
Var upsample2(GradTape& tape, Var input);

// Channels of `a` followed by channels of `b`. A default-constructed (empty)
// tensor on either side acts as a zero-channel map.
Var concat_channels(GradTape& tape, Var a, Var b);

Var sigmoid(GradTape& tape, Var input);

// Inverted dropout. Identity when !training or rate == 0.
Var dropout(GradTape& tape, Var input, double rate, Rng& rng, bool training);

Var mul(GradTape& tape, Var a, Var b);
Var sum(GradTape& tape, Var input);

// Non-recording helpers shared with inference-only code paths.
double sigmoid_value(double z);

}  // namespace cseg::ops
