#include "cseg/unet.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cseg/ops.hpp"

namespace cseg {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += "-";
    out += std::to_string(v[i]);
  }
  return out;
}

Tensor he_uniform(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace

UNetConfig UNetConfig::full(std::size_t rows, std::size_t cols) {
  UNetConfig c;
  c.input_rows = rows;
  c.input_cols = cols;
  return c;
}

UNetConfig UNetConfig::desk(std::size_t rows, std::size_t cols) {
  UNetConfig c;
  c.encoder_filters = {8, 16, 32, 64};
  c.decoder_filters = {32, 16, 8};
  c.input_rows = rows;
  c.input_cols = cols;
  return c;
}

std::size_t UNetConfig::divisor() const {
  return encoder_filters.empty() ? 1 : std::size_t{1} << (encoder_filters.size() - 1);
}

void UNetConfig::validate() const {
  if (encoder_filters.empty()) throw std::invalid_argument("unet config: encoder_filters must not be empty");
  if (encoder_filters.size() != decoder_filters.size() + 1) {
    throw std::invalid_argument("unet config: need one more encoder block than decoder blocks, got " +
                                std::to_string(encoder_filters.size()) + " and " +
                                std::to_string(decoder_filters.size()));
  }
  for (auto f : encoder_filters) {
    if (f == 0) throw std::invalid_argument("unet config: encoder filter counts must be positive");
  }
  for (auto f : decoder_filters) {
    if (f == 0) throw std::invalid_argument("unet config: decoder filter counts must be positive");
  }
  if (kernel_extent % 2 == 0) {
    throw std::invalid_argument("unet config: kernel_extent must be odd, got " + std::to_string(kernel_extent));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("unet config: dropout_rate must lie in [0,1)");
  }
  const std::size_t d = divisor();
  if (input_rows == 0 || input_rows % d != 0) {
    throw std::invalid_argument("unet config: input_rows " + std::to_string(input_rows) +
                                " must be a positive multiple of " + std::to_string(d));
  }
  if (input_cols == 0 || input_cols % d != 0) {
    throw std::invalid_argument("unet config: input_cols " + std::to_string(input_cols) +
                                " must be a positive multiple of " + std::to_string(d));
  }
}

std::string UNetConfig::describe() const {
  std::ostringstream os;
  os << "encoder(" << join(encoder_filters) << ") decoder(" << join(decoder_filters) << ") kernel " << kernel_extent
     << " dropout " << dropout_rate << " input " << input_rows << "x" << input_cols;
  return os.str();
}

Model::Model(UNetConfig config, std::vector<NamedTensor> params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (params_[i].name == params_[j].name) throw std::invalid_argument("duplicate parameter name " + params_[i].name);
    }
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

const Tensor& Model::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw std::out_of_range("no parameter named " + name);
}

Model Model::quantized_f32() const {
  Model copy = *this;
  for (auto& p : copy.params_) {
    for (auto& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
  }
  return copy;
}

Model build_unet(const UNetConfig& config, Rng& rng) {
  config.validate();
  const std::size_t k = config.kernel_extent;
  std::vector<NamedTensor> params;
  auto add_conv = [&](const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t extent) {
    params.push_back({prefix + ".weight", he_uniform({cout, cin, extent, extent}, rng)});
    params.push_back({prefix + ".bias", Tensor({cout}, 0.0)});
  };

  std::size_t channels = 1;
  for (std::size_t i = 0; i < config.encoder_filters.size(); ++i) {
    const std::size_t f = config.encoder_filters[i];
    add_conv("enc" + std::to_string(i) + ".conv0", channels, f, k);
    add_conv("enc" + std::to_string(i) + ".conv1", f, f, k);
    channels = f;
  }
  const std::size_t depth = config.decoder_filters.size();
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t skip = config.encoder_filters[depth - 1 - i];
    const std::size_t f = config.decoder_filters[i];
    add_conv("dec" + std::to_string(i) + ".conv0", channels + skip, f, k);
    add_conv("dec" + std::to_string(i) + ".conv1", f, f, k);
    channels = f;
  }
  add_conv("head", channels, 1, 1);
  return Model(config, std::move(params));
}

std::size_t unet_parameter_count(const UNetConfig& config) {
  const std::size_t kk = config.kernel_extent * config.kernel_extent;
  auto conv = [kk](std::size_t cin, std::size_t cout) { return cout * cin * kk + cout; };
  std::size_t total = 0, channels = 1;
  for (auto f : config.encoder_filters) {
    total += conv(channels, f) + conv(f, f);
    channels = f;
  }
  const std::size_t depth = config.decoder_filters.size();
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t f = config.decoder_filters[i];
    total += conv(channels + config.encoder_filters[depth - 1 - i], f) + conv(f, f);
    channels = f;
  }
  return total + channels + 1;
}

Var Model::forward(GradTape& tape, const std::vector<Var>& params, Var input, bool training, Rng& rng) const {
  if (params.size() != params_.size()) {
    throw std::invalid_argument("forward: expected " + std::to_string(params_.size()) + " parameter handles, got " +
                                std::to_string(params.size()));
  }
  const Tensor& x = tape.value(input);
  const std::size_t rank = x.rank();
  if ((rank != 3 && rank != 4) || x.dim(rank - 3) != 1 || x.dim(rank - 2) != config_.input_rows ||
      x.dim(rank - 1) != config_.input_cols) {
    throw std::invalid_argument("forward: expected input [B,1," + std::to_string(config_.input_rows) + "," +
                                std::to_string(config_.input_cols) + "], got " + shape_string(x.shape()));
  }

  std::size_t next = 0;
  auto conv_relu = [&](Var h) {
    h = ops::conv2d(tape, h, params[next], params[next + 1]);
    next += 2;
    return ops::relu(tape, h);
  };

  const std::size_t blocks = config_.encoder_filters.size();
  std::vector<Var> skips;
  Var h = input;
  for (std::size_t i = 0; i < blocks; ++i) {
    h = conv_relu(conv_relu(h));
    if (i + 1 < blocks) {
      skips.push_back(h);
      h = ops::maxpool2(tape, h);
    }
  }
  h = ops::dropout(tape, h, config_.dropout_rate, rng, training);

  for (std::size_t i = 0; i < config_.decoder_filters.size(); ++i) {
    h = ops::upsample2(tape, h);
    h = ops::concat_channels(tape, h, skips[skips.size() - 1 - i]);
    h = conv_relu(conv_relu(h));
  }
  h = ops::conv2d(tape, h, params[next], params[next + 1]);
  return ops::sigmoid(tape, h);
}

Tensor Model::forward(const Tensor& batch, bool training, Rng& rng) const {
  GradTape tape;
  std::vector<Var> handles;
  handles.reserve(params_.size());
  for (const auto& p : params_) handles.push_back(tape.constant(p.value));
  const Var out = forward(tape, handles, tape.constant(batch), training, rng);
  return tape.value(out);
}

Tensor Model::predict(const Tensor& batch) const {
  Rng unused(0);
  return forward(batch, false, unused);
}

}  // namespace cseg
