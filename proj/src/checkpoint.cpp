#include "cseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <vector>

namespace cseg {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'S', 'E', 'G'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw std::length_error("checkpoint: value exceeds u32");
    const auto x = static_cast<std::uint32_t>(v);
    bytes(&x, 4);
  }
  void f64(double v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  void bytes(void* out, std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw CheckpointError(CheckpointFault::truncated,
                            "checkpoint " + source_ + ": truncated file (reading " + what + " at byte " +
                                std::to_string(pos_) + " of " + std::to_string(data_.size()) + ")");
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8(const char* what) {
    std::uint8_t v;
    bytes(&v, 1, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  double f64(const char* what) {
    double v;
    bytes(&v, 8, what);
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string source_;
};

[[noreturn]] void malformed(const Reader& r, const std::string& what) {
  throw CheckpointError(CheckpointFault::malformed, "checkpoint " + r.source() + ": " + what);
}

// Guards against absurd counts before allocating.
std::uint32_t bounded(Reader& r, const char* what, std::uint32_t limit) {
  const std::uint32_t v = r.u32(what);
  if (v > limit) malformed(r, std::string(what) + " " + std::to_string(v) + " exceeds " + std::to_string(limit));
  return v;
}

constexpr std::uint32_t kMaxFilters = 1u << 16;

UNetConfig read_config(Reader& r) {
  UNetConfig c;
  c.encoder_filters.resize(bounded(r, "encoder block count", 64));
  for (auto& f : c.encoder_filters) f = bounded(r, "encoder filters", kMaxFilters);
  c.decoder_filters.resize(bounded(r, "decoder block count", 64));
  for (auto& f : c.decoder_filters) f = bounded(r, "decoder filters", kMaxFilters);
  c.kernel_extent = bounded(r, "kernel extent", 255);
  c.dropout_rate = r.f64("dropout rate");
  c.input_rows = r.u32("input rows");
  c.input_cols = r.u32("input cols");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    malformed(r, std::string("stored config is invalid: ") + e.what());
  }
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u8(kCheckpointVersion);
  const UNetConfig& c = model.config();
  w.u32(c.encoder_filters.size());
  for (auto f : c.encoder_filters) w.u32(f);
  w.u32(c.decoder_filters.size());
  for (auto f : c.decoder_filters) w.u32(f);
  w.u32(c.kernel_extent);
  w.f64(c.dropout_rate);
  w.u32(c.input_rows);
  w.u32(c.input_cols);
  w.u32(model.params().size());
  for (const auto& p : model.params()) {
    w.u32(p.name.size());
    w.bytes(p.name.data(), p.name.size());
    w.u32(p.value.rank());
    for (auto d : p.value.shape()) w.u32(d);
    for (double v : p.value.values()) w.f32(static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointFault::io, "checkpoint: cannot open " + path.string() + " for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw CheckpointError(CheckpointFault::io, "checkpoint: write to " + path.string() + " failed");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointFault::io, "checkpoint: cannot open " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());

  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointFault::bad_magic, "checkpoint " + path.string() + ": bad magic (not a CSEG file)");
  }
  const std::uint8_t version = r.u8("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointFault::version_mismatch,
                          "checkpoint " + path.string() + ": version mismatch (file " + std::to_string(version) +
                              ", supported " + std::to_string(kCheckpointVersion) + ")");
  }
  UNetConfig config = read_config(r);

  // A corrupt header must not drive a huge allocation: every parameter
  // needs 4 bytes of the file.
  if (unet_parameter_count(config) > r.remaining() / 4) {
    throw CheckpointError(CheckpointFault::truncated,
                          "checkpoint " + path.string() + ": truncated file (config implies " +
                              std::to_string(unet_parameter_count(config)) + " parameters, " +
                              std::to_string(r.remaining()) + " bytes left)");
  }

  // Names and shapes must match the layout the config implies.
  Rng dummy(0);
  const Model layout = build_unet(config, dummy);
  const std::uint32_t count = r.u32("tensor count");
  if (count != layout.params().size()) {
    malformed(r, "holds " + std::to_string(count) + " tensors, config implies " +
                     std::to_string(layout.params().size()));
  }
  std::vector<NamedTensor> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto& expect = layout.params()[i];
    std::string name(bounded(r, "name length", 4096), '\0');
    r.bytes(name.data(), name.size(), "tensor name");
    Shape shape(bounded(r, "tensor rank", 8));
    for (auto& d : shape) d = r.u32("tensor dims");
    if (name != expect.name || shape != expect.value.shape()) {
      malformed(r, "tensor " + std::to_string(i) + " is " + name + " " + shape_string(shape) + ", expected " +
                       expect.name + " " + shape_string(expect.value.shape()));
    }
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      float f;
      r.bytes(&f, 4, "tensor values");
      v = f;
    }
    params.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (r.remaining() != 0) malformed(r, std::to_string(r.remaining()) + " trailing bytes");
  return Model(std::move(config), std::move(params));
}

Model load_checkpoint(const std::filesystem::path& path, const UNetConfig& expected) {
  Model m = load_checkpoint(path);
  if (!(m.config() == expected)) {
    throw CheckpointError(CheckpointFault::config_mismatch, "checkpoint " + path.string() +
                                                                ": config mismatch (file has " +
                                                                m.config().describe() + ", expected " +
                                                                expected.describe() + ")");
  }
  return m;
}

}  // namespace cseg
