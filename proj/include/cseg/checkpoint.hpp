#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "cseg/unet.hpp"

namespace cseg {

// Binary layout, all integers little-endian:
//   "CSEG"  u8 version
//   config: u32 n_enc, n_enc x u32 filters, u32 n_dec, n_dec x u32 filters,
//           u32 kernel, f64 dropout, u32 rows, u32 cols
//   u32 tensor count, then per tensor:
//           u32 name length, name bytes, u32 rank, rank x u32 dims,
//           prod(dims) x f32 values
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class CheckpointFault { io, bad_magic, version_mismatch, truncated, malformed, config_mismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointFault fault, const std::string& what) : std::runtime_error(what), fault_(fault) {}
  CheckpointFault fault() const { return fault_; }

 private:
  CheckpointFault fault_;
};

void save_checkpoint(const Model& model, const std::filesystem::path& path);

// Parameters come back as the f32-rounded values that were stored.
Model load_checkpoint(const std::filesystem::path& path);
// Same, but the stored config must equal `expected`.
Model load_checkpoint(const std::filesystem::path& path, const UNetConfig& expected);

}  // namespace cseg
