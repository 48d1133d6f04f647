#pragma once

#include <filesystem>

#include "fincflow/flow.hpp"
#include "fincflow/tensor_io.hpp"

namespace fincflow {

// Layout, little-endian:
//   "FINCCKPT", u32 version,
//   config: u32 levels, steps, channels, height, width, hidden, kernel; u8 dtype; u8 actnorm_initialized
//   u32 record count, then per record: u32 name length, UTF-8 name, .ften body
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  ModelConfig config;
  Dtype dtype = Dtype::F32;
  bool actnorm_initialized = false;
};

template <typename T>
void save_checkpoint(FlowModel<T>& model, const std::filesystem::path& path);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Parameters are converted when the stored dtype differs from T.
template <typename T>
FlowModel<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace fincflow
