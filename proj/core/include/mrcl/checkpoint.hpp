#pragma once

// Versioned binary checkpoint container (little-endian):
//   "MRCLCKPT" | u32 version | u64 meta_len | meta JSON | u64 tensor_count
//   | { u32 name_len | name | u8 scalar_bytes | u64 rows | u64 cols | data }*
//   | u64 FNV-1a checksum of all preceding bytes
// Tensor names: "param/<name>", "adam.exp_avg/<name>", "adam.exp_avg_sq/<name>".

#include <cstdint>
#include <filesystem>
#include <string>

#include "mrcl/trainer.hpp"

namespace mrcl::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  int scalar_bytes = 4;
  std::uint64_t config_hash = 0;
  std::string config_text;
  vit::ViTConfig model;
};

/// Writes `path` atomically (temporary file + rename).
template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::filesystem::path& path,
                     const std::string& config_text = "");

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path);

/// Metadata only; still validates the container.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// FNV-1a of a string, used for the config hash.
std::uint64_t fnv1a(const std::string& text);

}  // namespace mrcl::train
