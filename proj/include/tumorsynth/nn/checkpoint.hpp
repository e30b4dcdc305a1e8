#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "tumorsynth/nn/tensor.hpp"

namespace tumorsynth::nn {

inline constexpr int kCheckpointVersion = 1;

/// Layout: "TSCK", u32 version, u64 header length, JSON header
/// ({kind, config, arrays: [{name, shape}]}), then float32 little-endian arrays in header order.
void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const ParameterStore& params);

struct CheckpointContents {
  std::string kind;
  nlohmann::json config;
  ParameterStore params;
};

CheckpointContents load_checkpoint(const std::filesystem::path& path);

/// Copies arrays into an existing store; names and shapes must match exactly.
void assign_parameters(ParameterStore& dst, const ParameterStore& src);

}  // namespace tumorsynth::nn
