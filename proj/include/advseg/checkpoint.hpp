#pragma once

#include <filesystem>
#include <string>

#include "advseg/graph.hpp"

namespace advseg {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  int format_version = kCheckpointFormatVersion;
  float momentum = 0.0f;
  int epoch = 0;
};

/// Writes `manifest.json` plus one little-endian f32 blob per parameter,
/// named `<parameter name>.bin`, into `dir` (created if missing).
void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params, const CheckpointInfo& info);

/// Loads parameter values into an already-built set. Names and shapes must
/// match the manifest exactly.
CheckpointInfo load_checkpoint(const std::filesystem::path& dir, ParameterSet<float>& params);

}  // namespace advseg
