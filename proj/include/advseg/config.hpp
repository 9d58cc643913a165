#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "advseg/evaluation.hpp"
#include "advseg/networks.hpp"
#include "advseg/synthdata.hpp"
#include "advseg/training.hpp"

namespace advseg {

using Json = nlohmann::json;

inline constexpr int kSpecVersion = 1;

// JSON forms. Readers reject unknown keys; absent keys keep their defaults.
Json to_json(const SegmenterSpec& s);
Json to_json(const DiscriminatorSpec& s);
Json to_json(const TrainSchedule& s);
Json to_json(const SynthConfig& s);
SegmenterSpec segmenter_spec_from_json(const Json& j);
DiscriminatorSpec discriminator_spec_from_json(const Json& j);
TrainSchedule schedule_from_json(const Json& j);
SynthConfig synth_config_from_json(const Json& j);
/// "L4,6,8,10" or a list of {"pathway": ..., "layer": ...}.
TapSet taps_from_json(const Json& j);
Json taps_to_json(const TapSet& taps);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);

/// Manifests a training run reads.
struct DataPaths {
  std::optional<std::filesystem::path> source;
  std::optional<std::filesystem::path> target;
  std::optional<std::filesystem::path> val_source;
  std::optional<std::filesystem::path> val_target;
};

struct TrainRunConfig {
  TrainOptions options;
  DataPaths data;

  /// Mode-dependent inputs present and referenced files existing. Returns
  /// every problem found; empty when valid.
  std::vector<std::string> problems() const;
};

/// Parses a training config. `segmenter` and `discriminator` may be inline
/// objects or paths to spec files; relative paths resolve from `base_dir`.
TrainRunConfig train_config_from_json(const Json& j, const std::filesystem::path& base_dir);
/// Fully resolved form (absolute paths, inline specs) as stored in run.json.
Json to_json(const TrainRunConfig& c);

struct EvalRunConfig {
  std::filesystem::path checkpoint;  // segmenter checkpoint directory
  std::filesystem::path manifest;
  Index tile_extent = 25;
};
EvalRunConfig eval_config_from_json(const Json& j, const std::filesystem::path& base_dir);
Json to_json(const EvalRunConfig& c);

struct ProbeRunConfig {
  std::filesystem::path segmenter;                    // checkpoint directory
  std::optional<std::filesystem::path> discriminator;  // absent: fresh probe
  std::filesystem::path source;                       // held-out manifests
  std::filesystem::path target;
  Index n_samples = 200;
  std::uint64_t seed = 0;
  /// Fresh-probe training data and settings (used when no discriminator
  /// checkpoint is given).
  std::optional<std::filesystem::path> fresh_source;
  std::optional<std::filesystem::path> fresh_target;
  DiscriminatorSpec fresh_spec;
  TapSet fresh_taps = default_taps();
  FreshProbeOptions fresh;
};
ProbeRunConfig probe_config_from_json(const Json& j, const std::filesystem::path& base_dir);
Json to_json(const ProbeRunConfig& c);

}  // namespace advseg
