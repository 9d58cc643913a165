#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

enum class Domain : std::int32_t { source = 0, target = 1 };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

/// Per-voxel u8 map over a 3-D extent (labels or foreground mask).
struct VoxelMap {
  Extent3 extent{0, 0, 0};
  std::vector<std::uint8_t> values;

  VoxelMap() = default;
  explicit VoxelMap(const Extent3& e, std::uint8_t fill = 0)
      : extent(e), values(static_cast<std::size_t>(e[0] * e[1] * e[2]), fill) {}

  Index size() const noexcept { return static_cast<Index>(values.size()); }
  Index index(Index x, Index y, Index z) const { return (x * extent[1] + y) * extent[2] + z; }
  std::uint8_t at(Index x, Index y, Index z) const { return values[static_cast<std::size_t>(index(x, y, z))]; }
  std::uint8_t& at(Index x, Index y, Index z) { return values[static_cast<std::size_t>(index(x, y, z))]; }
  bool operator==(const VoxelMap&) const = default;
};

/// Label-blind view of a case: image, optional mask, domain. This is the only
/// thing the adversarial batch builder ever receives.
struct UnlabelledCase {
  const std::string* id = nullptr;
  Domain domain = Domain::source;
  const Tensor<float>* image = nullptr;
  const VoxelMap* mask = nullptr;
};

/// One multi-channel volume [C,X,Y,Z] with optional labels and mask.
struct CaseRecord {
  std::string id;
  Domain domain = Domain::source;
  Tensor<float> image;
  std::optional<VoxelMap> labels;
  std::optional<VoxelMap> mask;

  Extent3 extent() const;
  Index channels() const { return image.extent(0); }
  UnlabelledCase unlabelled() const { return {&id, domain, &image, mask ? &*mask : nullptr}; }
  /// Throws if labels/mask extents disagree with the image.
  void validate() const;
};

struct ManifestEntry {
  std::string case_id;
  std::string image;                  // path to the image sidecar (.json)
  std::optional<std::string> labels;  // path to the label sidecar
  std::optional<std::string> mask;
  Domain domain = Domain::source;
  bool operator==(const ManifestEntry&) const = default;
};

/// A dataset: manifest entries plus the directory relative paths resolve from.
struct DatasetManifest {
  std::vector<ManifestEntry> cases;
  std::filesystem::path base_dir;
};

// Volume files: `<stem>.json` sidecar + `<stem>.raw` blob.
void write_volume(const std::filesystem::path& stem, const Tensor<float>& image, Domain domain);
void write_voxel_map(const std::filesystem::path& stem, const VoxelMap& map, Domain domain);
Tensor<float> read_volume(const std::filesystem::path& sidecar);
VoxelMap read_voxel_map(const std::filesystem::path& sidecar);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

enum class LabelAccess { read, blind };

/// Loads every case of a manifest. With `LabelAccess::blind` label files are
/// never opened, even when the manifest lists them.
std::vector<CaseRecord> load_cases(const DatasetManifest& manifest, LabelAccess access);

}  // namespace advseg
