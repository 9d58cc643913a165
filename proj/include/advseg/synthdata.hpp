#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "advseg/volume.hpp"

namespace advseg {

/// Affine intensity change applied to one channel of target-domain cases.
struct ChannelShift {
  double gain = 1.0;
  double bias = 0.0;
  bool operator==(const ChannelShift&) const = default;
};

/// Two-domain synthetic lesion data. Both channels share a smooth "anatomy"
/// field, so they correlate positively in the source domain; the default
/// target shift inverts the lesion channel and with it that correlation.
struct SynthConfig {
  Index extent = 48;
  Index channels = 2;
  Index source_cases = 20;
  Index target_cases = 12;
  Index source_heldout = 4;  // of source_cases, kept out of training
  Index target_heldout = 6;  // of target_cases, the labelled test split
  int lesions_min = 1;
  int lesions_max = 4;
  double radius_min = 2.5;
  double radius_max = 6.0;
  Index lesion_channel = 1;
  double lesion_offset = 1.5;
  double aux_lesion_offset = 2.5;  // offset on the other channels
  double anatomy_weight = 4.36;
  double anatomy_skew = 3.0;       // quadratic term of the shared field, rescaled to unit variance
  double channel_field_weight = 0.5;
  double noise_std = 0.35;
  Index field_scale = 8;  // voxels per coarse-grid cell of the smooth fields
  bool shift_enabled = true;
  std::vector<ChannelShift> target_shift{{1.0, 0.0}, {-0.8, 0.5}};
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

/// Intermediate stages of one generated case.
struct SynthCase {
  std::string id;
  Domain domain = Domain::source;
  Tensor<float> clean;    // fields + noise, before lesions, [C,X,Y,Z]
  Tensor<float> lesioned;  // after lesion offsets, before the domain shift
  Tensor<float> shifted;   // after the domain shift, before normalization
  VoxelMap labels;
  CaseRecord record;       // normalized image with labels
};

/// Deterministic in (config.seed, domain, index).
SynthCase generate_case(const SynthConfig& config, Domain domain, Index index);

/// Volumes, labels and manifests written by gen_dataset.
struct SynthDatasetFiles {
  std::filesystem::path manifest;         // every case
  std::filesystem::path source_train;
  std::filesystem::path source_heldout;
  std::filesystem::path target_train;
  std::filesystem::path target_test;
};

SynthDatasetFiles generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// Case ids: S_000, T_003, ...
std::string synth_case_id(Domain domain, Index index);

}  // namespace advseg
