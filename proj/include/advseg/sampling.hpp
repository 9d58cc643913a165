#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advseg/networks.hpp"
#include "advseg/rng.hpp"
#include "advseg/volume.hpp"

namespace advseg {

/// Per-channel intensity normalization: clamp to the [window, 1 - window]
/// percentiles of in-mask intensities, then standardize with the in-mask mean
/// and standard deviation of the clamped values. Constant channels become 0.
Tensor<float> normalize_volume(const Tensor<float>& image, const VoxelMap* mask = nullptr, double window = 0.02);

/// Percentile of ascending-sorted values, linear interpolation between ranks.
double sorted_percentile(std::span<const float> sorted, double q);

/// Overwrites one channel with a constant (default -4, a very low value on the
/// normalized scale) to mark a missing sequence.
Tensor<float> fill_missing_channel(const Tensor<float>& image, Index channel, float fill = -4.0f);

/// Patch extents used for one segment.
struct SegmentGeometry {
  Index normal_extent = 25;
  Index low_extent = 19;
  Index downsample = 3;
  Index label_extent = 9;

  static SegmentGeometry training(const SegmenterSpec& spec);
  static SegmentGeometry for_normal_extent(const SegmenterSpec& spec, Index normal_extent, Index max_shift = 0);
};

struct SegmentSample {
  Tensor<float> normal;          // [C, E, E, E]
  Tensor<float> low;             // [C, L, L, L], every D-th voxel of a D*L field
  std::optional<VoxelMap> labels;  // [O, O, O], aligned with the segmenter output
  Domain domain = Domain::source;
  std::string case_id;
  Extent3 center{0, 0, 0};
  bool foreground_centered = false;
};

struct SegBatch {
  std::vector<SegmentSample> samples;
  /// Foreground-centered draws that fell back to uniform because the case had
  /// no foreground.
  Index foreground_fallbacks = 0;
};

struct AdvBatch {
  std::vector<SegmentSample> samples;
};

/// Reads a [C,E,E,E] patch whose voxel i sits at center + step * (i - (E-1)/2)
/// along each axis. The center may lie outside the volume; outside voxels read
/// as 0.
Tensor<float> gather_patch(const Tensor<float>& image, const Extent3& center, Index extent, Index step);

/// Reads normal and context patches around `center`. Voxels outside the
/// volume read as 0.
SegmentSample extract_segment(const UnlabelledCase& c, const Extent3& center, const SegmentGeometry& geometry);

/// As above, plus the label patch (outside voxels read as background).
SegmentSample extract_segment(const CaseRecord& c, const Extent3& center, const SegmentGeometry& geometry);

/// Class-weighted labelled batches: round(n * fg_fraction) segments centered
/// on a uniformly drawn foreground voxel, the rest on a uniform voxel.
class SegBatchBuilder {
 public:
  /// With `domain_balanced`, sample i comes from domain i % 2 (S first) and
  /// cases are drawn uniformly within the domain; otherwise cases are drawn
  /// uniformly from all of `cases`.
  SegBatchBuilder(std::vector<const CaseRecord*> cases, SegmentGeometry geometry, bool domain_balanced = false);

  SegBatch build(Index n, double fg_fraction, Rng& rng) const;

 private:
  struct Entry {
    const CaseRecord* record;
    std::vector<Index> foreground;  // flat voxel indices with label > 0
  };
  std::vector<Entry> entries_;
  std::vector<std::size_t> by_domain_[2];
  SegmentGeometry geometry_;
  bool balanced_;
};

SegBatch build_seg_batch(std::span<const CaseRecord> cases, Index n, double fg_fraction, const SegmentGeometry& geometry,
                         Rng& rng);

/// Domain-balanced unlabelled batches: n/2 segments from each domain, cases
/// and centers uniform. Sees only label-blind views.
class AdvBatchBuilder {
 public:
  AdvBatchBuilder(std::vector<UnlabelledCase> source, std::vector<UnlabelledCase> target, SegmentGeometry geometry,
                  bool mask_only = false);

  AdvBatch build(Index n, Rng& rng) const;

 private:
  struct Entry {
    UnlabelledCase view;
    std::vector<Index> candidates;  // empty: whole volume
  };
  std::vector<Entry> source_, target_;
  SegmentGeometry geometry_;
};

AdvBatch build_adv_batch(std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target, Index n,
                         const SegmentGeometry& geometry, Rng& rng, bool mask_only = false);

/// Samples stacked into network inputs.
struct BatchTensors {
  Tensor<float> normal;                // [N, C, E, E, E]
  Tensor<float> low;                   // [N, C, L, L, L]
  std::vector<std::int32_t> labels;    // [N, O, O, O]; empty unless every sample has labels
  std::vector<std::int32_t> domains;   // [N]
};

BatchTensors stack_samples(std::span<const SegmentSample> samples);

}  // namespace advseg
