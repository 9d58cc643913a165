#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advseg/networks.hpp"
#include "advseg/rng.hpp"
#include "advseg/sampling.hpp"
#include "advseg/volume.hpp"

namespace advseg {

/// Whole-volume label map by fully-convolutional tiling. Output windows of
/// `tile_extent`^3 partition the volume; inputs outside it read as 0. The
/// context grid is anchored to volume coordinates (multiples of D), so the
/// prediction for a voxel does not depend on the tiling.
VoxelMap dense_infer(Segmenter<float>& segmenter, const UnlabelledCase& c, Index tile_extent = 25);

/// Per-voxel class probabilities for the positive class (1) alongside the
/// label map; used by the tiling-invariance checks.
struct DenseOutput {
  VoxelMap labels;
  std::vector<float> logits;  // [classes, X, Y, Z]
};
DenseOutput dense_logits(Segmenter<float>& segmenter, const UnlabelledCase& c, Index tile_extent = 25);

struct ConfusionCounts {
  Index tp = 0, fp = 0, fn = 0, tn = 0;
  Index total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Counts for the positive class (label > 0) over in-mask voxels.
ConfusionCounts confusion_counts(const VoxelMap& prediction, const VoxelMap& truth, const VoxelMap* mask = nullptr);

struct CaseMetrics {
  std::string case_id;
  double dsc = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

/// DSC = 2TP/(2TP+FP+FN), recall = TP/(TP+FN), precision = TP/(TP+FP).
/// Empty truth and prediction: all 1. Empty truth, non-empty prediction:
/// DSC 0, precision 0, recall 1. Non-empty truth, empty prediction: DSC 0,
/// recall 0, precision 1.
CaseMetrics segmentation_metrics(const ConfusionCounts& counts, std::string case_id = {});

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

struct MetricSummary {
  MeanStd dsc, recall, precision;
};

MetricSummary summarize(std::span<const CaseMetrics> cases);

/// Per-case rows `case_id,dsc,recall,precision` (sorted by case id) followed
/// by `mean,...` and `std,...` rows.
void write_metrics_csv(const std::filesystem::path& path, std::vector<CaseMetrics> cases);

/// Dense inference + metrics over labelled cases, in case-id order.
std::vector<CaseMetrics> evaluate_cases(Segmenter<float>& segmenter, std::span<const CaseRecord> cases,
                                        Index tile_extent = 25);

/// Fraction of correct domain calls by `discriminator` on n/2 source and n/2
/// target segments drawn uniformly from held-out cases.
double probe_domain_accuracy(Segmenter<float>& segmenter, Discriminator<float>& discriminator, const TapSet& taps,
                             std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target,
                             Index n_samples, Rng& rng);

struct FreshProbeOptions {
  int steps = 1000;
  Index batch = 20;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double grad_clip = 5.0;  // 0: off
  std::uint64_t seed = 0;
};

/// Trains a new discriminator against the frozen segmenter's taps. The
/// stricter divergence reading: accuracy of the best fresh classifier rather
/// than the co-trained adversary.
Discriminator<float> train_fresh_probe(Segmenter<float>& segmenter, const DiscriminatorSpec& spec, const TapSet& taps,
                                       std::span<const UnlabelledCase> source, std::span<const UnlabelledCase> target,
                                       const FreshProbeOptions& options);

}  // namespace advseg
