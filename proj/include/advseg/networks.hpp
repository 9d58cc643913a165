#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/graph.hpp"
#include "advseg/ops.hpp"

namespace advseg {

inline constexpr int kPathwayLayers = 8;
inline constexpr Index kPathwayKernel = 3;
inline constexpr int kFusedFirstLayer = kPathwayLayers + 1;  // layer 9
inline constexpr int kFusedLastLayer = kPathwayLayers + 2;   // layer 10

/// Dual-pathway segmenter: two stacks of eight valid 3^3 convs (full
/// resolution and D-times subsampled context), fused after upsampling the
/// context stack, then two 1^3 hidden layers and a 1^3 classifier.
struct SegmenterSpec {
  int in_channels = 2;
  int classes = 2;
  std::vector<int> pathway_fms{8, 8, 16, 16, 16, 16, 24, 24};
  int downsample = 3;
  std::vector<int> hidden_fms{32, 32};
  double slope = 0.01;
  int train_extent = 25;
  int low_train_extent = 19;

  void validate() const;
  bool operator==(const SegmenterSpec&) const = default;
};

/// Four 3^3 conv layers followed by a 1^3 domain classifier.
struct DiscriminatorSpec {
  std::vector<int> fms{20, 20, 20, 20};
  int kernel = 3;
  int domain_classes = 2;
  double slope = 0.01;

  void validate() const;
  bool operator==(const DiscriminatorSpec&) const = default;
};

enum class Pathway { normal, low, fused };

struct TapPoint {
  Pathway pathway = Pathway::fused;
  int layer = kFusedLastLayer;
  auto operator<=>(const TapPoint&) const = default;
};

using TapSet = std::vector<TapPoint>;

/// Layers 4, 6, 8 of both pathways plus hidden layer 10.
TapSet default_taps();

/// Parses "L10", "L4", "L4,6,8,10", "L2,4,6,8,10". Pathway layers expand to
/// both pathways; layers 9 and 10 are single post-fusion taps.
TapSet parse_taps(std::string_view text);
std::string format_taps(const TapSet& taps);
std::string_view to_string(Pathway p);
Pathway pathway_from_string(std::string_view s);
void validate_taps(const TapSet& taps);

/// 1 + sum(k - 1) for a stride-1 valid stack.
Index receptive_field(std::span<const Index> kernels);
Index receptive_field(const DiscriminatorSpec& spec);
/// Receptive field of the segmenter in full-resolution input voxels
/// (normal pathway).
Index receptive_field(const SegmenterSpec& spec);

/// Logit extent for a normal-pathway input extent.
Index output_extent(const SegmenterSpec& spec, Index normal_extent);

/// Smallest context-patch extent whose upsampled output covers the normal
/// output, with an even surplus so the crop is centered. `max_shift` reserves
/// room for shifting the crop by up to that many voxels.
Index low_extent_for(const SegmenterSpec& spec, Index normal_extent, Index max_shift = 0);

/// Channel count of the assembled tap tensor.
Index tap_channels(const SegmenterSpec& spec, const TapSet& taps);

/// Spatial extent of one tap's activation, before assembly (context taps not
/// yet upsampled).
Index tap_extent(const SegmenterSpec& spec, const TapPoint& tap, Index normal_extent, Index low_extent);

struct ForwardOptions {
  /// Run the hidden and classification layers and return logits.
  bool logits = true;
  /// Bind parameters as graph parameters (false: constants, no gradients).
  bool trainable = true;
  /// Extra offset of the upsampled context crop, per axis.
  Extent3 low_shift{0, 0, 0};
};

template <typename Scalar>
struct SegmenterOutputs {
  Var<Scalar> logits;             // invalid when ForwardOptions::logits is false
  std::vector<Var<Scalar>> taps;  // in TapSet order
};

template <typename Scalar>
class Segmenter {
 public:
  Segmenter(SegmenterSpec spec, std::uint64_t seed);

  /// `normal` and `low` are [N,C,X,Y,Z] (or unbatched [C,X,Y,Z]) patches
  /// centered on the same voxels.
  SegmenterOutputs<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& normal, const Tensor<Scalar>& low,
                                   const TapSet& taps = {}, const ForwardOptions& options = {});

  const SegmenterSpec& spec() const noexcept { return spec_; }
  ParameterSet<Scalar>& parameters() noexcept { return params_; }
  const ParameterSet<Scalar>& parameters() const noexcept { return params_; }

 private:
  struct Layer {
    std::size_t kernels;
    std::size_t bias;
  };
  Var<Scalar> apply(Graph<Scalar>& g, const Layer& layer, const Var<Scalar>& x, bool trainable, bool activate);

  SegmenterSpec spec_;
  ParameterSet<Scalar> params_;
  std::vector<Layer> normal_, low_, hidden_;
  Layer classifier_{};
};

template <typename Scalar>
class Discriminator {
 public:
  Discriminator(DiscriminatorSpec spec, Index tap_channels, std::uint64_t seed);

  /// Domain logits [N,2,x,y,z]; every axis shrinks by receptive_field - 1.
  Var<Scalar> forward(Graph<Scalar>& g, const Var<Scalar>& tap_tensor, bool trainable = true);

  const DiscriminatorSpec& spec() const noexcept { return spec_; }
  Index tap_channels() const noexcept { return tap_channels_; }
  ParameterSet<Scalar>& parameters() noexcept { return params_; }
  const ParameterSet<Scalar>& parameters() const noexcept { return params_; }

 private:
  DiscriminatorSpec spec_;
  Index tap_channels_;
  ParameterSet<Scalar> params_;
};

/// Upsamples context taps by D, center-crops every tap to the smallest
/// extent among them and concatenates in `taps` order.
template <typename Scalar>
Var<Scalar> assemble_tap_tensor(const TapSet& taps, std::span<const Var<Scalar>> activations, Index downsample);

/// Mean cross-entropy of per-position domain logits against one domain label
/// per sample (0 = source, 1 = target).
template <typename Scalar>
Var<Scalar> domain_loss(const Var<Scalar>& logits, std::span<const std::int32_t> domains);

/// Per-sample domain prediction: argmax of the position-averaged softmax.
template <typename Scalar>
std::vector<std::int32_t> domain_predictions(const Tensor<Scalar>& logits);

}  // namespace advseg
