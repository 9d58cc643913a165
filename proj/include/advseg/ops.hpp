#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "advseg/graph.hpp"

namespace advseg {

// Differentiable ops. Feature maps are [C,X,Y,Z] or batched [N,C,X,Y,Z]; the
// output keeps the input's rank.

/// Valid, stride-1 cross-correlation with per-output-channel bias.
/// kernels: [C_out, C_in, k, k, k], bias: [C_out].
template <typename Scalar>
Var<Scalar> conv3d_valid(const Var<Scalar>& input, const Var<Scalar>& kernels, const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope);

/// Mean over samples and voxels of -log softmax(logits)[target]. `targets`
/// holds one class id per voxel, in the logits' [N,X,Y,Z] order.
template <typename Scalar>
Var<Scalar> softmax_xent_mean(const Var<Scalar>& logits, std::span<const std::int32_t> targets);

/// Replicates every voxel into a factor^3 block.
template <typename Scalar>
Var<Scalar> upsample_repeat(const Var<Scalar>& fm, Index factor);

/// Spatial window starting at `offset`; adjoint scatters into the window.
template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& fm, const Extent3& offset, const Extent3& extent);

/// Centered spatial window; offset floor((source - target) / 2) per axis.
template <typename Scalar>
Var<Scalar> center_crop(const Var<Scalar>& fm, const Extent3& target);

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> fms);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& x);

// Non-differentiable helpers.

/// Per-voxel softmax over the channel axis.
template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits);

/// Per-voxel argmax over the channel axis, [N,X,Y,Z] order.
template <typename Scalar>
std::vector<std::int32_t> argmax_channels(const Tensor<Scalar>& logits);

/// Offset used by center_crop along one axis.
constexpr Index crop_offset(Index source, Index target) { return (source - target) / 2; }

}  // namespace advseg
