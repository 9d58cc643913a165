#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "advseg/error.hpp"

namespace advseg {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;
using Extent3 = std::array<Index, 3>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);
std::string to_string(const Extent3& extent);

/// Dense row-major array. Storage is an Eigen column vector so that whole-tensor
/// arithmetic can be written as Eigen array expressions.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Array>;
  using ConstMap = Eigen::Map<const Array>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(Array::Zero(numel(shape_))) {}
  Tensor(Shape shape, Array values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != numel(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " given " +
                       std::to_string(values_.size()) + " values");
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return values_.size(); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  bool empty() const noexcept { return values_.size() == 0; }

  Array& array() noexcept { return values_; }
  const Array& array() const noexcept { return values_; }
  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }
  std::span<Scalar> span() noexcept { return {values_.data(), static_cast<std::size_t>(values_.size())}; }
  std::span<const Scalar> span() const noexcept {
    return {values_.data(), static_cast<std::size_t>(values_.size())};
  }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  bool all_finite() const { return values_.isFinite().all(); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, values_.template cast<To>());
  }

 private:
  Shape shape_;
  Array values_;
};

/// Batch-of-feature-maps view of a rank-4 [C,X,Y,Z] or rank-5 [N,C,X,Y,Z] shape.
struct FmDims {
  Index n = 0, c = 0, x = 0, y = 0, z = 0;
  bool batched = true;

  static FmDims of(const Shape& shape);
  Index spatial() const { return x * y * z; }
  Extent3 extent() const { return {x, y, z}; }
  Shape shape() const;
  Shape with(Index channels, const Extent3& extent) const;
};

}  // namespace advseg
