#include "advseg/tensor.hpp"

#include <numeric>

namespace advseg {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::string to_string(const Extent3& extent) {
  return to_string(Shape(extent.begin(), extent.end()));
}

FmDims FmDims::of(const Shape& shape) {
  FmDims d;
  if (shape.size() == 5) {
    d = {shape[0], shape[1], shape[2], shape[3], shape[4], true};
  } else if (shape.size() == 4) {
    d = {1, shape[0], shape[1], shape[2], shape[3], false};
  } else {
    throw ShapeError("feature map must be [C,X,Y,Z] or [N,C,X,Y,Z], got " + to_string(shape));
  }
  return d;
}

Shape FmDims::shape() const { return with(c, extent()); }

Shape FmDims::with(Index channels, const Extent3& e) const {
  if (batched) return {n, channels, e[0], e[1], e[2]};
  return {channels, e[0], e[1], e[2]};
}

}  // namespace advseg
