#pragma once

#include <span>
#include <vector>

#include "advseg/graph.hpp"

namespace advseg {

/// Classical (heavy-ball) momentum SGD:  v <- m*v - lr*g;  p <- p + v.
template <typename Scalar>
class SgdMomentum {
 public:
  SgdMomentum(Scalar learning_rate, Scalar momentum);

  /// Applies one update to every parameter of `params` using its `grad`.
  void step(ParameterSet<Scalar>& params);

  /// Lower-level form over parallel spans of values and gradients.
  void step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>* const> grads);

  Scalar learning_rate() const noexcept { return lr_; }
  void set_learning_rate(Scalar lr);
  Scalar momentum() const noexcept { return momentum_; }

  const std::vector<Tensor<Scalar>>& velocities() const noexcept { return velocity_; }
  std::vector<Tensor<Scalar>>& velocities() noexcept { return velocity_; }

 private:
  Scalar lr_;
  Scalar momentum_;
  std::vector<Tensor<Scalar>> velocity_;
};

/// Rescales all gradients of `params` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
template <typename Scalar>
Scalar clip_grad_norm(ParameterSet<Scalar>& params, Scalar max_norm);

}  // namespace advseg
