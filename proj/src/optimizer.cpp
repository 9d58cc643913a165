#include "advseg/optimizer.hpp"

#include <cmath>

namespace advseg {

template <typename Scalar>
SgdMomentum<Scalar>::SgdMomentum(Scalar learning_rate, Scalar momentum) : lr_(learning_rate), momentum_(momentum) {
  if (!(momentum >= Scalar(0) && momentum < Scalar(1))) throw ConfigError("momentum must lie in [0,1)");
  set_learning_rate(learning_rate);
}

template <typename Scalar>
void SgdMomentum<Scalar>::set_learning_rate(Scalar lr) {
  if (!(lr > Scalar(0)) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  lr_ = lr;
}

template <typename Scalar>
void SgdMomentum<Scalar>::step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>* const> grads) {
  if (params.size() != grads.size()) throw ShapeError("sgd step: parameter/gradient count mismatch");
  if (velocity_.empty()) {
    for (const auto* p : params) velocity_.emplace_back(p->shape());
  }
  if (velocity_.size() != params.size()) throw ShapeError("sgd step: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = *params[i];
    const Tensor<Scalar>& g = *grads[i];
    Tensor<Scalar>& v = velocity_[i];
    if (p.shape() != g.shape() || p.shape() != v.shape()) {
      throw ShapeError("sgd step: shape mismatch at parameter " + std::to_string(i) + ": " + to_string(p.shape()) +
                       " / grad " + to_string(g.shape()) + " / velocity " + to_string(v.shape()));
    }
    v.array() = momentum_ * v.array() - lr_ * g.array();
    p.array() += v.array();
  }
}

template <typename Scalar>
void SgdMomentum<Scalar>::step(ParameterSet<Scalar>& params) {
  std::vector<Tensor<Scalar>*> values;
  std::vector<const Tensor<Scalar>*> grads;
  for (auto& p : params) {
    values.push_back(&p.value);
    grads.push_back(&p.grad);
  }
  step(values, grads);
}

template <typename Scalar>
Scalar clip_grad_norm(ParameterSet<Scalar>& params, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& p : params) sq += p.grad.array().square().sum();
  const Scalar norm = std::sqrt(sq);
  if (norm > max_norm && norm > Scalar(0)) params.scale_grad(max_norm / norm);
  return norm;
}

template class SgdMomentum<float>;
template class SgdMomentum<double>;
template float clip_grad_norm(ParameterSet<float>&, float);
template double clip_grad_norm(ParameterSet<double>&, double);

}  // namespace advseg
