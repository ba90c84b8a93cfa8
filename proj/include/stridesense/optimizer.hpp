#pragma once

#include <vector>

#include "stridesense/tensor.hpp"

namespace stridesense::nn {

// SGD constants: learning rate 0.001, Nesterov momentum 0.9, weight decay
// 0.0001 applied as L2 added to the gradient of weights and biases alike.
struct SgdConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0001;
};

// Update per parameter p with gradient g:
//   g' = g + weight_decay * p
//   v  = momentum * v + g'
//   d  = g' + momentum * v
//   p  = p - learning_rate * d
// With momentum 0 this reduces to p - lr * (g + wd * p).
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, const SgdConfig& config)
      : params_(std::move(params)), config_(config) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) {
      velocity_.emplace_back(p.data().size(), T(0));
    }
  }

  const SgdConfig& config() const { return config_; }

  void step() {
    const T lr = static_cast<T>(config_.learning_rate);
    const T mu = static_cast<T>(config_.momentum);
    const T wd = static_cast<T>(config_.weight_decay);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& data = params_[pi].data();
      auto& grad = params_[pi].grad();
      if (grad.size() != data.size()) {
        throw ShapeMismatch("sgd_step: gradient buffer does not match parameter");
      }
      auto& vel = velocity_[pi];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad[i] + wd * data[i];
        vel[i] = mu * vel[i] + g;
        data[i] -= lr * (g + mu * vel[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  SgdConfig config_;
};

// Single-parameter form used by unit tests and anywhere a bare buffer update
// is handier than the class.
template <class T>
void sgd_step(std::vector<T>& param, const std::vector<T>& grad, std::vector<T>& velocity,
              const SgdConfig& config) {
  if (grad.size() != param.size() || velocity.size() != param.size()) {
    throw ShapeMismatch("sgd_step: buffer sizes differ");
  }
  const T lr = static_cast<T>(config.learning_rate);
  const T mu = static_cast<T>(config.momentum);
  const T wd = static_cast<T>(config.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    velocity[i] = mu * velocity[i] + g;
    param[i] -= lr * (g + mu * velocity[i]);
  }
}

}  // namespace stridesense::nn
