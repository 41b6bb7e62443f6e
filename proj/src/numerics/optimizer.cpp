#include "ctdet/numerics/optimizer.hpp"

namespace ctdet {

double SgdConfig::lr_at(std::int64_t step) const {
  double lr = learning_rate;
  for (const auto& m : schedule)
    if (step >= m.step) lr *= m.factor;
  return lr;
}

template <typename T>
void sgd_update(std::span<T> weights, std::span<const T> grads,
                std::span<T> velocity, double lr, double momentum,
                double weight_decay) {
  if (weights.size() != velocity.size() ||
      (!grads.empty() && grads.size() != weights.size())) {
    throw DimensionError("sgd_update: weight/grad/velocity length mismatch");
  }
  const T mu = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T g = (grads.empty() ? T(0) : grads[i]) + wd * weights[i];
    velocity[i] = mu * velocity[i] + g;
    weights[i] -= rate * velocity[i];
  }
}

template <typename T>
Sgd<T>::Sgd(std::vector<Tensor<T>> params, SgdConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
  if (!(config_.learning_rate > 0.0)) {
    throw ParameterError("learning rate must be strictly positive");
  }
  if (config_.momentum < 0.0 || config_.momentum >= 1.0) {
    throw ParameterError("momentum must lie in [0, 1)");
  }
  if (config_.weight_decay < 0.0) {
    throw ParameterError("weight decay must be nonnegative");
  }
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
}

template <typename T>
void Sgd<T>::step(std::int64_t step_index) {
  const double lr = config_.lr_at(step_index);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    std::span<const T> g = p.has_grad() ? p.grad() : std::span<const T>{};
    sgd_update<T>(p.mutable_data(), g, velocity_[i], lr, config_.momentum,
                  config_.weight_decay);
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Sgd<float>;
template class Sgd<double>;
template void sgd_update<float>(std::span<float>, std::span<const float>,
                                std::span<float>, double, double, double);
template void sgd_update<double>(std::span<double>, std::span<const double>,
                                 std::span<double>, double, double, double);

}  // namespace ctdet
