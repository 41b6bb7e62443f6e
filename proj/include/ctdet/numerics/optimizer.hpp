#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctdet/numerics/tensor.hpp"

namespace ctdet {

struct LrMilestone {
  std::int64_t step;  // decay applies for step >= this value
  double factor;
};

struct SgdConfig {
  double learning_rate = 4e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<LrMilestone> schedule;

  double lr_at(std::int64_t step) const;
};

// SGD with classical momentum and coupled L2 weight decay:
//   g' = g + wd * w;  v = mu * v + g';  w = w - lr(step) * v
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, SgdConfig config);

  // Applies one update using the gradients currently stored on the params.
  // Parameters without a gradient buffer are treated as having zero gradient.
  void step(std::int64_t step_index);
  void zero_grad();

  const SgdConfig& config() const { return config_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }
  std::vector<Tensor<T>>& params() { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  SgdConfig config_;
};

// Single-parameter form of the update rule, for tests and tooling.
template <typename T>
void sgd_update(std::span<T> weights, std::span<const T> grads,
                std::span<T> velocity, double lr, double momentum,
                double weight_decay);

}  // namespace ctdet
