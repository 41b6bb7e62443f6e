#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctdet/numerics/tensor.hpp"

namespace ctdet {

struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

struct NamedParam {
  std::string name;
  Tensor<double> tensor;
};

using LossFn = std::function<Tensor<double>()>;

// |a - n| / max(|a|, |n|, 1e-8)
double gradient_rel_error(double analytic, double numeric);

// Compares supplied analytic gradients (one vector per param) against central
// differences (L(w+e) - L(w-e)) / 2e with e = epsilon * max(1, |w|).
// Throws DeterminismError when two evaluations at the same point differ.
GradCheckReport compare_gradients(const LossFn& loss_fn,
                                  std::vector<NamedParam>& params,
                                  const std::vector<std::vector<double>>& analytic,
                                  double epsilon, double tolerance);

// Runs the loss once with backward to obtain analytic gradients, then
// compares them against finite differences.
GradCheckReport finite_diff_check(const LossFn& loss_fn,
                                  std::vector<NamedParam>& params,
                                  double epsilon = 1e-6,
                                  double tolerance = 1e-5);

// Gradients of one backward pass from zeroed grads; zeros for a parameter
// the loss does not reach.
std::vector<std::vector<double>> analytic_gradients(const LossFn& loss_fn,
                                                    std::vector<NamedParam>& params);

// (L(w+e) - L(w-e)) / 2e per entry, e = epsilon * max(1, |w|).
std::vector<std::vector<double>> central_differences(const LossFn& loss_fn,
                                                     std::vector<NamedParam>& params,
                                                     double epsilon);

// Central differences at each step in `epsilons`; an entry's error is the
// smallest over the steps. Small steps lose near-zero entries to the loss's
// roundoff, large ones lose strongly curved entries to truncation, while a
// wrong analytic gradient disagrees at every step.
GradCheckReport step_sweep_check(const LossFn& loss_fn, std::vector<NamedParam>& params,
                                 const std::vector<double>& epsilons, double tolerance);

}  // namespace ctdet
