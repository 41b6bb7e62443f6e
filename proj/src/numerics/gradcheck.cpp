#include "ctdet/numerics/gradcheck.hpp"

#include "ctdet/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ctdet {

double gradient_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport compare_gradients(const LossFn& loss_fn,
                                  std::vector<NamedParam>& params,
                                  const std::vector<std::vector<double>>& analytic,
                                  double epsilon, double tolerance) {
  if (analytic.size() != params.size()) {
    throw DimensionError("compare_gradients: one analytic gradient per parameter required");
  }
  const double base_a = loss_fn().item();
  const double base_b = loss_fn().item();
  if (base_a != base_b) {
    throw DeterminismError("loss function is not deterministic: " +
                           std::to_string(base_a) + " vs " + std::to_string(base_b));
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = params[p];
    if (analytic[p].size() != param.tensor.numel()) {
      throw DimensionError("compare_gradients: gradient size mismatch for " + param.name);
    }
    ParamGradError err;
    err.name = param.name;
    auto data = param.tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double w = data[i];
      const double h = epsilon * std::max(1.0, std::abs(w));
      data[i] = w + h;
      const double up = loss_fn().item();
      data[i] = w - h;
      const double down = loss_fn().item();
      data[i] = w;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = gradient_rel_error(analytic[p][i], numeric);
      if (rel > err.max_rel_error || i == 0) {
        err.max_rel_error = rel;
        err.worst_index = i;
        err.analytic = analytic[p][i];
        err.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    report.params.push_back(std::move(err));
  }
  return report;
}

std::vector<std::vector<double>> analytic_gradients(const LossFn& loss_fn,
                                                    std::vector<NamedParam>& params) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.tensor.has_grad()) {
      analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    } else {
      analytic.emplace_back(p.tensor.numel(), 0.0);
    }
    p.tensor.zero_grad();
  }
  return analytic;
}

GradCheckReport finite_diff_check(const LossFn& loss_fn,
                                  std::vector<NamedParam>& params,
                                  double epsilon, double tolerance) {
  const auto analytic = analytic_gradients(loss_fn, params);
  return compare_gradients(loss_fn, params, analytic, epsilon, tolerance);
}

std::vector<std::vector<double>> central_differences(const LossFn& loss_fn,
                                                     std::vector<NamedParam>& params,
                                                     double epsilon) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (auto& param : params) {
    auto data = param.tensor.mutable_data();
    std::vector<double> g(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double w = data[i];
      const double h = epsilon * std::max(1.0, std::abs(w));
      data[i] = w + h;
      const double up = loss_fn().item();
      data[i] = w - h;
      const double down = loss_fn().item();
      data[i] = w;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

GradCheckReport step_sweep_check(const LossFn& loss_fn, std::vector<NamedParam>& params,
                                 const std::vector<double>& epsilons, double tolerance) {
  if (epsilons.empty()) throw ParameterError("step_sweep_check: no steps given");
  const auto analytic = analytic_gradients(loss_fn, params);
  std::vector<std::vector<std::vector<double>>> numeric;
  for (double e : epsilons) numeric.push_back(central_differences(loss_fn, params, e));
  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamGradError err;
    err.name = params[p].name;
    for (std::size_t i = 0; i < analytic[p].size(); ++i) {
      double best = 0;
      double best_n = 0;
      for (std::size_t s = 0; s < numeric.size(); ++s) {
        const double rel = gradient_rel_error(analytic[p][i], numeric[s][p][i]);
        if (s == 0 || rel < best) {
          best = rel;
          best_n = numeric[s][p][i];
        }
      }
      if (best > err.max_rel_error || i == 0) {
        err.max_rel_error = best;
        err.worst_index = i;
        err.analytic = analytic[p][i];
        err.numeric = best_n;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, err.max_rel_error);
    report.params.push_back(std::move(err));
  }
  return report;
}

}  // namespace ctdet
