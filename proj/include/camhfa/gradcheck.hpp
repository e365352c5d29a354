#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "camhfa/error.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every coordinate of x.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& x, double eps = 1e-6) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_gradient: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// Largest |a - n| / max(|a|, |n|, floor) over all coordinates.
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-8) {
  require_same_shape(analytic, numeric, "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace camhfa
