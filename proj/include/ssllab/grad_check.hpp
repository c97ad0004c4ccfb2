#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ssllab/tensor.hpp"

namespace ssllab {

/// Central-difference gradient verification for a scalar-valued function of
/// one tensor input. Returns the maximum relative error
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
/// The 1e-3 floor makes the comparison absolute for near-zero gradients,
/// where the central difference is dominated by cancellation noise of order
/// |loss| * ulp / eps; differences below ~1e-8 are tolerated there, while a
/// genuinely missing gradient path still fails by orders of magnitude.
/// over all elements. The function is re-invoked with grad recording off for
/// the perturbed evaluations.
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn,
                  Tensor<T> x, double eps = 1e-4) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = fn(x);
  backward(loss);
  std::vector<T> analytic = x.grad();
  if (analytic.empty()) analytic.assign(x.data().size(), T(0));

  double worst = 0.0;
  NoGradGuard ng;
  auto& xv = x.data();
  for (size_t i = 0; i < xv.size(); ++i) {
    const T orig = xv[i];
    xv[i] = orig + static_cast<T>(eps);
    const double fp = static_cast<double>(fn(x).item());
    xv[i] = orig - static_cast<T>(eps);
    const double fm = static_cast<double>(fn(x).item());
    xv[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

/// Multi-input variant: perturbs each listed parameter tensor in turn.
/// `fn` computes the scalar loss from current parameter values (closing over
/// the tensors), so it takes no arguments.
template <typename T>
double grad_check_params(const std::function<Tensor<T>()>& fn,
                         std::vector<Tensor<T>> params, double eps = 1e-4) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<T> loss = fn();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) {
    if (p.grad().empty())
      analytic.emplace_back(p.data().size(), T(0));
    else
      analytic.push_back(p.grad());
  }

  double worst = 0.0;
  NoGradGuard ng;
  for (size_t k = 0; k < params.size(); ++k) {
    auto& pv = params[k].data();
    for (size_t i = 0; i < pv.size(); ++i) {
      const T orig = pv[i];
      pv[i] = orig + static_cast<T>(eps);
      const double fp = static_cast<double>(fn().item());
      pv[i] = orig - static_cast<T>(eps);
      const double fm = static_cast<double>(fn().item());
      pv[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ssllab
