#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssllab/common.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

/// Mean negative log-likelihood over rows of [N, k] logits. Computed in
/// log-space (max-shifted log-sum-exp), never through an explicit softmax
/// probability that could underflow.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<int64_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2)
    throw ShapeError("cross_entropy: logits must be [N, k], got " +
                     shape_str(s));
  const int64_t n = s[0], k = s[1];
  if (n < 1) throw ValueError("cross_entropy: empty batch");
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  for (int64_t i = 0; i < n; ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw ValueError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0, " + std::to_string(k) + ")");

  const auto& xv = logits.data();
  // Softmax rows are kept for the fused backward: d loss / d logits is
  // (softmax - onehot) / N.
  std::vector<double> probs(static_cast<size_t>(n * k));
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i * k);
    double mx = static_cast<double>(xv[base]);
    for (int64_t j = 1; j < k; ++j)
      mx = std::max(mx, static_cast<double>(xv[base + static_cast<size_t>(j)]));
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j)
      denom += std::exp(static_cast<double>(xv[base + static_cast<size_t>(j)]) - mx);
    const double lse = mx + std::log(denom);
    total += lse - static_cast<double>(xv[base + static_cast<size_t>(labels[i])]);
    for (int64_t j = 0; j < k; ++j) {
      const size_t at = base + static_cast<size_t>(j);
      probs[at] = std::exp(static_cast<double>(xv[at]) - lse);
    }
  }
  Tensor<T> result =
      Tensor<T>::make({1}, {static_cast<T>(total / static_cast<double>(n))});
  auto xi = logits.impl();
  auto oi = result.impl();
  std::vector<int64_t> y = labels;
  detail::record_op<T>("cross_entropy", {logits}, result,
                       [xi, oi, probs = std::move(probs), y = std::move(y), n, k] {
                         if (!xi->requires_grad) return;
                         const T go = oi->grad[0];
                         std::vector<T> gx(xi->data.size());
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (int64_t i = 0; i < n; ++i) {
                           for (int64_t j = 0; j < k; ++j) {
                             const size_t at = static_cast<size_t>(i * k + j);
                             double d = probs[at];
                             if (j == y[static_cast<size_t>(i)]) d -= 1.0;
                             gx[at] = static_cast<T>(static_cast<double>(go) *
                                                     d * inv_n);
                           }
                         }
                         detail::accumulate(xi, gx);
                       });
  return result;
}

/// Mean element-wise binary cross-entropy from logits against hard {0,1}
/// targets, in the log-sum-exp stabilized form
///   max(x, 0) - x*y + log(1 + exp(-|x|))
/// which stays finite for logits of any magnitude.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& logits,
                               const Tensor<T>& targets) {
  const Shape& s = logits.shape();
  if (s.size() != 2)
    throw ShapeError("binary_cross_entropy: logits must be [N, m], got " +
                     shape_str(s));
  if (targets.shape() != s)
    throw ShapeError("binary_cross_entropy: targets " +
                     shape_str(targets.shape()) + " do not match logits " +
                     shape_str(s));
  const int64_t count = logits.numel();
  if (count < 1) throw ValueError("binary_cross_entropy: empty batch");
  const auto& xv = logits.data();
  const auto& yv = targets.data();
  for (int64_t i = 0; i < count; ++i) {
    const T y = yv[static_cast<size_t>(i)];
    if (y != T(0) && y != T(1))
      throw ValueError("binary_cross_entropy: target must be exactly 0 or 1");
  }
  double total = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const double x = static_cast<double>(xv[static_cast<size_t>(i)]);
    const double y = static_cast<double>(yv[static_cast<size_t>(i)]);
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
  }
  Tensor<T> result = Tensor<T>::make(
      {1}, {static_cast<T>(total / static_cast<double>(count))});
  auto xi = logits.impl();
  auto yi = targets.impl();
  auto oi = result.impl();
  detail::record_op<T>("binary_cross_entropy", {logits}, result,
                       [xi, yi, oi, count] {
                         if (!xi->requires_grad) return;
                         const T go = oi->grad[0];
                         std::vector<T> gx(xi->data.size());
                         const double inv = 1.0 / static_cast<double>(count);
                         for (int64_t i = 0; i < count; ++i) {
                           const size_t at = static_cast<size_t>(i);
                           const double x = static_cast<double>(xi->data[at]);
                           const double y = static_cast<double>(yi->data[at]);
                           const double sig = 1.0 / (1.0 + std::exp(-x));
                           gx[at] = static_cast<T>(static_cast<double>(go) *
                                                   (sig - y) * inv);
                         }
                         detail::accumulate(xi, gx);
                       });
  return result;
}

}  // namespace ssllab
