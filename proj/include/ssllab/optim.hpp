#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssllab/common.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

/// Linear-scaling rule for the pretraining learning rate:
/// base * effective_batch / 256.
inline double pretrain_lr(double base, int64_t effective_batch) {
  if (effective_batch < 1)
    throw ValueError("pretrain_lr: batch size must be >= 1");
  return base * static_cast<double>(effective_batch) / 256.0;
}

/// Cosine decay over total_steps applied optimizer steps (no warmup).
struct CosineSchedule {
  double base_lr = 0.0;
  int64_t total_steps = 0;
};

inline double cosine_lr(const CosineSchedule& s, int64_t t) {
  if (s.total_steps < 1) throw ValueError("cosine schedule needs total_steps >= 1");
  if (t < 0) throw ValueError("cosine_lr: negative step");
  if (t > s.total_steps)
    throw LifecycleError("cosine schedule exhausted: step " + std::to_string(t) +
                         " > total " + std::to_string(s.total_steps));
  if (t == 0) return s.base_lr;
  if (t == s.total_steps) return 0.0;
  if (2 * t == s.total_steps) return 0.5 * s.base_lr;
  const double frac = static_cast<double>(t) / static_cast<double>(s.total_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// Adam with classic (coupled) L2 weight decay added to the gradient; the
// decoupled variant applies decay directly to the weights instead.
// One step() consumes the gradients accumulated since the last zero_grad(),
// which is what makes gradient accumulation work: backward() adds into the
// same grad buffers across micro-batches.
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor<T>> params, double weight_decay = 0.0,
                bool decoupled = false, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        wd_(weight_decay),
        decoupled_(decoupled),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t k = 0; k < params_.size(); ++k) {
      m_[k].assign(params_[k].data().size(), 0.0);
      v_[k].assign(params_[k].data().size(), 0.0);
    }
  }

  int64_t step_count() const { return t_; }
  size_t param_count() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// One applied optimizer step at the given learning rate.
  void step(double lr) {
    for (auto& p : params_)
      if (p.grad().empty())
        throw LifecycleError(
            "incomplete backward: a parameter has no gradient; run backward() "
            "before step()");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k].data();
      const auto& g = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (size_t i = 0; i < w.size(); ++i) {
        double grad = static_cast<double>(g[i]);
        if (!decoupled_) grad += wd_ * static_cast<double>(w[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad * grad;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        double update = m_hat / (std::sqrt(v_hat) + eps_);
        if (decoupled_) update += wd_ * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
  double wd_ = 0.0;
  bool decoupled_ = false;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

}  // namespace ssllab
