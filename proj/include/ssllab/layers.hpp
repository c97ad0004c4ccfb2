#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ssllab/conv.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

enum class Mode { train, eval };

/// Visitor over a model's named tensors. `trainable` is false for buffers
/// (BatchNorm running statistics) that are checkpointed but never optimized.
template <typename T>
using ParamVisitor =
    std::function<void(const std::string& name, Tensor<T>& tensor, bool trainable)>;

// ---------------------------------------------------------------------------
// Initializers. Kaiming-uniform for conv/linear feeding relu; truncated
// normal (std 0.02, clipped at 2 std) for transformer weights.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, int64_t fan_in, uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor<T>::uniform(shape, -bound, bound, seed);
}

enum class InitKind { kaiming_relu, trunc_normal_002 };

template <typename T>
Tensor<T> init_weight(const Shape& shape, int64_t fan_in, InitKind kind,
                      uint64_t seed) {
  if (kind == InitKind::kaiming_relu)
    return kaiming_uniform<T>(shape, fan_in, seed);
  return Tensor<T>::trunc_normal(shape, 0.02, seed);
}

// ---------------------------------------------------------------------------
// Linear: y = x W + b, weight stored [d_in, d_out].
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int64_t d_in, int64_t d_out, uint64_t seed, bool bias = true,
         InitKind kind = InitKind::kaiming_relu)
      : d_in_(d_in), d_out_(d_out), has_bias_(bias) {
    weight_ = init_weight<T>({d_in, d_out}, d_in, kind, seed);
    weight_.set_requires_grad(true);
    if (bias) {
      bias_ = Tensor<T>::zeros({1, d_out});
      bias_.set_requires_grad(true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 2 || x.dim(1) != d_in_)
      throw ShapeError("linear: input " + shape_str(x.shape()) +
                       " does not match weight [" + std::to_string(d_in_) +
                       "," + std::to_string(d_out_) + "]");
    auto y = matmul(x, weight_);
    if (has_bias_) y = add(y, bias_);
    return y;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight_, true);
    if (has_bias_) fn(prefix + ".bias", bias_, true);
  }

  int64_t in_dim() const { return d_in_; }
  int64_t out_dim() const { return d_out_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int64_t d_in_ = 0, d_out_ = 0;
  bool has_bias_ = true;
  Tensor<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Conv2d layer (NCHW). Bias defaults off: every conv in this library feeds a
// BatchNorm, which absorbs the shift.
// ---------------------------------------------------------------------------

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int64_t c_in, int64_t c_out, int64_t k, int64_t stride,
              int64_t pad, uint64_t seed, bool bias = false)
      : stride_(stride), pad_(pad), has_bias_(bias) {
    weight_ = kaiming_uniform<T>({c_out, c_in, k, k}, c_in * k * k, seed);
    weight_.set_requires_grad(true);
    if (bias) {
      bias_ = Tensor<T>::zeros({c_out});
      bias_.set_requires_grad(true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (has_bias_) return conv2d(x, weight_, bias_, stride_, pad_);
    return conv2d(x, weight_, stride_, pad_);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight_, true);
    if (has_bias_) fn(prefix + ".bias", bias_, true);
  }

  Tensor<T>& weight() { return weight_; }

 private:
  int64_t stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Tensor<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// BatchNorm over the channel axis of [N,C] or [N,C,H,W] inputs.
// Train mode normalizes with batch statistics (population variance) and
// updates running stats (unbiased variance, momentum-weighted); eval mode is
// a pure function of the running stats.
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int64_t channels, double momentum = 0.1,
                     double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = Tensor<T>::ones({channels});
    beta_ = Tensor<T>::zeros({channels});
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
    running_mean_ = Tensor<T>::zeros({channels});
    running_var_ = Tensor<T>::ones({channels});
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const int64_t r = x.ndim();
    if ((r != 2 && r != 4) || x.dim(1) != channels_)
      throw ShapeError("batchnorm: expected [N," + std::to_string(channels_) +
                       "] or [N," + std::to_string(channels_) +
                       ",H,W], got " + shape_str(x.shape()));
    Shape stat_shape(static_cast<size_t>(r), 1);
    stat_shape[1] = channels_;
    std::vector<int64_t> axes = r == 2 ? std::vector<int64_t>{0}
                                       : std::vector<int64_t>{0, 2, 3};
    const int64_t count = x.numel() / channels_;
    if (mode_ == Mode::train) {
      if (count < 2)
        throw DegenerateError(
            "batchnorm: train mode needs at least 2 values per channel, got " +
            std::to_string(count));
      auto mu = mean(x, axes, true);
      auto xc = sub(x, mu);
      auto var_pop = mean(square(xc), axes, true);
      auto xn = div(xc, sqrt_(add_scalar(var_pop, static_cast<T>(eps_))));
      update_running(mu, var_pop, count);
      return affine(xn, stat_shape);
    }
    auto mu = reshape(running_mean_, stat_shape);
    auto sd = sqrt_(add_scalar(reshape(running_var_, stat_shape),
                               static_cast<T>(eps_)));
    auto xn = div(sub(x, mu), sd);
    return affine(xn, stat_shape);
  }

  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma_, true);
    fn(prefix + ".beta", beta_, true);
    fn(prefix + ".running_mean", running_mean_, false);
    fn(prefix + ".running_var", running_var_, false);
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  Tensor<T> affine(const Tensor<T>& xn, const Shape& stat_shape) {
    return add(mul(xn, reshape(gamma_, stat_shape)),
               reshape(beta_, stat_shape));
  }

  void update_running(const Tensor<T>& mu, const Tensor<T>& var_pop,
                      int64_t count) {
    // Buffer update outside the autodiff graph; unbiased variance stored.
    const double m = momentum_;
    const double bessel =
        static_cast<double>(count) / static_cast<double>(count - 1);
    auto& rm = running_mean_.data();
    auto& rv = running_var_.data();
    for (int64_t c = 0; c < channels_; ++c) {
      const double bm = static_cast<double>(mu.data()[static_cast<size_t>(c)]);
      const double bv =
          static_cast<double>(var_pop.data()[static_cast<size_t>(c)]) * bessel;
      rm[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - m) * rm[static_cast<size_t>(c)] + m * bm);
      rv[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - m) * rv[static_cast<size_t>(c)] + m * bv);
    }
  }

  int64_t channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Mode mode_ = Mode::train;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// LayerNorm over the last axis.
// ---------------------------------------------------------------------------

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int64_t dim, double eps = 1e-5) : dim_(dim), eps_(eps) {
    gamma_ = Tensor<T>::ones({dim});
    beta_ = Tensor<T>::zeros({dim});
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() < 1 || x.dim(x.ndim() - 1) != dim_)
      throw ShapeError("layernorm: last axis of " + shape_str(x.shape()) +
                       " != " + std::to_string(dim_));
    const int64_t last = x.ndim() - 1;
    auto mu = mean(x, {last}, true);
    auto xc = sub(x, mu);
    auto var = mean(square(xc), {last}, true);
    auto xn = div(xc, sqrt_(add_scalar(var, static_cast<T>(eps_))));
    return add(mul(xn, gamma_), beta_);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma_, true);
    fn(prefix + ".beta", beta_, true);
  }

 private:
  int64_t dim_ = 0;
  double eps_ = 1e-5;
  Tensor<T> gamma_, beta_;
};

// ---------------------------------------------------------------------------
// Multi-head self-attention: softmax(QK^T/sqrt(d_h))V per head, head outputs
// concatenated, output projection applied.
// ---------------------------------------------------------------------------

template <typename T>
class MultiheadAttention {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(int64_t dim, int64_t heads, uint64_t seed)
      : dim_(dim), heads_(heads) {
    if (heads < 1 || dim % heads != 0)
      throw ConfigError("attention: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    wq_ = Linear<T>(dim, dim, mix_seed(seed, 1), true, InitKind::trunc_normal_002);
    wk_ = Linear<T>(dim, dim, mix_seed(seed, 2), true, InitKind::trunc_normal_002);
    wv_ = Linear<T>(dim, dim, mix_seed(seed, 3), true, InitKind::trunc_normal_002);
    wo_ = Linear<T>(dim, dim, mix_seed(seed, 4), true, InitKind::trunc_normal_002);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 3 || x.dim(2) != dim_)
      throw ShapeError("attention: expected [N,T," + std::to_string(dim_) +
                       "], got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), t = x.dim(1);
    const int64_t dh = dim_ / heads_;
    auto flat = reshape(x, {n * t, dim_});
    auto q = split_heads(wq_.forward(flat), n, t, dh);
    auto k = split_heads(wk_.forward(flat), n, t, dh);
    auto v = split_heads(wv_.forward(flat), n, t, dh);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto scores = scale(bmm(q, permute(k, {0, 2, 1})), inv_sqrt);
    auto attn = softmax(scores, -1);
    auto ctx = bmm(attn, v);  // [n*heads, t, dh]
    auto merged = reshape(
        permute(reshape(ctx, {n, heads_, t, dh}), {0, 2, 1, 3}), {n * t, dim_});
    return reshape(wo_.forward(merged), {n, t, dim_});
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    wq_.visit(prefix + ".q", fn);
    wk_.visit(prefix + ".k", fn);
    wv_.visit(prefix + ".v", fn);
    wo_.visit(prefix + ".out", fn);
  }

  int64_t heads() const { return heads_; }
  Linear<T>& q_proj() { return wq_; }
  Linear<T>& k_proj() { return wk_; }
  Linear<T>& v_proj() { return wv_; }
  Linear<T>& out_proj() { return wo_; }

 private:
  Tensor<T> split_heads(const Tensor<T>& flat, int64_t n, int64_t t,
                        int64_t dh) const {
    return reshape(permute(reshape(flat, {n, t, heads_, dh}), {0, 2, 1, 3}),
                   {n * heads_, t, dh});
  }

  int64_t dim_ = 0, heads_ = 1;
  Linear<T> wq_, wk_, wv_, wo_;
};

// ---------------------------------------------------------------------------
// Transformer encoder block, pre-norm: x += attn(ln1(x)); x += mlp(ln2(x)).
// MLP expansion ratio fixed at 4, gelu activation.
// ---------------------------------------------------------------------------

template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(int64_t dim, int64_t heads, uint64_t seed)
      : dim_(dim),
        ln1_(dim),
        ln2_(dim),
        attn_(dim, heads, mix_seed(seed, 10)),
        fc1_(dim, 4 * dim, mix_seed(seed, 11), true, InitKind::trunc_normal_002),
        fc2_(4 * dim, dim, mix_seed(seed, 12), true, InitKind::trunc_normal_002) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    auto h = add(x, attn_.forward(ln1_.forward(x)));
    const int64_t n = h.dim(0), t = h.dim(1);
    auto flat = reshape(ln2_.forward(h), {n * t, dim_});
    auto m = fc2_.forward(gelu(fc1_.forward(flat)));
    return add(h, reshape(m, {n, t, dim_}));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    ln1_.visit(prefix + ".ln1", fn);
    attn_.visit(prefix + ".attn", fn);
    ln2_.visit(prefix + ".ln2", fn);
    fc1_.visit(prefix + ".mlp.fc1", fn);
    fc2_.visit(prefix + ".mlp.fc2", fn);
  }

  MultiheadAttention<T>& attention() { return attn_; }

 private:
  int64_t dim_ = 0;
  LayerNorm<T> ln1_, ln2_;
  MultiheadAttention<T> attn_;
  Linear<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// Visitation helpers shared by models.
// ---------------------------------------------------------------------------

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable;
};

template <typename T, typename Visitable>
std::vector<NamedTensor<T>> named_tensors(Visitable& m,
                                          const std::string& root) {
  std::vector<NamedTensor<T>> out;
  m.visit(root, [&](const std::string& n, Tensor<T>& t, bool tr) {
    out.push_back({n, t, tr});
  });
  return out;
}

template <typename T, typename Visitable>
std::vector<Tensor<T>> trainable_tensors(Visitable& m) {
  std::vector<Tensor<T>> out;
  m.visit("", [&](const std::string&, Tensor<T>& t, bool tr) {
    if (tr) out.push_back(t);
  });
  return out;
}

template <typename T, typename Visitable>
void zero_all_grads(Visitable& m) {
  m.visit("", [](const std::string&, Tensor<T>& t, bool tr) {
    if (tr) t.zero_grad();
  });
}

template <typename T, typename Visitable>
void set_trainable(Visitable& m, bool on) {
  m.visit("", [on](const std::string&, Tensor<T>& t, bool tr) {
    if (tr) t.set_requires_grad(on);
  });
}

template <typename T, typename Visitable>
int64_t param_count(Visitable& m) {
  int64_t n = 0;
  m.visit("", [&](const std::string&, Tensor<T>& t, bool tr) {
    if (tr) n += t.numel();
  });
  return n;
}

}  // namespace ssllab
