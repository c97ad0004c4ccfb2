#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "ssllab/blas.hpp"
#include "ssllab/common.hpp"
#include "ssllab/rng.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// Grad mode. Recording can be disabled globally (per thread) for eval passes
// and for the inner forwards of finite-difference checks.
// ---------------------------------------------------------------------------

inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor storage + tape handles
// ---------------------------------------------------------------------------

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same length as data once present
  bool requires_grad = false;
  bool leaf = true;          // true unless produced by a recorded op
  int64_t node = -1;         // index into the tape that produced this tensor
  uint64_t epoch = 0;        // tape epoch the node index refers to

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor;

// Per-thread tape of recorded operations. Nodes are appended in forward
// order, so the append order is already a topological order; backward walks
// it in reverse. backward() consumes the tape unless asked to retain it.
template <typename T>
class Graph {
 public:
  struct Node {
    const char* op;
    std::vector<int64_t> input_nodes;          // producer node ids (same epoch)
    std::shared_ptr<TensorImpl<T>> out;
    std::function<void()> backward;
  };

  static Graph& active() {
    thread_local Graph g;
    return g;
  }

  uint64_t epoch() const { return epoch_; }
  size_t size() const { return nodes_.size(); }
  std::vector<Node>& nodes() { return nodes_; }

  int64_t record(const char* op, std::vector<int64_t> input_nodes,
                 std::shared_ptr<TensorImpl<T>> out,
                 std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(input_nodes), std::move(out),
                          std::move(backward)});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  void clear() {
    nodes_.clear();
    ++epoch_;
  }

 private:
  std::vector<Node> nodes_;
  uint64_t epoch_ = 1;
};

// ---------------------------------------------------------------------------
// Tensor: shared handle over a row-major contiguous buffer participating in
// the reverse-mode tape. fp32 is the training dtype, fp64 the checking one.
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  static Tensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  /// Internal constructor for op results; asserts the core shape invariant.
  static Tensor make(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ValueError("tensor: element count " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  // -- creation -------------------------------------------------------------

  static Tensor zeros(const Shape& shape) {
    check_shape_valid(shape, "zeros");
    return make(shape, std::vector<T>(static_cast<size_t>(shape_numel(shape)), T(0)));
  }

  static Tensor ones(const Shape& shape) { return full(shape, T(1)); }

  static Tensor full(const Shape& shape, T value) {
    check_shape_valid(shape, "full");
    return make(shape, std::vector<T>(static_cast<size_t>(shape_numel(shape)), value));
  }

  static Tensor from_values(const Shape& shape, std::vector<T> values) {
    check_shape_valid(shape, "from_values");
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ValueError("from_values: got " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    return make(shape, std::move(values));
  }

  static Tensor scalar(T value) { return make({}, std::vector<T>{value}); }

  static Tensor gaussian(const Shape& shape, double mean, double std,
                         uint64_t seed) {
    check_shape_valid(shape, "gaussian");
    RandomStream rs(mix_seed(seed, 0x9a55ull));
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rs.gaussian(mean, std));
    return make(shape, std::move(v));
  }

  static Tensor uniform(const Shape& shape, double lo, double hi,
                        uint64_t seed) {
    check_shape_valid(shape, "uniform");
    RandomStream rs(mix_seed(seed, 0x04f2ull));
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rs.uniform(lo, hi));
    return make(shape, std::move(v));
  }

  static Tensor trunc_normal(const Shape& shape, double std, uint64_t seed) {
    check_shape_valid(shape, "trunc_normal");
    RandomStream rs(mix_seed(seed, 0x7a0cull));
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rs.trunc_gaussian(std));
    return make(shape, std::move(v));
  }

  // -- accessors ------------------------------------------------------------

  const Shape& shape() const { return impl_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  const std::vector<T>& grad() const { return impl_->grad; }
  std::vector<T>& mutable_grad() { return impl_->grad; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }

  Tensor& set_requires_grad(bool v) {
    if (v && !impl_->leaf)
      throw LifecycleError("set_requires_grad: only leaf tensors may be marked");
    impl_->requires_grad = v;
    return *this;
  }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
  }

  /// Deep copy of values; result is a fresh leaf with no grad.
  Tensor clone() const {
    Tensor t = make(impl_->shape, impl_->data);
    return t;
  }

  /// Same values, cut out of the autodiff graph (stop-gradient).
  Tensor detach() const { return clone(); }

  void zero_grad() {
    if (!impl_->grad.empty())
      std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Recording helper
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
bool tracked(const std::shared_ptr<TensorImpl<T>>& impl, uint64_t epoch) {
  return impl->node >= 0 && impl->epoch == epoch;
}

/// Accumulate `g` into the grad buffer of `t` if it participates in autodiff.
template <typename T>
void accumulate(const std::shared_ptr<TensorImpl<T>>& t, const std::vector<T>& g) {
  if (!t->requires_grad) return;
  t->ensure_grad();
  const size_t n = t->data.size();
  for (size_t i = 0; i < n; ++i) t->grad[i] += g[i];
}

/// Record `out` as the result of `op` over `inputs` with backward `bw`.
/// No-op when grad mode is off or no input requires grad.
template <typename T>
void record_op(const char* op, std::initializer_list<Tensor<T>> inputs,
               Tensor<T>& out, std::function<void()> bw) {
  if (!grad_mode_enabled()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  auto& g = Graph<T>::active();
  std::vector<int64_t> producer_ids;
  for (const auto& in : inputs)
    if (tracked(in.impl(), g.epoch())) producer_ids.push_back(in.impl()->node);
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->leaf = false;
  impl->epoch = g.epoch();
  impl->node = g.record(op, std::move(producer_ids), impl, std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse pass from a scalar loss. Gradients are accumulated (+=) into every
/// reachable leaf that requires grad; calling again on a retained graph adds
/// another copy (the gradient-accumulation mechanism). By default the tape is
/// consumed; a second backward over a consumed tape is a lifecycle error.
template <typename T>
void backward(const Tensor<T>& loss, bool retain_graph = false) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));
  auto impl = loss.impl();
  if (!impl->requires_grad) return;  // constant loss: all gradients are zero
  if (impl->leaf) {
    impl->ensure_grad();
    impl->grad[0] += T(1);
    return;
  }
  auto& g = Graph<T>::active();
  if (!detail::tracked(impl, g.epoch()))
    throw LifecycleError("backward: graph already consumed (forward again or "
                         "pass retain_graph)");
  auto& nodes = g.nodes();
  const int64_t start = impl->node;
  std::vector<char> needed(static_cast<size_t>(start) + 1, 0);
  needed[static_cast<size_t>(start)] = 1;
  for (int64_t i = start; i >= 0; --i) {
    if (!needed[static_cast<size_t>(i)]) continue;
    for (int64_t j : nodes[static_cast<size_t>(i)].input_nodes)
      needed[static_cast<size_t>(j)] = 1;
  }
  // Interior grads belong to this traversal only; zero them before seeding so
  // a retained graph can be walked repeatedly while leaves keep accumulating.
  for (int64_t i = 0; i <= start; ++i) {
    if (!needed[static_cast<size_t>(i)]) continue;
    auto& out = nodes[static_cast<size_t>(i)].out;
    out->grad.assign(out->data.size(), T(0));
  }
  impl->grad[0] = T(1);
  for (int64_t i = start; i >= 0; --i)
    if (needed[static_cast<size_t>(i)]) nodes[static_cast<size_t>(i)].backward();
  if (!retain_graph) g.clear();
}

// ---------------------------------------------------------------------------
// Broadcasting (size-1 axes only, trailing-aligned)
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

/// Strides of `s` viewed as shape `out` (rank-padded, 0 on broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto own = contiguous_strides(s);
  std::vector<int64_t> st(out.size(), 0);
  const size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i)
    st[off + i] = s[i] == 1 ? 0 : own[i];
  return st;
}

/// Apply fn(out_linear_index, a_index, b_index) over the broadcast volume.
template <typename Fn>
void broadcast_iter(const Shape& out, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t n = shape_numel(out);
  const size_t r = out.size();
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    fn(lin, ia, ib);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

/// Sum-reduce a gradient of shape `from` down to shape `to` (inverse of
/// broadcasting `to` up to `from`).
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& from,
                               const Shape& to) {
  std::vector<T> out(static_cast<size_t>(shape_numel(to)), T(0));
  auto st = broadcast_strides(to, from);
  const size_t r = from.size();
  std::vector<int64_t> idx(r, 0);
  int64_t it = 0;
  const int64_t n = shape_numel(from);
  for (int64_t lin = 0; lin < n; ++lin) {
    out[static_cast<size_t>(it)] += g[static_cast<size_t>(lin)];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      it += st[d];
      if (idx[d] < from[d]) break;
      it -= st[d] * from[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

// dfa(go, a, b) = contribution to dL/da given upstream go and input values.
template <typename T, typename Fwd, typename Dfa, typename Dfb>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    Fwd fwd, Dfa dfa, Dfb dfb) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    broadcast_iter(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      out[static_cast<size_t>(o)] =
          fwd(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)]);
    });
  }
  Tensor<T> result = Tensor<T>::make(out_shape, std::move(out));
  auto ai = a.impl(), bi = b.impl(), oi = result.impl();
  detail::record_op<T>(name, {a, b}, result, [ai, bi, oi, dfa, dfb, out_shape] {
    const auto& go = oi->grad;
    const bool same_a = ai->shape == out_shape;
    const bool same_b = bi->shape == out_shape;
    if (ai->requires_grad) {
      std::vector<T> ga(go.size());
      if (same_a && same_b) {
        for (size_t i = 0; i < go.size(); ++i)
          ga[i] = dfa(go[i], ai->data[i], bi->data[i]);
      } else {
        auto sa = broadcast_strides(ai->shape, out_shape);
        auto sb = broadcast_strides(bi->shape, out_shape);
        broadcast_iter(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          ga[static_cast<size_t>(o)] =
              dfa(go[static_cast<size_t>(o)], ai->data[static_cast<size_t>(ia)],
                  bi->data[static_cast<size_t>(ib)]);
        });
      }
      if (same_a) {
        accumulate(ai, ga);
      } else {
        accumulate(ai, reduce_to_shape(ga, out_shape, ai->shape));
      }
    }
    if (bi->requires_grad) {
      std::vector<T> gb(go.size());
      if (same_a && same_b) {
        for (size_t i = 0; i < go.size(); ++i)
          gb[i] = dfb(go[i], ai->data[i], bi->data[i]);
      } else {
        auto sa = broadcast_strides(ai->shape, out_shape);
        auto sb = broadcast_strides(bi->shape, out_shape);
        broadcast_iter(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          gb[static_cast<size_t>(o)] =
              dfb(go[static_cast<size_t>(o)], ai->data[static_cast<size_t>(ia)],
                  bi->data[static_cast<size_t>(ib)]);
        });
      }
      if (same_b) {
        accumulate(bi, gb);
      } else {
        accumulate(bi, reduce_to_shape(gb, out_shape, bi->shape));
      }
    }
  });
  return result;
}

template <typename T, typename Fwd, typename Df>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Df df) {
  std::vector<T> out(x.data().size());
  const auto& xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tensor<T> result = Tensor<T>::make(x.shape(), std::move(out));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>(name, {x}, result, [xi, oi, df] {
    if (!xi->requires_grad) return;
    const auto& go = oi->grad;
    std::vector<T> gx(go.size());
    for (size_t i = 0; i < go.size(); ++i)
      gx[i] = df(go[i], xi->data[i], oi->data[i]);
    accumulate(xi, gx);
  });
  return result;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "neg", x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T alpha) {
  return detail::unary_op<T>(
      "scale", x, [alpha](T v) { return alpha * v; },
      [alpha](T g, T, T) { return alpha * g; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op<T>(
      "add_scalar", x, [c](T v) { return v + c; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

namespace detail {
// tanh approximation of GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;
}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using detail::kGeluC0;
  using detail::kGeluC1;
  return detail::unary_op<T>(
      "gelu", x,
      [](T v) {
        const double xv = static_cast<double>(v);
        const double u = kGeluC0 * (xv + kGeluC1 * xv * xv * xv);
        return static_cast<T>(0.5 * xv * (1.0 + std::tanh(u)));
      },
      [](T g, T v, T) {
        const double xv = static_cast<double>(v);
        const double u = kGeluC0 * (xv + kGeluC1 * xv * xv * xv);
        const double t = std::tanh(u);
        const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * xv * xv);
        const double d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
        return static_cast<T>(static_cast<double>(g) * d);
      });
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); },
      [](T g, T, T o) { return g * o; });
}

template <typename T>
Tensor<T> log_(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "log", x, [](T v) { return std::log(v); },
      [](T g, T v, T) { return g / v; });
}

template <typename T>
Tensor<T> sqrt_(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T g, T, T o) { return g / (T(2) * o); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "square", x, [](T v) { return v * v; },
      [](T g, T v, T) { return T(2) * g * v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sigmoid", x,
      [](T v) {
        // split on sign to avoid overflow in exp
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T g, T, T o) { return g * o * (T(1) - o); });
}

/// Hard clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary_op<T>(
      "clamp", x,
      [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T g, T v, T) { return (v > lo && v < hi) ? g : T(0); });
}

// operator sugar
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int64_t> normalize_axes(const Shape& shape,
                                           std::vector<int64_t> axes,
                                           const char* op) {
  const int64_t r = static_cast<int64_t>(shape.size());
  for (auto& a : axes) {
    if (a < 0) a += r;
    if (a < 0 || a >= r)
      throw ShapeError(std::string(op) + ": axis out of range for " +
                       shape_str(shape));
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  return axes;
}

inline Shape reduced_shape(const Shape& shape, const std::vector<int64_t>& axes,
                           bool keepdim) {
  Shape out;
  size_t k = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(shape.size()); ++i) {
    const bool hit = k < axes.size() && axes[k] == i;
    if (hit) {
      ++k;
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(shape[static_cast<size_t>(i)]);
    }
  }
  return out;
}

}  // namespace detail

/// Sum over `axes` (all axes when empty). keepdim keeps size-1 axes so the
/// result broadcasts back against the input.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<int64_t> axes = {},
              bool keepdim = false) {
  const Shape& in = x.shape();
  if (axes.empty()) {
    axes.resize(in.size());
    for (size_t i = 0; i < in.size(); ++i) axes[i] = static_cast<int64_t>(i);
  }
  axes = detail::normalize_axes(in, std::move(axes), "sum");
  const Shape out_shape = detail::reduced_shape(in, axes, keepdim);
  // keepdim-shape used for index math regardless of the requested output
  const Shape keep_shape = detail::reduced_shape(in, axes, true);
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)), T(0));
  auto st = detail::broadcast_strides(keep_shape, in);
  {
    const auto& xv = x.data();
    const size_t r = in.size();
    std::vector<int64_t> idx(r, 0);
    int64_t io = 0;
    const int64_t n = shape_numel(in);
    for (int64_t lin = 0; lin < n; ++lin) {
      out[static_cast<size_t>(io)] += xv[static_cast<size_t>(lin)];
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        io += st[d];
        if (idx[d] < in[d]) break;
        io -= st[d] * in[d];
        idx[d] = 0;
      }
    }
  }
  Tensor<T> result = Tensor<T>::make(out_shape, std::move(out));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("sum", {x}, result, [xi, oi, st, in] {
    if (!xi->requires_grad) return;
    const auto& go = oi->grad;
    std::vector<T> gx(xi->data.size());
    const size_t r = in.size();
    std::vector<int64_t> idx(r, 0);
    int64_t io = 0;
    const int64_t n = shape_numel(in);
    for (int64_t lin = 0; lin < n; ++lin) {
      gx[static_cast<size_t>(lin)] = go[static_cast<size_t>(io)];
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        io += st[d];
        if (idx[d] < in[d]) break;
        io -= st[d] * in[d];
        idx[d] = 0;
      }
    }
    detail::accumulate(xi, gx);
  });
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<int64_t> axes = {},
               bool keepdim = false) {
  const int64_t total = x.numel();
  Tensor<T> s = sum(x, axes, keepdim);
  const int64_t kept = s.numel();
  const T inv = static_cast<T>(1.0 / static_cast<double>(total / kept));
  return scale(s, inv);
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  int64_t infer = -1;
  int64_t prod = 1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 dimension");
      infer = static_cast<int64_t>(i);
    } else {
      prod *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (prod == 0 || x.numel() % prod != 0)
      throw ShapeError("reshape: cannot infer dimension for " +
                       shape_str(x.shape()) + " -> " + shape_str(new_shape));
    new_shape[static_cast<size_t>(infer)] = x.numel() / prod;
    prod *= new_shape[static_cast<size_t>(infer)];
  }
  if (prod != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " has " +
                     std::to_string(x.numel()) + " elements, target " +
                     shape_str(new_shape));
  Tensor<T> result = Tensor<T>::make(new_shape, x.data());
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("reshape", {x}, result, [xi, oi] {
    detail::accumulate(xi, oi->grad);
  });
  return result;
}

/// Permutation of axes with an explicit copy (row-major relayout).
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& dims) {
  const Shape& in = x.shape();
  const size_t r = in.size();
  if (dims.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<char> seen(r, 0);
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t d = dims[i];
    if (d < 0 || d >= static_cast<int64_t>(r) || seen[static_cast<size_t>(d)])
      throw ShapeError("permute: invalid axis list");
    seen[static_cast<size_t>(d)] = 1;
    out_shape[i] = in[static_cast<size_t>(d)];
  }
  auto in_strides = detail::contiguous_strides(in);
  std::vector<int64_t> gather(r);  // stride in input for each output axis
  for (size_t i = 0; i < r; ++i) gather[i] = in_strides[static_cast<size_t>(dims[i])];

  auto apply = [&](const std::vector<T>& src) {
    std::vector<T> dst(src.size());
    std::vector<int64_t> idx(r, 0);
    int64_t is = 0;
    const int64_t n = static_cast<int64_t>(src.size());
    for (int64_t lin = 0; lin < n; ++lin) {
      dst[static_cast<size_t>(lin)] = src[static_cast<size_t>(is)];
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        is += gather[d];
        if (idx[d] < out_shape[d]) break;
        is -= gather[d] * out_shape[d];
        idx[d] = 0;
      }
    }
    return dst;
  };

  Tensor<T> result = Tensor<T>::make(out_shape, apply(x.data()));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("permute", {x}, result, [xi, oi, gather, out_shape, r] {
    if (!xi->requires_grad) return;
    std::vector<T> gx(xi->data.size(), T(0));
    const auto& go = oi->grad;
    std::vector<int64_t> idx(r, 0);
    int64_t is = 0;
    const int64_t n = static_cast<int64_t>(go.size());
    for (int64_t lin = 0; lin < n; ++lin) {
      gx[static_cast<size_t>(is)] += go[static_cast<size_t>(lin)];
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        is += gather[d];
        if (idx[d] < out_shape[d]) break;
        is -= gather[d] * out_shape[d];
        idx[d] = 0;
      }
    }
    detail::accumulate(xi, gx);
  });
  return result;
}

/// Contiguous sub-range [start, start+len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int64_t axis, int64_t start, int64_t len) {
  const Shape& in = x.shape();
  const int64_t r = static_cast<int64_t>(in.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  const int64_t d = in[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > d)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds axis of size " +
                     std::to_string(d));
  Shape out_shape = in;
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= in[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= in[static_cast<size_t>(i)];
  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const auto& xv = x.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                xv.data() + (o * d + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  Tensor<T> result = Tensor<T>::make(out_shape, std::move(out));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("slice", {x}, result,
                       [xi, oi, outer, inner, len, d, start] {
    if (!xi->requires_grad) return;
    std::vector<T> gx(xi->data.size(), T(0));
    const auto& go = oi->grad;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len * inner; ++j)
        gx[static_cast<size_t>((o * d + start) * inner + j)] =
            go[static_cast<size_t>(o * len * inner + j)];
    detail::accumulate(xi, gx);
  });
  return result;
}

/// Concatenate along `axis`; all other dimensions must match.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int64_t r = static_cast<int64_t>(first.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  int64_t cat = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int64_t>(s.size()) != r)
      throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < r; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != first[static_cast<size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " +
                         shape_str(s));
    cat += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = first;
  out_shape[static_cast<size_t>(axis)] = cat;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= first[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= first[static_cast<size_t>(i)];
  std::vector<T> out(static_cast<size_t>(outer * cat * inner));
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t len = p.dim(axis);
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * cat + off) * inner,
                  pv.data() + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(T));
    off += len;
  }
  Tensor<T> result = Tensor<T>::make(out_shape, std::move(out));
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    lens.push_back(p.dim(axis));
  }
  // record_op wants a fixed initializer_list; register manually for variadic
  // inputs.
  if (grad_mode_enabled()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      auto& g = Graph<T>::active();
      std::vector<int64_t> producer_ids;
      for (const auto& p : parts)
        if (detail::tracked(p.impl(), g.epoch()))
          producer_ids.push_back(p.impl()->node);
      auto oi = result.impl();
      oi->requires_grad = true;
      oi->leaf = false;
      oi->epoch = g.epoch();
      oi->node = g.record("concat", std::move(producer_ids), oi,
                          [impls, lens, oi, outer, inner, cat] {
        const auto& go = oi->grad;
        int64_t off2 = 0;
        for (size_t k = 0; k < impls.size(); ++k) {
          const int64_t len = lens[k];
          if (impls[k]->requires_grad) {
            std::vector<T> gp(static_cast<size_t>(outer * len * inner));
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t j = 0; j < len * inner; ++j)
                gp[static_cast<size_t>(o * len * inner + j)] =
                    go[static_cast<size_t>((o * cat + off2) * inner + j)];
            detail::accumulate(impls[k], gp);
          }
          off2 += len;
        }
      });
    }
  }
  return result;
}

/// Materialized broadcast of `x` up to `target` (size-1 axes expand).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target) {
  const Shape check = detail::broadcast_shape(x.shape(), target, "broadcast_to");
  if (check != target)
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) +
                     " does not broadcast to " + shape_str(target));
  std::vector<T> out(static_cast<size_t>(shape_numel(target)));
  auto sx = detail::broadcast_strides(x.shape(), target);
  auto sz = std::vector<int64_t>(target.size(), 0);
  const auto& xv = x.data();
  detail::broadcast_iter(target, sx, sz, [&](int64_t o, int64_t ix, int64_t) {
    out[static_cast<size_t>(o)] = xv[static_cast<size_t>(ix)];
  });
  Tensor<T> result = Tensor<T>::make(target, std::move(out));
  auto xi = x.impl(), oi = result.impl();
  Shape from = target;
  detail::record_op<T>("broadcast_to", {x}, result, [xi, oi, from] {
    if (!xi->requires_grad) return;
    detail::accumulate(xi, detail::reduce_to_shape(oi->grad, from, xi->shape));
  });
  return result;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  detail::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(),
               n, T(0), out.data(), n);
  Tensor<T> result = Tensor<T>::make({m, n}, std::move(out));
  auto ai = a.impl(), bi = b.impl(), oi = result.impl();
  detail::record_op<T>("matmul", {a, b}, result, [ai, bi, oi, m, n, k] {
    const auto& go = oi->grad;
    if (ai->requires_grad) {
      std::vector<T> ga(static_cast<size_t>(m * k), T(0));
      // dA = dC * B^T
      detail::gemm(false, true, m, k, n, T(1), go.data(), n, bi->data.data(), n,
                   T(0), ga.data(), k);
      detail::accumulate(ai, ga);
    }
    if (bi->requires_grad) {
      std::vector<T> gb(static_cast<size_t>(k * n), T(0));
      // dB = A^T * dC
      detail::gemm(true, false, k, n, m, T(1), ai->data.data(), k, go.data(), n,
                   T(0), gb.data(), n);
      detail::accumulate(bi, gb);
    }
  });
  return result;
}

/// Batched matmul over matching leading dimension: [B,m,k] x [B,k,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: expects [B,m,k] x [B,k,n], got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(1) != k)
    throw ShapeError("bmm: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(bsz * m * n), T(0));
  for (int64_t i = 0; i < bsz; ++i)
    detail::gemm(false, false, m, n, k, T(1), a.data().data() + i * m * k, k,
                 b.data().data() + i * k * n, n, T(0), out.data() + i * m * n, n);
  Tensor<T> result = Tensor<T>::make({bsz, m, n}, std::move(out));
  auto ai = a.impl(), bi = b.impl(), oi = result.impl();
  detail::record_op<T>("bmm", {a, b}, result, [ai, bi, oi, bsz, m, n, k] {
    const auto& go = oi->grad;
    if (ai->requires_grad) {
      std::vector<T> ga(ai->data.size(), T(0));
      for (int64_t i = 0; i < bsz; ++i)
        detail::gemm(false, true, m, k, n, T(1), go.data() + i * m * n, n,
                     bi->data.data() + i * k * n, n, T(0), ga.data() + i * m * k,
                     k);
      detail::accumulate(ai, ga);
    }
    if (bi->requires_grad) {
      std::vector<T> gb(bi->data.size(), T(0));
      for (int64_t i = 0; i < bsz; ++i)
        detail::gemm(true, false, k, n, m, T(1), ai->data.data() + i * m * k, k,
                     go.data() + i * m * n, n, T(0), gb.data() + i * k * n, n);
      detail::accumulate(bi, gb);
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Softmax (max-subtracted, numerically stable)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis = -1) {
  const Shape& in = x.shape();
  const int64_t r = static_cast<int64_t>(in.size());
  if (r == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  const int64_t d = in[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= in[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= in[static_cast<size_t>(i)];
  std::vector<T> out(x.data().size());
  const auto& xv = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < inner; ++j) {
      const int64_t base = o * d * inner + j;
      T mx = xv[static_cast<size_t>(base)];
      for (int64_t i = 1; i < d; ++i)
        mx = std::max(mx, xv[static_cast<size_t>(base + i * inner)]);
      T z = T(0);
      for (int64_t i = 0; i < d; ++i) {
        const T e = std::exp(xv[static_cast<size_t>(base + i * inner)] - mx);
        out[static_cast<size_t>(base + i * inner)] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (int64_t i = 0; i < d; ++i)
        out[static_cast<size_t>(base + i * inner)] *= invz;
    }
  }
  Tensor<T> result = Tensor<T>::make(in, std::move(out));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("softmax", {x}, result, [xi, oi, outer, inner, d] {
    if (!xi->requires_grad) return;
    const auto& go = oi->grad;
    const auto& y = oi->data;
    std::vector<T> gx(go.size());
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t j = 0; j < inner; ++j) {
        const int64_t base = o * d * inner + j;
        T dot = T(0);
        for (int64_t i = 0; i < d; ++i) {
          const size_t p = static_cast<size_t>(base + i * inner);
          dot += go[p] * y[p];
        }
        for (int64_t i = 0; i < d; ++i) {
          const size_t p = static_cast<size_t>(base + i * inner);
          gx[p] = y[p] * (go[p] - dot);
        }
      }
    }
    detail::accumulate(xi, gx);
  });
  return result;
}

}  // namespace ssllab
