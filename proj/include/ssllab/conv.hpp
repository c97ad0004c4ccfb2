#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "ssllab/tensor.hpp"

namespace ssllab {

namespace detail {

struct ConvDims {
  int64_t n, c_in, h, w;
  int64_t c_out, kh, kw;
  int64_t stride, pad;
  int64_t h_out, w_out;
};

inline ConvDims conv_dims(const Shape& x, const Shape& wshape, int64_t stride,
                          int64_t pad) {
  if (x.size() != 4)
    throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x));
  if (wshape.size() != 4)
    throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " +
                     shape_str(wshape));
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  ConvDims d;
  d.n = x[0];
  d.c_in = x[1];
  d.h = x[2];
  d.w = x[3];
  d.c_out = wshape[0];
  d.kh = wshape[2];
  d.kw = wshape[3];
  if (wshape[1] != d.c_in)
    throw ShapeError("conv2d: weight expects " + std::to_string(wshape[1]) +
                     " input channels, input has " + std::to_string(d.c_in));
  d.stride = stride;
  d.pad = pad;
  d.h_out = (d.h + 2 * pad - d.kh) / stride + 1;
  d.w_out = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw ShapeError("conv2d: kernel " + std::to_string(d.kh) + "x" +
                     std::to_string(d.kw) + " larger than padded input " +
                     shape_str(x));
  return d;
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, h_out*w_out].
template <typename T>
void im2col(const T* img, const ConvDims& d, T* col) {
  const int64_t cols = d.h_out * d.w_out;
  for (int64_t c = 0; c < d.c_in; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        T* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        for (int64_t oy = 0; oy < d.h_out; ++oy) {
          const int64_t iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.h) {
            std::fill(row + oy * d.w_out, row + (oy + 1) * d.w_out, T(0));
            continue;
          }
          for (int64_t ox = 0; ox < d.w_out; ++ox) {
            const int64_t ix = ox * d.stride + kj - d.pad;
            row[oy * d.w_out + ox] =
                (ix < 0 || ix >= d.w) ? T(0) : img[(c * d.h + iy) * d.w + ix];
          }
        }
      }
    }
  }
}

/// Scatter-add columns back into an image (transpose of im2col).
template <typename T>
void col2im(const T* col, const ConvDims& d, T* img) {
  const int64_t cols = d.h_out * d.w_out;
  for (int64_t c = 0; c < d.c_in; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const T* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        for (int64_t oy = 0; oy < d.h_out; ++oy) {
          const int64_t iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          for (int64_t ox = 0; ox < d.w_out; ++ox) {
            const int64_t ix = ox * d.stride + kj - d.pad;
            if (ix < 0 || ix >= d.w) continue;
            img[(c * d.h + iy) * d.w + ix] += row[oy * d.w_out + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, NCHW layout, square stride/pad, im2col + GEMM inside.
/// Bias is optional (empty tensor skips it); shape [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t pad = 0) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad);
  const bool has_bias = bias.numel() > 0;
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != d.c_out))
    throw ShapeError("conv2d: bias must be [Cout], got " +
                     shape_str(bias.shape()));
  const int64_t krows = d.c_in * d.kh * d.kw;
  const int64_t cols = d.h_out * d.w_out;
  std::vector<T> out(static_cast<size_t>(d.n * d.c_out * cols), T(0));
  std::vector<T> col(static_cast<size_t>(krows * cols));
  for (int64_t i = 0; i < d.n; ++i) {
    detail::im2col(x.data().data() + i * d.c_in * d.h * d.w, d, col.data());
    // out_i [Cout, cols] = W [Cout, krows] * col [krows, cols]
    detail::gemm(false, false, d.c_out, cols, krows, T(1), w.data().data(),
                 krows, col.data(), cols, T(0), out.data() + i * d.c_out * cols,
                 cols);
    if (has_bias) {
      T* oi = out.data() + i * d.c_out * cols;
      for (int64_t c = 0; c < d.c_out; ++c) {
        const T b = bias.data()[static_cast<size_t>(c)];
        for (int64_t p = 0; p < cols; ++p) oi[c * cols + p] += b;
      }
    }
  }
  Tensor<T> result =
      Tensor<T>::make({d.n, d.c_out, d.h_out, d.w_out}, std::move(out));
  auto xi = x.impl(), wi = w.impl(), bi = bias.impl(), oi = result.impl();
  detail::record_op<T>("conv2d", {x, w, bias}, result,
                       [xi, wi, bi, oi, d, has_bias, krows, cols] {
    const auto& go = oi->grad;
    std::vector<T> col(static_cast<size_t>(krows * cols));
    std::vector<T> gw;
    if (wi->requires_grad) gw.assign(wi->data.size(), T(0));
    std::vector<T> gx;
    if (xi->requires_grad) gx.assign(xi->data.size(), T(0));
    std::vector<T> gcol;
    if (xi->requires_grad) gcol.assign(static_cast<size_t>(krows * cols), T(0));
    for (int64_t i = 0; i < d.n; ++i) {
      const T* goi = go.data() + i * d.c_out * cols;
      if (wi->requires_grad) {
        detail::im2col(xi->data.data() + i * d.c_in * d.h * d.w, d, col.data());
        // dW += dOut_i [Cout, cols] * col^T [cols, krows]
        detail::gemm(false, true, d.c_out, krows, cols, T(1), goi, cols,
                     col.data(), cols, T(1), gw.data(), krows);
      }
      if (xi->requires_grad) {
        // dCol = W^T [krows, Cout] * dOut_i [Cout, cols]
        detail::gemm(true, false, krows, cols, d.c_out, T(1), wi->data.data(),
                     krows, goi, cols, T(0), gcol.data(), cols);
        detail::col2im(gcol.data(), d, gx.data() + i * d.c_in * d.h * d.w);
      }
    }
    if (wi->requires_grad) detail::accumulate(wi, gw);
    if (xi->requires_grad) detail::accumulate(xi, gx);
    if (has_bias && bi->requires_grad) {
      std::vector<T> gb(static_cast<size_t>(d.c_out), T(0));
      for (int64_t i = 0; i < d.n; ++i)
        for (int64_t c = 0; c < d.c_out; ++c) {
          const T* row = go.data() + (i * d.c_out + c) * cols;
          T acc = T(0);
          for (int64_t p = 0; p < cols; ++p) acc += row[p];
          gb[static_cast<size_t>(c)] += acc;
        }
      detail::accumulate(bi, gb);
    }
  });
  return result;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 1,
                 int64_t pad = 0) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

enum class PoolKind { max, avg };

/// 2-D pooling, NCHW, window k, stride s (defaults to k), no padding.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, int64_t k, int64_t s = -1) {
  if (s < 0) s = k;
  const Shape& in = x.shape();
  if (in.size() != 4)
    throw ShapeError("pool2d: input must be [N,C,H,W], got " + shape_str(in));
  if (k < 1 || s < 1) throw ValueError("pool2d: window and stride must be >= 1");
  const int64_t n = in[0], c = in[1], h = in[2], w = in[3];
  if (h < k || w < k)
    throw ShapeError("pool2d: window " + std::to_string(k) +
                     " larger than input " + shape_str(in));
  const int64_t ho = (h - k) / s + 1;
  const int64_t wo = (w - k) / s + 1;
  std::vector<T> out(static_cast<size_t>(n * c * ho * wo));
  std::vector<int64_t> argmax;
  if (kind == PoolKind::max) argmax.resize(out.size());
  const auto& xv = x.data();
  for (int64_t i = 0; i < n * c; ++i) {
    const T* plane = xv.data() + i * h * w;
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        const int64_t y0 = oy * s, x0 = ox * s;
        const size_t op = static_cast<size_t>((i * ho + oy) * wo + ox);
        if (kind == PoolKind::max) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t arg = 0;
          for (int64_t dy = 0; dy < k; ++dy)
            for (int64_t dx = 0; dx < k; ++dx) {
              const int64_t p = (y0 + dy) * w + (x0 + dx);
              if (plane[p] > best) {
                best = plane[p];
                arg = p;
              }
            }
          out[op] = best;
          argmax[op] = i * h * w + arg;
        } else {
          T acc = T(0);
          for (int64_t dy = 0; dy < k; ++dy)
            for (int64_t dx = 0; dx < k; ++dx)
              acc += plane[(y0 + dy) * w + (x0 + dx)];
          out[op] = acc / static_cast<T>(k * k);
        }
      }
    }
  }
  Tensor<T> result = Tensor<T>::make({n, c, ho, wo}, std::move(out));
  auto xi = x.impl(), oi = result.impl();
  detail::record_op<T>("pool2d", {x}, result,
                       [xi, oi, kind, k, s, n, c, h, w, ho, wo, argmax] {
    if (!xi->requires_grad) return;
    const auto& go = oi->grad;
    std::vector<T> gx(xi->data.size(), T(0));
    if (kind == PoolKind::max) {
      for (size_t p = 0; p < go.size(); ++p)
        gx[static_cast<size_t>(argmax[p])] += go[p];
    } else {
      const T inv = T(1) / static_cast<T>(k * k);
      for (int64_t i = 0; i < n * c; ++i)
        for (int64_t oy = 0; oy < ho; ++oy)
          for (int64_t ox = 0; ox < wo; ++ox) {
            const T g = go[static_cast<size_t>((i * ho + oy) * wo + ox)] * inv;
            for (int64_t dy = 0; dy < k; ++dy)
              for (int64_t dx = 0; dx < k; ++dx)
                gx[static_cast<size_t>(i * h * w + (oy * s + dy) * w +
                                       (ox * s + dx))] += g;
          }
    }
    detail::accumulate(xi, gx);
  });
  return result;
}

/// Global average pool [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() != 4)
    throw ShapeError("global_avg_pool: input must be [N,C,H,W], got " +
                     shape_str(x.shape()));
  Tensor<T> m = mean(x, {2, 3}, false);
  return m;
}

}  // namespace ssllab
