#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ssllab/common.hpp"
#include "ssllab/data.hpp"
#include "ssllab/rng.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// AugmentationPolicy: the ordered stochastic transform chain producing the
// two views. Defaults follow the common simple-siamese recipe scaled to small
// images; every field is config-overridable.
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double jitter_brightness = 0.4;
  double jitter_contrast = 0.4;
  double jitter_saturation = 0.4;
  double jitter_hue = 0.1;
  double grayscale_p = 0.2;
  double blur_p = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  int64_t blur_kernel = 3;
  /// Clamp photometric results to the [0,1] pixel range before
  /// re-standardizing (keeps outputs inside the normalized range).
  bool clamp_output = true;
  uint64_t seed = 0;

  /// The no-op chain: full-frame crop, all probabilities zero.
  static AugmentationPolicy identity_policy() {
    AugmentationPolicy p;
    p.crop_scale_min = 1.0;
    p.crop_scale_max = 1.0;
    p.flip_p = 0.0;
    p.jitter_p = 0.0;
    p.grayscale_p = 0.0;
    p.blur_p = 0.0;
    return p;
  }

  static AugmentationPolicy default_policy(uint64_t seed) {
    AugmentationPolicy p;
    p.seed = seed;
    return p;
  }
};

namespace detail {

struct CropRect {
  int64_t y0 = 0, x0 = 0, h = 0, w = 0;
};

/// Random-resized-crop parameter draw: area scale uniform in
/// [scale_min, scale_max], aspect log-uniform in [3/4, 4/3], ten attempts,
/// full-frame fallback.
inline CropRect draw_crop(RandomStream& rs, int64_t h, int64_t w,
                          double scale_min, double scale_max) {
  CropRect full{0, 0, h, w};
  if (scale_min >= 1.0 && scale_max >= 1.0) return full;  // provable no-op
  const double area = static_cast<double>(h) * static_cast<double>(w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = rs.uniform(scale_min, scale_max) * area;
    const double log_r = rs.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_r);
    const auto cw = static_cast<int64_t>(std::lround(std::sqrt(target * ratio)));
    const auto ch = static_cast<int64_t>(std::lround(std::sqrt(target / ratio)));
    if (cw >= 1 && ch >= 1 && cw <= w && ch <= h) {
      const int64_t x0 = static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(w - cw + 1)));
      const int64_t y0 = static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(h - ch + 1)));
      return {y0, x0, ch, cw};
    }
  }
  return full;
}

/// Bilinear resample of a crop rect back to (out_h, out_w), half-pixel
/// centers, channel by channel. Standardization is per-channel affine, so
/// interpolating in standardized space is exact in real arithmetic.
template <typename T>
std::vector<T> crop_resize(const std::vector<T>& src, int64_t c_count,
                           int64_t h, int64_t w, const CropRect& r,
                           int64_t out_h, int64_t out_w) {
  std::vector<T> dst(static_cast<size_t>(c_count * out_h * out_w));
  const double sy = static_cast<double>(r.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(r.w) / static_cast<double>(out_w);
  for (int64_t dy = 0; dy < out_h; ++dy) {
    double fy = (static_cast<double>(dy) + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(r.h - 1));
    const auto y_lo = static_cast<int64_t>(std::floor(fy));
    const int64_t y_hi = std::min(y_lo + 1, r.h - 1);
    const double wy = fy - static_cast<double>(y_lo);
    for (int64_t dx = 0; dx < out_w; ++dx) {
      double fx = (static_cast<double>(dx) + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(r.w - 1));
      const auto x_lo = static_cast<int64_t>(std::floor(fx));
      const int64_t x_hi = std::min(x_lo + 1, r.w - 1);
      const double wx = fx - static_cast<double>(x_lo);
      for (int64_t c = 0; c < c_count; ++c) {
        auto at = [&](int64_t y, int64_t x) {
          return static_cast<double>(
              src[static_cast<size_t>(c * h * w + (r.y0 + y) * w + r.x0 + x)]);
        };
        const double v = (1.0 - wy) * ((1.0 - wx) * at(y_lo, x_lo) +
                                       wx * at(y_lo, x_hi)) +
                         wy * ((1.0 - wx) * at(y_hi, x_lo) + wx * at(y_hi, x_hi));
        dst[static_cast<size_t>(c * out_h * out_w + dy * out_w + dx)] =
            static_cast<T>(v);
      }
    }
  }
  return dst;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s,
                       double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0.0 ? 0.0 : d / mx;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g,
                       double& b) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const auto sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

template <typename T>
std::vector<double> luma(const std::vector<T>& u, int64_t c_count, int64_t hw) {
  std::vector<double> out(static_cast<size_t>(hw), 0.0);
  if (c_count == 3) {
    for (int64_t i = 0; i < hw; ++i)
      out[static_cast<size_t>(i)] =
          0.299 * static_cast<double>(u[static_cast<size_t>(i)]) +
          0.587 * static_cast<double>(u[static_cast<size_t>(hw + i)]) +
          0.114 * static_cast<double>(u[static_cast<size_t>(2 * hw + i)]);
  } else {
    for (int64_t c = 0; c < c_count; ++c)
      for (int64_t i = 0; i < hw; ++i)
        out[static_cast<size_t>(i)] +=
            static_cast<double>(u[static_cast<size_t>(c * hw + i)]) /
            static_cast<double>(c_count);
  }
  return out;
}

/// Separable gaussian blur with clamped edges (convex combination: output
/// stays within the input's value range).
template <typename T>
void gaussian_blur(std::vector<T>& v, int64_t c_count, int64_t h, int64_t w,
                   double sigma, int64_t k) {
  const int64_t half = k / 2;
  std::vector<double> weights(static_cast<size_t>(k));
  double total = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    const double d = static_cast<double>(i - half);
    weights[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += weights[static_cast<size_t>(i)];
  }
  for (auto& wv : weights) wv /= total;
  std::vector<T> tmp(v.size());
  for (int64_t c = 0; c < c_count; ++c) {
    const int64_t base = c * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          const int64_t xx = std::min(std::max<int64_t>(x + i - half, 0), w - 1);
          acc += weights[static_cast<size_t>(i)] *
                 static_cast<double>(v[static_cast<size_t>(base + y * w + xx)]);
        }
        tmp[static_cast<size_t>(base + y * w + x)] = static_cast<T>(acc);
      }
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          const int64_t yy = std::min(std::max<int64_t>(y + i - half, 0), h - 1);
          acc += weights[static_cast<size_t>(i)] *
                 static_cast<double>(tmp[static_cast<size_t>(base + yy * w + x)]);
        }
        v[static_cast<size_t>(base + y * w + x)] = static_cast<T>(acc);
      }
  }
}

}  // namespace detail

/// One stochastic view of `img` ([C,H,W], standardized with `stats`).
/// Deterministic in (policy.seed, index, view). Geometry runs in
/// standardized space; photometric transforms de-standardize to [0,1],
/// apply, clamp, and re-standardize.
template <typename T>
Tensor<T> apply_view(const Tensor<T>& img, const AugmentationPolicy& policy,
                     const ChannelStats& stats, uint64_t index, uint64_t view) {
  if (img.ndim() != 3)
    throw ShapeError("apply_view expects a [C,H,W] image, got " +
                     shape_str(img.shape()));
  const int64_t c_count = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (static_cast<int64_t>(stats.mean.size()) != c_count ||
      static_cast<int64_t>(stats.stddev.size()) != c_count)
    throw ValueError("apply_view: normalization constants must match channels");

  RandomStream rs(mix_seed(policy.seed, index, 0x51de0000ull + view));

  // draw all transform parameters up front, in a fixed order
  const detail::CropRect crop = detail::draw_crop(
      rs, h, w, policy.crop_scale_min, policy.crop_scale_max);
  const bool flip = rs.next_double() < policy.flip_p;
  const bool jitter = rs.next_double() < policy.jitter_p;
  const double fb = rs.uniform(std::max(0.0, 1.0 - policy.jitter_brightness),
                               1.0 + policy.jitter_brightness);
  const double fc = rs.uniform(std::max(0.0, 1.0 - policy.jitter_contrast),
                               1.0 + policy.jitter_contrast);
  const double fs = rs.uniform(std::max(0.0, 1.0 - policy.jitter_saturation),
                               1.0 + policy.jitter_saturation);
  const double fh = rs.uniform(-policy.jitter_hue, policy.jitter_hue);
  const bool grayscale = rs.next_double() < policy.grayscale_p;
  const bool blur = rs.next_double() < policy.blur_p;
  const double sigma = rs.uniform(policy.blur_sigma_min, policy.blur_sigma_max);

  std::vector<T> v = img.data();

  // geometry (standardization is per-channel affine, so these commute)
  const bool full_frame = crop.y0 == 0 && crop.x0 == 0 && crop.h == h && crop.w == w;
  if (!full_frame)
    v = detail::crop_resize(v, c_count, h, w, crop, h, w);
  if (flip) {
    std::vector<T> m(v.size());
    for (int64_t c = 0; c < c_count; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          m[static_cast<size_t>(c * h * w + y * w + x)] =
              v[static_cast<size_t>(c * h * w + y * w + (w - 1 - x))];
    v = std::move(m);
  }

  // photometric block in [0,1] pixel units
  if (jitter || grayscale) {
    const int64_t hw = h * w;
    std::vector<T> u(v.size());
    for (int64_t c = 0; c < c_count; ++c)
      for (int64_t i = 0; i < hw; ++i)
        u[static_cast<size_t>(c * hw + i)] = static_cast<T>(
            static_cast<double>(v[static_cast<size_t>(c * hw + i)]) *
                stats.stddev[static_cast<size_t>(c)] +
            stats.mean[static_cast<size_t>(c)]);

    if (jitter) {
      for (auto& px : u) px = static_cast<T>(static_cast<double>(px) * fb);
      auto lum = detail::luma(u, c_count, hw);
      double mean_l = 0.0;
      for (double l : lum) mean_l += l;
      mean_l /= static_cast<double>(hw);
      for (auto& px : u)
        px = static_cast<T>(fc * static_cast<double>(px) + (1.0 - fc) * mean_l);
      lum = detail::luma(u, c_count, hw);
      for (int64_t c = 0; c < c_count; ++c)
        for (int64_t i = 0; i < hw; ++i) {
          auto& px = u[static_cast<size_t>(c * hw + i)];
          px = static_cast<T>(fs * static_cast<double>(px) +
                              (1.0 - fs) * lum[static_cast<size_t>(i)]);
        }
      if (c_count == 3 && policy.jitter_hue > 0.0) {
        for (int64_t i = 0; i < hw; ++i) {
          double r = std::min(std::max(static_cast<double>(u[static_cast<size_t>(i)]), 0.0), 1.0);
          double g = std::min(std::max(static_cast<double>(u[static_cast<size_t>(hw + i)]), 0.0), 1.0);
          double b = std::min(std::max(static_cast<double>(u[static_cast<size_t>(2 * hw + i)]), 0.0), 1.0);
          double hh, ss, vv;
          detail::rgb_to_hsv(r, g, b, hh, ss, vv);
          detail::hsv_to_rgb(hh + fh, ss, vv, r, g, b);
          u[static_cast<size_t>(i)] = static_cast<T>(r);
          u[static_cast<size_t>(hw + i)] = static_cast<T>(g);
          u[static_cast<size_t>(2 * hw + i)] = static_cast<T>(b);
        }
      }
    }
    if (grayscale) {
      const auto lum = detail::luma(u, c_count, hw);
      for (int64_t c = 0; c < c_count; ++c)
        for (int64_t i = 0; i < hw; ++i)
          u[static_cast<size_t>(c * hw + i)] =
              static_cast<T>(lum[static_cast<size_t>(i)]);
    }
    if (policy.clamp_output)
      for (auto& px : u)
        px = static_cast<T>(
            std::min(std::max(static_cast<double>(px), 0.0), 1.0));
    for (int64_t c = 0; c < c_count; ++c)
      for (int64_t i = 0; i < hw; ++i)
        v[static_cast<size_t>(c * hw + i)] = static_cast<T>(
            (static_cast<double>(u[static_cast<size_t>(c * hw + i)]) -
             stats.mean[static_cast<size_t>(c)]) /
            stats.stddev[static_cast<size_t>(c)]);
  }

  // blur is a convex combination, safe in standardized space
  if (blur) {
    if (policy.blur_kernel < 1 || policy.blur_kernel % 2 == 0)
      throw ConfigError("blur kernel must be odd and positive");
    detail::gaussian_blur(v, c_count, h, w, sigma, policy.blur_kernel);
  }

  return Tensor<T>::from_values(img.shape(), v);
}

/// The two stochastic views of one image.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_views(const Tensor<T>& img,
                                           const AugmentationPolicy& policy,
                                           const ChannelStats& stats,
                                           uint64_t index) {
  return {apply_view(img, policy, stats, index, 0),
          apply_view(img, policy, stats, index, 1)};
}

/// Identity-normalization constants (images already in pixel units).
inline ChannelStats unit_stats(int64_t channels) {
  ChannelStats st;
  st.mean.assign(static_cast<size_t>(channels), 0.0);
  st.stddev.assign(static_cast<size_t>(channels), 1.0);
  return st;
}

}  // namespace ssllab
