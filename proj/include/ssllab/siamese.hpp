#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ssllab/backbones.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// Projection head p(.): three fully-connected layers d_f -> d -> d -> d with
// BatchNorm + relu after the first two. The output layer carries no BN by
// default; `bn_output` switches to the variant that normalizes it too
// (without an activation).
// ---------------------------------------------------------------------------

template <typename T>
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int64_t in_dim, int64_t dim, uint64_t seed,
                 bool bn_output = false)
      : dim_(dim),
        bn_output_(bn_output),
        fc1_(in_dim, dim, mix_seed(seed, 1), /*bias=*/false),
        bn1_(dim),
        fc2_(dim, dim, mix_seed(seed, 2), /*bias=*/false),
        bn2_(dim),
        fc3_(dim, dim, mix_seed(seed, 3), /*bias=*/!bn_output) {
    if (bn_output) bn3_ = BatchNorm<T>(dim);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto h = relu(bn1_.forward(fc1_.forward(x)));
    h = relu(bn2_.forward(fc2_.forward(h)));
    h = fc3_.forward(h);
    if (bn_output_) h = bn3_.forward(h);
    return h;
  }

  void set_mode(Mode m) {
    bn1_.set_mode(m);
    bn2_.set_mode(m);
    if (bn_output_) bn3_.set_mode(m);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1_.visit(prefix + ".fc1", fn);
    bn1_.visit(prefix + ".bn1", fn);
    fc2_.visit(prefix + ".fc2", fn);
    bn2_.visit(prefix + ".bn2", fn);
    fc3_.visit(prefix + ".fc3", fn);
    if (bn_output_) bn3_.visit(prefix + ".bn3", fn);
  }

  int64_t dim() const { return dim_; }
  Linear<T>& fc3() { return fc3_; }

 private:
  int64_t dim_ = 0;
  bool bn_output_ = false;
  Linear<T> fc1_;
  BatchNorm<T> bn1_;
  Linear<T> fc2_;
  BatchNorm<T> bn2_;
  Linear<T> fc3_;
  BatchNorm<T> bn3_;
};

// ---------------------------------------------------------------------------
// Prediction head h(.): bottleneck MLP d -> d/4 -> d, BN + relu after the
// hidden layer only. The bottleneck factor is fixed at 4, so d must divide.
// ---------------------------------------------------------------------------

template <typename T>
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(int64_t dim, uint64_t seed) : dim_(dim) {
    if (dim % 4 != 0)
      throw ConfigError("prediction head: dim " + std::to_string(dim) +
                        " not divisible by the bottleneck factor 4");
    fc1_ = Linear<T>(dim, dim / 4, mix_seed(seed, 1), /*bias=*/false);
    bn1_ = BatchNorm<T>(dim / 4);
    fc2_ = Linear<T>(dim / 4, dim, mix_seed(seed, 2), /*bias=*/true);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    return fc2_.forward(relu(bn1_.forward(fc1_.forward(x))));
  }

  void set_mode(Mode m) { bn1_.set_mode(m); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fc1_.visit(prefix + ".fc1", fn);
    bn1_.visit(prefix + ".bn1", fn);
    fc2_.visit(prefix + ".fc2", fn);
  }

  int64_t hidden_dim() const { return dim_ / 4; }
  Linear<T>& fc2() { return fc2_; }

 private:
  int64_t dim_ = 0;
  Linear<T> fc1_;
  BatchNorm<T> bn1_;
  Linear<T> fc2_;
};

// ---------------------------------------------------------------------------
// The siamese model: one backbone f, projection p, prediction h shared by
// both views.
// ---------------------------------------------------------------------------

struct SiameseConfig {
  BackboneConfig backbone;
  int64_t projection_dim = 256;
  bool projection_bn_output = false;
};

template <typename T>
class SiameseModel {
 public:
  SiameseModel(const SiameseConfig& cfg, uint64_t seed)
      : backbone_(build_backbone<T>(cfg.backbone, mix_seed(seed, 1))),
        projection_(backbone_->output_dim(), cfg.projection_dim,
                    mix_seed(seed, 2), cfg.projection_bn_output),
        prediction_(cfg.projection_dim, mix_seed(seed, 3)) {}

  Backbone<T>& backbone() { return *backbone_; }
  ProjectionHead<T>& projection() { return projection_; }
  PredictionHead<T>& prediction() { return prediction_; }

  void set_mode(Mode m) {
    backbone_->set_mode(m);
    projection_.set_mode(m);
    prediction_.set_mode(m);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    backbone_->visit(prefix + "backbone.", fn);
    projection_.visit(prefix + "projection", fn);
    prediction_.visit(prefix + "prediction", fn);
  }

  /// Projection output for one view (z before any stop-gradient).
  Tensor<T> project(const Tensor<T>& x) {
    return projection_.forward(backbone_->forward(x));
  }

 private:
  std::unique_ptr<Backbone<T>> backbone_;
  ProjectionHead<T> projection_;
  PredictionHead<T> prediction_;
};

template <typename T>
struct SiameseOutputs {
  Tensor<T> p1, p2, z1, z2;
};

/// Forward both views: p_i = h(p(f(x_i))), z_i = p(f(x_i)). The backbone and
/// projection run once per view; their output feeds the prediction head
/// through the graph while z_i is detached (stop-gradient), so backward
/// treats z_1, z_2 as constants. `stop_gradient=false` exposes the ablation
/// that collapses.
template <typename T>
SiameseOutputs<T> siamese_forward(SiameseModel<T>& model, const Tensor<T>& x1,
                                  const Tensor<T>& x2,
                                  bool stop_gradient = true) {
  if (x1.shape() != x2.shape())
    throw ShapeError("siamese_forward: view shapes differ, " +
                     shape_str(x1.shape()) + " vs " + shape_str(x2.shape()));
  auto proj1 = model.project(x1);
  auto proj2 = model.project(x2);
  SiameseOutputs<T> out;
  out.p1 = model.prediction().forward(proj1);
  out.p2 = model.prediction().forward(proj2);
  out.z1 = stop_gradient ? proj1.detach() : proj1;
  out.z2 = stop_gradient ? proj2.detach() : proj2;
  return out;
}

// ---------------------------------------------------------------------------
// Losses and monitors
// ---------------------------------------------------------------------------

/// Mean over the batch of the negative cosine similarity
/// -(x/|x|) . (y/|y|). Rows with norm below 1e-12 signal a representation
/// that collapsed to zero and raise DegenerateError. The per-row cosine is
/// clamped to [-1, 1] so accumulated rounding can never push the scalar loss
/// outside the mathematical bound.
template <typename T>
Tensor<T> negative_cosine_similarity(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.ndim() != 2 || x.shape() != y.shape())
    throw ShapeError("negative_cosine_similarity: expected matching [N,d], "
                     "got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  auto nx = sqrt_(sum(mul(x, x), {1}, true));
  auto ny = sqrt_(sum(mul(y, y), {1}, true));
  for (int64_t i = 0; i < x.dim(0); ++i) {
    const double a = static_cast<double>(nx.data()[static_cast<size_t>(i)]);
    const double b = static_cast<double>(ny.data()[static_cast<size_t>(i)]);
    if (a < 1e-12 || b < 1e-12)
      throw DegenerateError(
          "negative_cosine_similarity: zero-norm row " + std::to_string(i) +
          " (representation collapsed to the origin)");
  }
  auto dot = sum(mul(x, y), {1}, true);
  auto cos = clamp(div(dot, mul(nx, ny)), T(-1), T(1));
  return neg(mean(cos));
}

/// L = 0.5 * D(p1, z2) + 0.5 * D(p2, z1).
template <typename T>
Tensor<T> symmetric_loss(const Tensor<T>& p1, const Tensor<T>& p2,
                         const Tensor<T>& z1, const Tensor<T>& z2) {
  auto d1 = negative_cosine_similarity(p1, z2);
  auto d2 = negative_cosine_similarity(p2, z1);
  return add(scale(d1, T(0.5)), scale(d2, T(0.5)));
}

/// Collapse monitor: mean over dimensions of the per-dimension std of
/// l2-normalized rows. Healthy representations sit near 1/sqrt(d); collapse
/// drives it to 0. Pure value computation, no gradient involvement.
template <typename T>
double representation_std(const Tensor<T>& z) {
  if (z.ndim() != 2)
    throw ShapeError("representation_std: expected [N,d], got " +
                     shape_str(z.shape()));
  const int64_t n = z.dim(0), d = z.dim(1);
  if (n < 2)
    throw DegenerateError("representation_std: needs at least 2 rows, got " +
                          std::to_string(n));
  std::vector<double> normed(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(z.data()[static_cast<size_t>(i * d + j)]);
      norm += v * v;
    }
    norm = std::max(std::sqrt(norm), 1e-12);
    for (int64_t j = 0; j < d; ++j)
      normed[static_cast<size_t>(i * d + j)] =
          static_cast<double>(z.data()[static_cast<size_t>(i * d + j)]) / norm;
  }
  double acc = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += normed[static_cast<size_t>(i * d + j)];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double c = normed[static_cast<size_t>(i * d + j)] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    acc += std::sqrt(var);
  }
  return acc / static_cast<double>(d);
}

}  // namespace ssllab
