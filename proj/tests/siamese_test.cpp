#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "ssllab/grad_check.hpp"
#include "ssllab/siamese.hpp"

using ssllab::BackboneConfig;
using ssllab::ConfigError;
using ssllab::DegenerateError;
using ssllab::Mode;
using ssllab::NoGradGuard;
using ssllab::PredictionHead;
using ssllab::ProjectionHead;
using ssllab::Shape;
using ssllab::ShapeError;
using ssllab::SiameseConfig;
using ssllab::SiameseModel;
using ssllab::Tensor;
using ssllab::concat;
using ssllab::negative_cosine_similarity;
using ssllab::representation_std;
using ssllab::siamese_forward;
using ssllab::symmetric_loss;

namespace {

SiameseConfig tiny_config() {
  SiameseConfig cfg;
  cfg.backbone.family = "resnet_small";
  cfg.backbone.in_h = 8;
  cfg.backbone.in_w = 8;
  cfg.backbone.depth = 1;
  cfg.backbone.width_multiplier = 0.0625;
  cfg.projection_dim = 8;
  return cfg;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> trainable_grads(
    SiameseModel<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  model.visit("m", [&](const std::string& n, Tensor<T>& t, bool tr) {
    if (tr) out.emplace_back(n, t);
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// negative cosine similarity
// ---------------------------------------------------------------------------

TEST(NegativeCosine, SelfSimilarityIsMinusOne) {
  auto v = Tensor<float>::gaussian({4, 16}, 0.0, 1.0, 1);
  double d = negative_cosine_similarity(v, v).item();
  EXPECT_NEAR(d, -1.0, 1e-6);
  EXPECT_GE(d, -1.0);  // clamp guarantees the bound exactly
}

TEST(NegativeCosine, OrthogonalVectorsGiveZero) {
  auto x = Tensor<float>::from_values({1, 2}, {1, 0});
  auto y = Tensor<float>::from_values({1, 2}, {0, 1});
  EXPECT_NEAR(negative_cosine_similarity(x, y).item(), 0.0, 1e-7);
}

TEST(NegativeCosine, WorkedExample) {
  auto x = Tensor<float>::from_values({1, 2}, {3, 4});
  auto y = Tensor<float>::from_values({1, 2}, {4, 3});
  EXPECT_NEAR(negative_cosine_similarity(x, y).item(), -24.0 / 25.0, 1e-6);
}

TEST(NegativeCosine, ScaleInvariance) {
  auto x = Tensor<double>::gaussian({8, 32}, 0.0, 1.0, 2);
  auto y = Tensor<double>::gaussian({8, 32}, 0.0, 1.0, 3);
  const double base = negative_cosine_similarity(x, y).item();
  const double scaled =
      negative_cosine_similarity(scale(x, 3.7), scale(y, 0.25)).item();
  EXPECT_NEAR(scaled, base, 1e-6);
}

TEST(NegativeCosine, ZeroRowRejected) {
  auto x = Tensor<float>::zeros({2, 4});
  x.data()[0] = 1.f;  // first row fine, second row all zero
  auto y = Tensor<float>::gaussian({2, 4}, 0.0, 1.0, 4);
  EXPECT_THROW(negative_cosine_similarity(x, y), DegenerateError);
}

TEST(NegativeCosine, ShapeMismatchRejected) {
  EXPECT_THROW(negative_cosine_similarity(Tensor<float>::zeros({2, 4}),
                                          Tensor<float>::zeros({2, 5})),
               ShapeError);
  EXPECT_THROW(negative_cosine_similarity(Tensor<float>::ones({4}),
                                          Tensor<float>::ones({4})),
               ShapeError);
}

TEST(NegativeCosine, BoundedProperty) {
  for (uint64_t trial = 0; trial < 50; ++trial) {
    auto x = Tensor<double>::gaussian({4, 8}, 0.0, 10.0, 100 + trial);
    auto y = Tensor<double>::gaussian({4, 8}, 0.0, 0.1, 200 + trial);
    const double d = negative_cosine_similarity(x, y).item();
    EXPECT_GE(d, -1.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(NegativeCosine, GradCheck) {
  auto y = Tensor<double>::gaussian({3, 6}, 0.0, 1.0, 5);
  auto x0 = Tensor<double>::gaussian({3, 6}, 0.0, 1.0, 6);
  double err = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) { return negative_cosine_similarity(t, y); },
      x0, 1e-5);
  EXPECT_LT(err, 1e-5);
}

// ---------------------------------------------------------------------------
// symmetric loss
// ---------------------------------------------------------------------------

TEST(SymmetricLoss, PerfectAlignmentIsMinusOne) {
  auto p1 = Tensor<float>::from_values({1, 2}, {2, 0});
  auto z2 = Tensor<float>::from_values({1, 2}, {1, 0});
  auto p2 = Tensor<float>::from_values({1, 2}, {0, 3});
  auto z1 = Tensor<float>::from_values({1, 2}, {0, 5});
  EXPECT_NEAR(symmetric_loss(p1, p2, z1, z2).item(), -1.0, 1e-6);
}

TEST(SymmetricLoss, HalfAlignedExample) {
  auto p1 = Tensor<float>::from_values({1, 2}, {1, 0});
  auto z2 = Tensor<float>::from_values({1, 2}, {0, 1});
  auto p2 = Tensor<float>::from_values({1, 2}, {1, 0});
  auto z1 = Tensor<float>::from_values({1, 2}, {1, 0});
  EXPECT_NEAR(symmetric_loss(p1, p2, z1, z2).item(), -0.5, 1e-6);
}

TEST(SymmetricLoss, SwapSymmetryIsBitwise) {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    auto p1 = Tensor<float>::gaussian({4, 8}, 0.0, 1.0, 300 + trial);
    auto p2 = Tensor<float>::gaussian({4, 8}, 0.0, 1.0, 400 + trial);
    auto z1 = Tensor<float>::gaussian({4, 8}, 0.0, 1.0, 500 + trial);
    auto z2 = Tensor<float>::gaussian({4, 8}, 0.0, 1.0, 600 + trial);
    const float a = symmetric_loss(p1, p2, z1, z2).item();
    const float b = symmetric_loss(p2, p1, z2, z1).item();
    EXPECT_EQ(a, b);  // exact: the two halves are the same floats, reordered sum
  }
}

// ---------------------------------------------------------------------------
// representation spread monitor
// ---------------------------------------------------------------------------

TEST(RepresentationStd, CollapsedBatchIsZero) {
  auto row = Tensor<float>::gaussian({1, 16}, 0.0, 1.0, 7);
  auto z = concat<float>({row, row, row}, 0);
  EXPECT_NEAR(representation_std(z), 0.0, 1e-7);
}

TEST(RepresentationStd, BasisVectorsClosedForm) {
  const int64_t d = 16;
  auto z = Tensor<float>::zeros({d, d});
  for (int64_t i = 0; i < d; ++i)
    z.data()[static_cast<size_t>(i * d + i)] = 1.f;
  const double want = std::sqrt(1.0 / d - 1.0 / (static_cast<double>(d) * d));
  EXPECT_NEAR(representation_std(z), want, 1e-6);
}

TEST(RepresentationStd, GaussianBatchNearInverseSqrtDim) {
  auto z = Tensor<double>::gaussian({256, 64}, 0.0, 1.0, 8);
  const double s = representation_std(z);
  EXPECT_GT(s, 0.8 * 0.125);
  EXPECT_LT(s, 1.2 * 0.125);
}

TEST(RepresentationStd, RejectsDegenerateInput) {
  EXPECT_THROW(representation_std(Tensor<float>::ones({1, 8})), DegenerateError);
  EXPECT_THROW(representation_std(Tensor<float>::ones({8})), ShapeError);
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

TEST(ProjectionHeadModule, ShapeAndVisitation) {
  ProjectionHead<float> head(32, 8, 9);
  auto y = head.forward(Tensor<float>::gaussian({4, 32}, 0.0, 1.0, 10));
  EXPECT_EQ(y.shape(), (Shape{4, 8}));
  std::set<std::string> names;
  head.visit("proj", [&](const std::string& n, Tensor<float>&, bool) {
    names.insert(n);
  });
  EXPECT_TRUE(names.count("proj.fc1.weight"));
  EXPECT_TRUE(names.count("proj.bn2.running_mean"));
  EXPECT_TRUE(names.count("proj.fc3.weight"));
}

TEST(ProjectionHeadModule, OptionalOutputNormalization) {
  ProjectionHead<float> head(16, 8, 11, /*bn_output=*/true);
  auto y = head.forward(Tensor<float>::gaussian({64, 16}, 0.0, 1.0, 12));
  // with a terminal batch-norm the output dimensions are standardized
  for (int64_t c = 0; c < 8; ++c) {
    double m = 0.0;
    for (int64_t i = 0; i < 64; ++i) m += y.data()[static_cast<size_t>(i * 8 + c)];
    EXPECT_LT(std::fabs(m / 64.0), 1e-4);
  }
}

TEST(PredictionHeadModule, BottleneckWidth) {
  PredictionHead<float> head(16, 13);
  EXPECT_EQ(head.hidden_dim(), 4);
  auto y = head.forward(Tensor<float>::gaussian({4, 16}, 0.0, 1.0, 14));
  EXPECT_EQ(y.shape(), (Shape{4, 16}));
}

TEST(PredictionHeadModule, DimMustSplitByFour) {
  EXPECT_THROW(PredictionHead<float>(30, 1), ConfigError);
}

TEST(Heads, GradCheck) {
  ProjectionHead<double> proj(16, 8, 15);
  PredictionHead<double> pred(8, 16);
  auto x = Tensor<double>::gaussian({4, 16}, 0.0, 1.0, 17);
  std::vector<Tensor<double>> params;
  proj.visit("", [&](const std::string&, Tensor<double>& t, bool tr) {
    if (tr) params.push_back(t);
  });
  pred.visit("", [&](const std::string&, Tensor<double>& t, bool tr) {
    if (tr) params.push_back(t);
  });
  double err = ssllab::grad_check_params<double>(
      [&] {
        auto y = pred.forward(proj.forward(x));
        return sum(mul(y, y));
      },
      params, 1e-5);
  EXPECT_LT(err, 1e-5);
}

// ---------------------------------------------------------------------------
// siamese forward
// ---------------------------------------------------------------------------

TEST(SiameseForward, OutputShapes) {
  SiameseModel<float> model(tiny_config(), 18);
  auto x1 = Tensor<float>::gaussian({2, 3, 8, 8}, 0.0, 1.0, 19);
  auto x2 = Tensor<float>::gaussian({2, 3, 8, 8}, 0.0, 1.0, 20);
  auto out = siamese_forward(model, x1, x2);
  EXPECT_EQ(out.p1.shape(), (Shape{2, 8}));
  EXPECT_EQ(out.p2.shape(), (Shape{2, 8}));
  EXPECT_EQ(out.z1.shape(), (Shape{2, 8}));
  EXPECT_EQ(out.z2.shape(), (Shape{2, 8}));
  EXPECT_FALSE(out.z1.requires_grad());
  EXPECT_FALSE(out.z2.requires_grad());
}

TEST(SiameseForward, MismatchedViewsRejected) {
  SiameseModel<float> model(tiny_config(), 21);
  EXPECT_THROW(siamese_forward(model, Tensor<float>::zeros({2, 3, 8, 8}),
                               Tensor<float>::zeros({3, 3, 8, 8})),
               ShapeError);
}

TEST(SiameseForward, IdenticalViewsCoincideInEval) {
  SiameseModel<float> model(tiny_config(), 22);
  model.set_mode(Mode::eval);
  auto x = Tensor<float>::gaussian({2, 3, 8, 8}, 0.0, 1.0, 23);
  auto out = siamese_forward(model, x, x);
  EXPECT_EQ(out.p1.data(), out.p2.data());
  EXPECT_EQ(out.z1.data(), out.z2.data());
}

TEST(SiameseForward, VisitationNamesUnique) {
  SiameseModel<float> model(tiny_config(), 24);
  std::set<std::string> names;
  int64_t total = 0;
  model.visit("m", [&](const std::string& n, Tensor<float>&, bool) {
    names.insert(n);
    ++total;
  });
  EXPECT_EQ(static_cast<int64_t>(names.size()), total);
}

// ---------------------------------------------------------------------------
// stop-gradient semantics
// ---------------------------------------------------------------------------

TEST(StopGradient, MatchesFrozenTargetOracle) {
  // Run A: the production path with stop-gradient on.
  SiameseConfig cfg = tiny_config();
  cfg.projection_dim = 16;  // keep the bottleneck wide enough to stay healthy
  SiameseModel<double> a(cfg, 25);
  auto x1 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 26);
  auto x2 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 27);
  auto out = siamese_forward(a, x1, x2);
  auto loss_a = symmetric_loss(out.p1, out.p2, out.z1, out.z2);
  backward(loss_a);
  auto grads_a = trainable_grads(a);

  // Run B: identical weights; targets computed out-of-graph, predictions
  // rebuilt through the graph. Gradients must match run A.
  SiameseModel<double> b(cfg, 25);
  Tensor<double> z1c, z2c;
  {
    NoGradGuard guard;
    z1c = b.project(x1);
    z2c = b.project(x2);
  }
  auto p1 = b.prediction().forward(b.projection().forward(
      b.backbone().forward(x1)));
  auto p2 = b.prediction().forward(b.projection().forward(
      b.backbone().forward(x2)));
  auto loss_b = symmetric_loss(p1, p2, z1c, z2c);
  EXPECT_NEAR(loss_b.item(), loss_a.item(), 1e-12);
  backward(loss_b);
  auto grads_b = trainable_grads(b);

  ASSERT_EQ(grads_a.size(), grads_b.size());
  for (size_t i = 0; i < grads_a.size(); ++i) {
    ASSERT_EQ(grads_a[i].first, grads_b[i].first);
    const auto& ga = grads_a[i].second.grad();
    const auto& gb = grads_b[i].second.grad();
    ASSERT_EQ(ga.size(), gb.size());
    for (size_t j = 0; j < ga.size(); ++j)
      EXPECT_NEAR(ga[j], gb[j], 1e-12) << grads_a[i].first << "[" << j << "]";
  }
}

TEST(StopGradient, DisablingItChangesGradients) {
  SiameseConfig cfg = tiny_config();
  cfg.projection_dim = 16;
  SiameseModel<double> a(cfg, 28);
  SiameseModel<double> b(cfg, 28);
  auto x1 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 29);
  auto x2 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 30);

  auto oa = siamese_forward(a, x1, x2, /*stop_gradient=*/true);
  backward(symmetric_loss(oa.p1, oa.p2, oa.z1, oa.z2));
  auto ob = siamese_forward(b, x1, x2, /*stop_gradient=*/false);
  backward(symmetric_loss(ob.p1, ob.p2, ob.z1, ob.z2));

  auto ga = trainable_grads(a);
  auto gb = trainable_grads(b);
  ASSERT_EQ(ga.size(), gb.size());
  double max_diff = 0.0;
  for (size_t i = 0; i < ga.size(); ++i)
    for (size_t j = 0; j < ga[i].second.grad().size(); ++j)
      max_diff = std::max(max_diff, std::fabs(ga[i].second.grad()[j] -
                                              gb[i].second.grad()[j]));
  EXPECT_GT(max_diff, 1e-9)
      << "removing stop-gradient must open an extra gradient path";
}

TEST(StopGradient, FiniteDifferencesWithFrozenTargets) {
  SiameseConfig cfg = tiny_config();
  cfg.projection_dim = 16;
  SiameseModel<double> model(cfg, 34);
  auto x1 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 35);
  auto x2 = Tensor<double>::gaussian({4, 3, 8, 8}, 0.0, 1.0, 36);
  Tensor<double> z1c, z2c;
  {
    NoGradGuard guard;
    z1c = model.project(x1);
    z2c = model.project(x2);
  }
  // check a representative parameter subset end to end
  std::vector<Tensor<double>> params = {
      model.prediction().fc2().weight(),
      model.projection().fc3().weight(),
  };
  double err = ssllab::grad_check_params<double>(
      [&] {
        auto p1 = model.prediction().forward(model.projection().forward(
            model.backbone().forward(x1)));
        auto p2 = model.prediction().forward(model.projection().forward(
            model.backbone().forward(x2)));
        return symmetric_loss(p1, p2, z1c, z2c);
      },
      params, 1e-5);
  EXPECT_LT(err, 1e-5);
}
