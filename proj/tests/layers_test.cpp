#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "ssllab/grad_check.hpp"
#include "ssllab/layers.hpp"

using ssllab::BatchNorm;
using ssllab::ConfigError;
using ssllab::DegenerateError;
using ssllab::LayerNorm;
using ssllab::Linear;
using ssllab::Mode;
using ssllab::MultiheadAttention;
using ssllab::PoolKind;
using ssllab::Shape;
using ssllab::ShapeError;
using ssllab::Tensor;
using ssllab::concat;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

TEST(LinearLayer, IdentityWeightZeroBias) {
  Linear<float> fc(3, 3, 1);
  fc.weight() = Tensor<float>::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto x = Tensor<float>::gaussian({2, 3}, 0.0, 1.0, 2);
  auto y = fc.forward(x);
  for (size_t i = 0; i < x.data().size(); ++i)
    EXPECT_FLOAT_EQ(y.data()[i], x.data()[i]);
}

TEST(LinearLayer, HandEvaluation) {
  Linear<float> fc(2, 2, 1);
  fc.weight() = Tensor<float>::from_values({2, 2}, {1, 0, 0, 1});
  fc.bias() = Tensor<float>::from_values({1, 2}, {1, 1});
  auto y = fc.forward(Tensor<float>::from_values({1, 2}, {1, 1}));
  EXPECT_EQ(y.data(), (std::vector<float>{2, 2}));
}

TEST(LinearLayer, DimensionMismatchRejected) {
  Linear<float> fc(4, 2, 1);
  EXPECT_THROW(fc.forward(Tensor<float>::zeros({5, 3})), ShapeError);
}

TEST(LinearLayer, GradCheck) {
  Linear<double> fc(3, 2, 7);
  auto x = Tensor<double>::gaussian({4, 3}, 0.0, 1.0, 8);
  double err = ssllab::grad_check_params<double>(
      [&] {
        auto y = fc.forward(x);
        return sum(mul(y, y));
      },
      {fc.weight(), fc.bias()}, 1e-5);
  EXPECT_LT(err, 1e-5);
  double err_x = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto y = fc.forward(t);
        return sum(mul(y, y));
      },
      x, 1e-5);
  EXPECT_LT(err_x, 1e-5);
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

TEST(BatchNormLayer, ConstantBatchMapsToZero) {
  BatchNorm<float> bn(3);
  auto y = bn.forward(Tensor<float>::full({4, 3}, 2.5f));
  for (float v : y.data()) EXPECT_NEAR(v, 0.f, 1e-4);
}

TEST(BatchNormLayer, UnitVarianceFixedPoint) {
  BatchNorm<float> bn(1);
  auto y = bn.forward(Tensor<float>::from_values({2, 1}, {-1.f, 1.f}));
  EXPECT_NEAR(y.data()[0], -1.f, 1e-4);
  EXPECT_NEAR(y.data()[1], 1.f, 1e-4);
}

TEST(BatchNormLayer, EvalModeUsesRunningStats) {
  BatchNorm<float> bn(2);  // fresh: running_mean 0, running_var 1
  bn.set_mode(Mode::eval);
  auto x = Tensor<float>::gaussian({3, 2}, 0.0, 1.0, 9);
  auto y = bn.forward(x);
  for (size_t i = 0; i < x.data().size(); ++i)
    EXPECT_NEAR(y.data()[i], x.data()[i], 1e-4);  // gamma=1, beta=0
}

TEST(BatchNormLayer, SingleSampleTrainRejected) {
  BatchNorm<float> bn(3);
  EXPECT_THROW(bn.forward(Tensor<float>::zeros({1, 3})), DegenerateError);
  bn.set_mode(Mode::eval);
  EXPECT_NO_THROW(bn.forward(Tensor<float>::zeros({1, 3})));
}

TEST(BatchNormLayer, TrainOutputNormalizedProperty) {
  // gamma=1, beta=0: per-channel batch mean ~0 and variance ~1.
  BatchNorm<double> bn(4);
  auto x = Tensor<double>::gaussian({64, 4}, 3.0, 2.0, 10);
  auto y = bn.forward(x);
  for (int64_t c = 0; c < 4; ++c) {
    double m = 0.0;
    for (int64_t i = 0; i < 64; ++i) m += y.data()[static_cast<size_t>(i * 4 + c)];
    m /= 64.0;
    double v = 0.0;
    for (int64_t i = 0; i < 64; ++i) {
      const double d = y.data()[static_cast<size_t>(i * 4 + c)] - m;
      v += d * d;
    }
    v /= 64.0;
    EXPECT_LT(std::fabs(m), 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(BatchNormLayer, RunningStatUpdateOracle) {
  BatchNorm<double> bn(2);
  auto x = Tensor<double>::from_values({4, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  bn.forward(x);
  // hand-computed: channel means {2.5, 25}, population var {1.25, 125},
  // unbiased var = pop * 4/3; new = 0.9*old + 0.1*batch
  EXPECT_NEAR(bn.running_mean().data()[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(bn.running_mean().data()[1], 0.1 * 25.0, 1e-12);
  EXPECT_NEAR(bn.running_var().data()[0], 0.9 + 0.1 * 1.25 * 4.0 / 3.0, 1e-12);
  EXPECT_NEAR(bn.running_var().data()[1], 0.9 + 0.1 * 125.0 * 4.0 / 3.0, 1e-9);
}

TEST(BatchNormLayer, GradCheckTrainMode) {
  BatchNorm<double> bn(3);
  auto x = Tensor<double>::gaussian({6, 3}, 0.0, 1.0, 11);
  double err = ssllab::grad_check_params<double>(
      [&] {
        auto y = bn.forward(x);
        return sum(mul(y, y));
      },
      {bn.gamma(), bn.beta()}, 1e-5);
  EXPECT_LT(err, 1e-5);
  double err_x = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto y = bn.forward(t);
        return sum(mul(y, square(y)));
      },
      x, 1e-5);
  EXPECT_LT(err_x, 1e-5);
}

TEST(BatchNormLayer, GradCheckSpatialInput) {
  BatchNorm<double> bn(2);
  auto x = Tensor<double>::gaussian({2, 2, 3, 3}, 0.0, 1.0, 12);
  double err = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto y = bn.forward(t);
        return sum(mul(y, square(y)));
      },
      x, 1e-5);
  EXPECT_LT(err, 1e-5);
}

TEST(BatchNormLayer, RunningStatsNotTrainable) {
  BatchNorm<float> bn(2);
  std::set<std::string> trainable, buffers;
  bn.visit("bn", [&](const std::string& n, Tensor<float>&, bool tr) {
    (tr ? trainable : buffers).insert(n);
  });
  EXPECT_EQ(trainable, (std::set<std::string>{"bn.gamma", "bn.beta"}));
  EXPECT_EQ(buffers,
            (std::set<std::string>{"bn.running_mean", "bn.running_var"}));
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

TEST(LayerNormLayer, ConstantVectorMapsToZero) {
  LayerNorm<float> ln(5);
  auto y = ln.forward(Tensor<float>::full({2, 5}, 7.f));
  for (float v : y.data()) EXPECT_NEAR(v, 0.f, 1e-4);
}

TEST(LayerNormLayer, UnitVarianceFixedPoint) {
  LayerNorm<float> ln(2);
  auto y = ln.forward(Tensor<float>::from_values({1, 2}, {-1.f, 1.f}));
  EXPECT_NEAR(y.data()[0], -1.f, 1e-4);
  EXPECT_NEAR(y.data()[1], 1.f, 1e-4);
}

TEST(LayerNormLayer, BetaOnlyOutput) {
  LayerNorm<float> ln(3);
  ln.visit("", [](const std::string& n, Tensor<float>& t, bool) {
    if (n == ".gamma") t.data().assign(t.data().size(), 0.f);
    if (n == ".beta") t.data().assign(t.data().size(), 5.f);
  });
  auto y = ln.forward(Tensor<float>::gaussian({2, 3}, 0.0, 1.0, 13));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 5.f);
}

TEST(LayerNormLayer, GradCheck) {
  LayerNorm<double> ln(4);
  auto x = Tensor<double>::gaussian({3, 4}, 0.0, 1.0, 14);
  double err = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto y = ln.forward(t);
        return sum(mul(y, square(y)));
      },
      x, 1e-5);
  EXPECT_LT(err, 1e-5);
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

TEST(Attention, SingleTokenIsValueChain) {
  MultiheadAttention<double> attn(8, 2, 21);
  auto x = Tensor<double>::gaussian({2, 1, 8}, 0.0, 1.0, 22);
  auto y = attn.forward(x);
  // With one token the attention weight is exactly 1, so the layer reduces
  // to the value projection followed by the output projection.
  auto flat = reshape(x, {2, 8});
  auto want = attn.out_proj().forward(attn.v_proj().forward(flat));
  ASSERT_EQ(y.numel(), want.numel());
  for (size_t i = 0; i < want.data().size(); ++i)
    EXPECT_DOUBLE_EQ(y.data()[i], want.data()[i]);
}

TEST(Attention, IdenticalTokensGiveIdenticalRows) {
  MultiheadAttention<float> attn(8, 2, 23);
  auto one = Tensor<float>::gaussian({1, 1, 8}, 0.0, 1.0, 24);
  auto x = concat<float>({one, one}, 1);  // two identical tokens
  auto y = attn.forward(x);
  for (int64_t j = 0; j < 8; ++j)
    EXPECT_FLOAT_EQ(y.data()[static_cast<size_t>(j)],
                    y.data()[static_cast<size_t>(8 + j)]);
}

TEST(Attention, HeadsMustDivideDim) {
  EXPECT_THROW(MultiheadAttention<float>(10, 3, 1), ConfigError);
  EXPECT_NO_THROW(MultiheadAttention<float>(12, 3, 1));
}

// Naive per-head loop oracle, fp64.
TEST(Attention, MatchesNaiveOracle) {
  const int64_t n = 2, t = 3, d = 8, h = 2, dh = d / h;
  MultiheadAttention<double> attn(d, h, 25);
  auto x = Tensor<double>::gaussian({n, t, d}, 0.0, 1.0, 26);
  auto y = attn.forward(x);

  auto& wq = attn.q_proj().weight().data();
  auto& bq = attn.q_proj().bias().data();
  auto& wk = attn.k_proj().weight().data();
  auto& bk = attn.k_proj().bias().data();
  auto& wv = attn.v_proj().weight().data();
  auto& bv = attn.v_proj().bias().data();
  auto& wo = attn.out_proj().weight().data();
  auto& bo = attn.out_proj().bias().data();

  auto project = [&](const std::vector<double>& w, const std::vector<double>& b,
                     int64_t batch, int64_t tok, int64_t j) {
    double acc = b[static_cast<size_t>(j)];
    for (int64_t i = 0; i < d; ++i)
      acc += x.data()[static_cast<size_t>((batch * t + tok) * d + i)] *
             w[static_cast<size_t>(i * d + j)];
    return acc;
  };

  for (int64_t b = 0; b < n; ++b) {
    // full projections for this batch element
    std::vector<double> q(t * d), k(t * d), v(t * d);
    for (int64_t tok = 0; tok < t; ++tok)
      for (int64_t j = 0; j < d; ++j) {
        q[static_cast<size_t>(tok * d + j)] = project(wq, bq, b, tok, j);
        k[static_cast<size_t>(tok * d + j)] = project(wk, bk, b, tok, j);
        v[static_cast<size_t>(tok * d + j)] = project(wv, bv, b, tok, j);
      }
    std::vector<double> ctx(t * d, 0.0);
    for (int64_t head = 0; head < h; ++head) {
      const int64_t off = head * dh;
      for (int64_t i = 0; i < t; ++i) {
        std::vector<double> logits(t);
        for (int64_t j = 0; j < t; ++j) {
          double s = 0.0;
          for (int64_t e = 0; e < dh; ++e)
            s += q[static_cast<size_t>(i * d + off + e)] *
                 k[static_cast<size_t>(j * d + off + e)];
          logits[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        std::vector<double> p(t);
        for (int64_t j = 0; j < t; ++j) {
          p[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
          z += p[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < t; ++j)
          for (int64_t e = 0; e < dh; ++e)
            ctx[static_cast<size_t>(i * d + off + e)] +=
                p[static_cast<size_t>(j)] / z *
                v[static_cast<size_t>(j * d + off + e)];
      }
    }
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < d; ++j) {
        double out = bo[static_cast<size_t>(j)];
        for (int64_t e = 0; e < d; ++e)
          out += ctx[static_cast<size_t>(i * d + e)] * wo[static_cast<size_t>(e * d + j)];
        EXPECT_NEAR(y.data()[static_cast<size_t>((b * t + i) * d + j)], out, 1e-5)
            << "batch " << b << " token " << i << " dim " << j;
      }
  }
}

TEST(Attention, PermutationEquivariance) {
  // Permuting tokens and inverse-permuting the output is the identity:
  // attention itself carries no positional information.
  MultiheadAttention<double> attn(8, 2, 27);
  auto x = Tensor<double>::gaussian({1, 4, 8}, 0.0, 1.0, 28);
  auto y = attn.forward(x);
  const std::vector<int64_t> perm = {2, 0, 3, 1};
  std::vector<double> xp(x.data().size());
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 8; ++j)
      xp[static_cast<size_t>(i * 8 + j)] =
          x.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * 8 + j)];
  auto yp = attn.forward(Tensor<double>::from_values({1, 4, 8}, xp));
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 8; ++j)
      EXPECT_NEAR(yp.data()[static_cast<size_t>(i * 8 + j)],
                  y.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * 8 + j)],
                  1e-9);
}

TEST(Attention, GradCheck) {
  MultiheadAttention<double> attn(4, 2, 29);
  auto x = Tensor<double>::gaussian({1, 3, 4}, 0.0, 1.0, 30);
  double err_x = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto y = attn.forward(t);
        return sum(mul(y, y));
      },
      x, 1e-5);
  EXPECT_LT(err_x, 1e-5);
  double err_w = ssllab::grad_check_params<double>(
      [&] {
        auto y = attn.forward(x);
        return sum(mul(y, y));
      },
      {attn.q_proj().weight(), attn.k_proj().weight(), attn.v_proj().weight(),
       attn.out_proj().weight(), attn.q_proj().bias(), attn.out_proj().bias()},
      1e-5);
  EXPECT_LT(err_w, 1e-5);
}

TEST(EncoderBlockLayer, GradCheckAndShape) {
  ssllab::EncoderBlock<double> block(4, 2, 31);
  auto x = Tensor<double>::gaussian({2, 3, 4}, 0.0, 1.0, 32);
  auto y = block.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  double err = ssllab::grad_check<double>(
      [&](const Tensor<double>& t) {
        auto out = block.forward(t);
        return sum(mul(out, out));
      },
      x, 1e-5);
  EXPECT_LT(err, 1e-5);
}

// ---------------------------------------------------------------------------
// pooling (spec cases for this module; mechanics covered in conv tests)
// ---------------------------------------------------------------------------

TEST(Pooling, SpecCases) {
  auto q = Tensor<float>::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(pool2d(q, PoolKind::max, 2).item(), 4.f);
  EXPECT_FLOAT_EQ(pool2d(q, PoolKind::avg, 2).item(), 2.5f);
  auto c = Tensor<float>::full({2, 3, 4, 4}, 1.25f);
  auto g = ssllab::global_avg_pool(c);
  ASSERT_EQ(g.shape(), (Shape{2, 3}));
  for (float v : g.data()) EXPECT_FLOAT_EQ(v, 1.25f);
}

// ---------------------------------------------------------------------------
// cross-layer properties
// ---------------------------------------------------------------------------

TEST(LayerProperties, EvalForwardDeterministic) {
  BatchNorm<float> bn(3);
  bn.forward(Tensor<float>::gaussian({8, 3}, 0.0, 1.0, 33));  // move stats
  bn.set_mode(Mode::eval);
  auto x = Tensor<float>::gaussian({4, 3}, 0.0, 1.0, 34);
  EXPECT_EQ(bn.forward(x).data(), bn.forward(x).data());

  MultiheadAttention<float> attn(8, 2, 35);
  auto xa = Tensor<float>::gaussian({2, 3, 8}, 0.0, 1.0, 36);
  EXPECT_EQ(attn.forward(xa).data(), attn.forward(xa).data());
}

TEST(LayerProperties, VisitationNamesUnique) {
  ssllab::EncoderBlock<float> block(8, 2, 37);
  std::set<std::string> names;
  int64_t total = 0;
  block.visit("enc", [&](const std::string& n, Tensor<float>&, bool) {
    names.insert(n);
    ++total;
  });
  EXPECT_EQ(static_cast<int64_t>(names.size()), total);
  EXPECT_TRUE(names.count("enc.attn.q.weight"));
  EXPECT_TRUE(names.count("enc.mlp.fc1.bias"));
}
