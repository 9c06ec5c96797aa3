#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "moe_snnl/layers.hpp"
#include "moe_snnl/ops.hpp"
#include "test_support.hpp"

using namespace moe_snnl;
using moe_snnl::testing::random_tensor;

TEST(Init, KaimingStdMatchesFanIn) {
  RngStream rng(31);
  const auto v = kaiming_init(Shape{100000}, 128, rng);
  Real sum = 0.0, sq = 0.0;
  for (Real x : v) sum += x;
  const Real mean = sum / v.size();
  for (Real x : v) sq += (x - mean) * (x - mean);
  const Real sd = std::sqrt(sq / (v.size() - 1));
  const Real expected = std::sqrt(2.0 / 128.0);
  EXPECT_NEAR(sd, expected, 0.05 * expected);
  EXPECT_THROW(kaiming_init(Shape{3}, 0, rng), std::invalid_argument);
}

TEST(Init, XavierBoundAndRange) {
  EXPECT_DOUBLE_EQ(xavier_bound(3, 3), 1.0);
  RngStream rng(32);
  const auto v = xavier_init(Shape{50000}, 10, 20, rng);
  const Real bound = std::sqrt(6.0 / 30.0);
  Real lo = 1.0, hi = -1.0;
  for (Real x : v) {
    ASSERT_LE(std::abs(x), bound);
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  EXPECT_LT(lo, -0.99 * bound);
  EXPECT_GT(hi, 0.99 * bound);
  EXPECT_THROW(xavier_init(Shape{3}, 0, 2, rng), std::invalid_argument);
}

TEST(Dense, ShapesBiasAndNames) {
  RngStream rng(33);
  DenseLayer d("expert.3.hidden", 7, 4, Init::kaiming, rng);
  EXPECT_EQ(d.weight.tensor.shape(), (Shape{4, 7}));
  EXPECT_EQ(d.bias.tensor.shape(), (Shape{4}));
  for (Real b : d.bias.tensor.values()) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(d.weight.name, "expert.3.hidden.weight");
  EXPECT_EQ(d.bias.name, "expert.3.hidden.bias");
  EXPECT_TRUE(d.weight.weight_decay);
  EXPECT_FALSE(d.bias.weight_decay);
}

TEST(Dense, IdentityAndHandArithmetic) {
  RngStream rng(34);
  DenseLayer d("d", 2, 2, Init::xavier, rng);
  d.weight.tensor.values() = {1, 0, 0, 1};
  Tape t;
  Var x = t.constant(Tensor(Shape{1, 2}, {0.25, -3.0}));
  EXPECT_EQ(d.forward(t, x).value().values(), x.value().values());
  d.weight.tensor.values() = {1, 2, 3, 4};
  Var ones = t.constant(Tensor(Shape{1, 2}, {1, 1}));
  EXPECT_EQ(d.forward(t, ones).value().values(), (std::vector<Real>{3, 7}));
  EXPECT_THROW(d.forward(t, t.constant(Tensor(Shape{1, 3}))), DimensionError);
}

TEST(Conv, ZeroKernelsGiveZeroOutputAndPreserveSpatialDims) {
  RngStream rng(35);
  Conv2DLayer c("c", 3, 4, rng);
  EXPECT_EQ(c.kernels.tensor.shape(), (Shape{4, 3, 3, 3}));
  for (auto& v : c.kernels.tensor.values()) v = 0.0;
  Tape t;
  Var y = c.forward(t, t.constant(random_tensor({2, 3, 5, 6}, rng)));
  EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
  for (Real v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv, CrossCorrelationWithZeroPadding) {
  RngStream rng(36);
  Conv2DLayer c("c", 1, 1, rng);
  // Kernel picks the right-hand neighbour.
  c.kernels.tensor.values() = {0, 0, 0, 0, 0, 1, 0, 0, 0};
  c.bias.tensor.values() = {0.5};
  Tape t;
  Var y = c.forward(t, t.constant(Tensor(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})));
  EXPECT_EQ(y.value().values(), (std::vector<Real>{2.5, 3.5, 0.5, 5.5, 6.5, 0.5, 8.5, 9.5, 0.5}));
}

TEST(Conv, ChannelMismatchAndEmptyInput) {
  RngStream rng(37);
  Conv2DLayer c("c", 2, 3, rng);
  Tape t;
  EXPECT_THROW(c.forward(t, t.constant(Tensor(Shape{1, 3, 4, 4}))), DimensionError);
  EXPECT_THROW(c.forward(t, t.constant(Tensor(Shape{2, 4, 4}))), DimensionError);
}

TEST(BatchNorm, StandardizedChannelPassesThrough) {
  // Two values per channel at +-1 already have mean 0 and biased variance 1.
  BatchNorm2DLayer bn("bn", 1);
  Tape t;
  Var y = bn.forward(t, t.constant(Tensor(Shape{2, 1, 1, 2}, {1, -1, -1, 1})));
  const auto& v = y.value().values();
  const Real expected[] = {1, -1, -1, 1};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(v[i], expected[i], 1e-5);
  // Unbiased variance 4/3 enters the running estimate.
  EXPECT_DOUBLE_EQ(bn.running_var[0], 0.9 + 0.1 * 4.0 / 3.0);
  EXPECT_DOUBLE_EQ(bn.running_mean[0], 0.0);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  BatchNorm2DLayer bn("bn", 2);
  bn.beta.tensor.values() = {0.7, -0.2};
  Tape t;
  Tensor x(Shape{3, 2, 2, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = ((i / 4) % 2) ? 5.0 : -2.0;
  Var y = bn.forward(t, t.constant(x));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y.value()[i], ((i / 4) % 2) ? -0.2 : 0.7);
}

TEST(BatchNorm, RunningStatsUpdateAndEvalIsReadOnly) {
  RngStream rng(38);
  BatchNorm2DLayer bn("bn", 2);
  for (auto& v : bn.gamma.tensor.values()) v = rng.uniform(0.5, 2.0);
  auto x = random_tensor({4, 2, 3, 3}, rng, 3.0);
  {
    Tape t;
    bn.forward(t, t.constant(x));
  }
  for (std::size_t c = 0; c < 2; ++c) {
    Real sum = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) sum += x[(n * 2 + c) * 9 + i];
    const Real mu = sum / 36.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) sq += (x[(n * 2 + c) * 9 + i] - mu) * (x[(n * 2 + c) * 9 + i] - mu);
    EXPECT_NEAR(bn.running_mean[c], 0.1 * mu, 1e-12);
    EXPECT_NEAR(bn.running_var[c], 0.9 + 0.1 * sq / 35.0, 1e-12);
    EXPECT_GE(bn.running_var[c], 0.0);
  }
  const auto mean = bn.running_mean, var = bn.running_var;
  bn.mode = Mode::eval;
  Tape t;
  Var y = bn.forward(t, t.constant(x));
  EXPECT_EQ(bn.running_mean, mean);
  EXPECT_EQ(bn.running_var, var);
  const Real scale = bn.gamma.tensor[0] / std::sqrt(var[0] + bn.eps);
  EXPECT_NEAR(y.value()[0], (x[0] - mean[0]) * scale, 1e-12);
}

TEST(BatchNorm, EvalBeforeTrainUsesInitialStats) {
  BatchNorm2DLayer bn("bn", 1);
  bn.mode = Mode::eval;
  Tape t;
  Var y = bn.forward(t, t.constant(Tensor(Shape{1, 1, 1, 1}, {2.0})));
  EXPECT_NEAR(y.value()[0], 2.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainModeNeedsTwoValuesPerChannel) {
  BatchNorm2DLayer bn("bn", 1);
  Tape t;
  EXPECT_THROW(bn.forward(t, t.constant(Tensor(Shape{1, 1, 1, 1}))), DimensionError);
}

TEST(BatchNorm, EvalStatisticsApproachGammaBeta) {
  RngStream rng(39);
  BatchNorm2DLayer bn("bn", 2);
  bn.gamma.tensor.values() = {2.0, 0.5};
  bn.beta.tensor.values() = {1.0, -3.0};
  const Real mu[] = {4.0, -1.0}, sd[] = {3.0, 0.2};
  auto draw = [&]() {
    Tensor x(Shape{32, 2, 2, 2});
    for (std::size_t n = 0; n < 32; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i) x[(n * 2 + c) * 4 + i] = rng.normal(mu[c], sd[c]);
    return x;
  };
  for (int step = 0; step < 200; ++step) {
    Tape t;
    bn.forward(t, t.constant(draw()));
  }
  bn.mode = Mode::eval;
  std::vector<Real> sum(2, 0.0), sq(2, 0.0);
  const int batches = 50;
  for (int k = 0; k < batches; ++k) {
    Tape t;
    auto y = bn.forward(t, t.constant(draw())).value();
    for (std::size_t n = 0; n < 32; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i) {
          sum[c] += y[(n * 2 + c) * 4 + i];
          sq[c] += y[(n * 2 + c) * 4 + i] * y[(n * 2 + c) * 4 + i];
        }
  }
  const Real count = batches * 32 * 4;
  for (std::size_t c = 0; c < 2; ++c) {
    const Real m = sum[c] / count;
    const Real v = sq[c] / count - m * m;
    const Real beta = bn.beta.tensor[c], g2 = bn.gamma.tensor[c] * bn.gamma.tensor[c];
    EXPECT_NEAR(m, beta, 0.1 * std::abs(beta)) << "channel " << c;
    EXPECT_NEAR(v, g2, 0.1 * g2) << "channel " << c;
  }
}

TEST(MaxPool, WindowMaximumAndTieRouting) {
  Tape t;
  Var x = t.variable(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(maxpool2x2(x).value()[0], 4.0);
  Var c = t.variable(Tensor(Shape{1, 1, 2, 4}, 3.0));
  Var p = maxpool2x2(c);
  EXPECT_EQ(p.value().values(), (std::vector<Real>{3, 3}));
  t.backward(ops::sum_all(p));
  EXPECT_EQ(t.grad(c), (std::vector<Real>{1, 0, 1, 0, 0, 0, 0, 0}));
}

TEST(MaxPool, OddDimsRejected) {
  Tape t;
  EXPECT_THROW(maxpool2x2(t.constant(Tensor(Shape{1, 1, 3, 4}))), DimensionError);
}

TEST(Relu, ValuesAndZeroSubgradient) {
  Tape t;
  Var x = t.variable(Tensor(Shape{3}, {-1, 0, 2}));
  Var y = relu(x);
  EXPECT_EQ(y.value().values(), (std::vector<Real>{0, 0, 2}));
  t.backward(ops::sum_all(y));
  EXPECT_EQ(t.grad(x), (std::vector<Real>{0, 0, 1}));
}

TEST(Flatten, ShapeArithmetic) {
  Tape t;
  EXPECT_EQ(flatten(t.constant(Tensor(Shape{2, 64, 7, 7}))).shape(), (Shape{2, 3136}));
}

TEST(Extractor, EmbeddingDimensions) {
  RngStream rng(40);
  ExtractorConfig mnist;
  EXPECT_EQ(mnist.embedding_dim(), 3136u);
  ExtractorConfig cifar{3, 32, 32, 32, 64};
  EXPECT_EQ(cifar.embedding_dim(), 4096u);
  FeatureExtractor fe(cifar, rng);
  Tape t;
  auto out = fe.forward(t, t.constant(random_tensor({2, 3, 32, 32}, rng)));
  EXPECT_EQ(out.embedding.shape(), (Shape{2, 4096}));
  ASSERT_EQ(out.taps.size(), 3u);
  EXPECT_EQ(out.taps[0].shape(), (Shape{2, 32 * 16 * 16}));
  EXPECT_EQ(out.taps[1].shape(), (Shape{2, 4096}));
  EXPECT_EQ(out.taps[2].shape(), (Shape{2, 4096}));
}

TEST(Extractor, LayerOrderAndTapPoints) {
  using K = FeatureExtractor::LayerKind;
  const K expected[] = {K::conv, K::batchnorm, K::relu, K::maxpool, K::conv, K::batchnorm, K::relu, K::maxpool, K::flatten};
  for (int i = 0; i < 9; ++i) EXPECT_EQ(FeatureExtractor::layer_order[i], expected[i]);
  EXPECT_EQ(FeatureExtractor::tap_points[0], 3u);
  EXPECT_EQ(FeatureExtractor::tap_points[1], 7u);
  EXPECT_EQ(FeatureExtractor::tap_points[2], 8u);
}

TEST(Extractor, RejectsBadInputs) {
  RngStream rng(41);
  EXPECT_THROW(FeatureExtractor(ExtractorConfig{1, 1, 1, 4, 4}, rng), DimensionError);
  EXPECT_THROW(FeatureExtractor(ExtractorConfig{1, 6, 8, 4, 4}, rng), DimensionError);
  FeatureExtractor fe(ExtractorConfig{1, 8, 8, 4, 4}, rng);
  Tape t;
  EXPECT_THROW(fe.forward(t, t.constant(Tensor(Shape{2, 1, 8, 4}))), DimensionError);
  EXPECT_THROW(fe.forward(t, t.constant(Tensor(Shape{2, 2, 8, 8}))), DimensionError);
}

TEST(Extractor, ParameterNamesAndDecayFlags) {
  RngStream rng(42);
  FeatureExtractor fe(ExtractorConfig{1, 8, 8, 4, 6}, rng);
  std::set<std::string> names;
  for (auto* p : fe.parameters()) {
    names.insert(p->name);
    const bool is_weight = p->name.ends_with(".kernels");
    EXPECT_EQ(p->weight_decay, is_weight) << p->name;
  }
  EXPECT_EQ(names, (std::set<std::string>{"extractor.conv1.kernels", "extractor.conv1.bias", "extractor.bn1.gamma",
                                          "extractor.bn1.beta", "extractor.conv2.kernels", "extractor.conv2.bias",
                                          "extractor.bn2.gamma", "extractor.bn2.beta"}));
}

TEST(Extractor, FullGradientCheckOnTwoSamples) {
  RngStream rng(43);
  FeatureExtractor fe(ExtractorConfig{1, 4, 4, 2, 3}, rng);
  for (auto* p : fe.parameters())
    if (p->name.ends_with(".beta")) for (auto& v : p->tensor.values()) v = rng.normal(0.0, 0.5);
  auto x = random_tensor({2, 1, 4, 4}, rng);
  auto w = random_tensor({2, 3}, rng);
  auto err = moe_snnl::testing::gradient_error(
      [&](Tape& t, const std::vector<Var>& v) { return moe_snnl::testing::probe(fe.forward(t, v[0]).embedding, w); },
      {x}, fe.parameters());
  EXPECT_LT(err, 1e-4);
}
