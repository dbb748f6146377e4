#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flowxpert/neural.hpp"
#include "gradcheck.hpp"

using namespace flowxpert;
using namespace flowxpert::nn;

TEST(ParameterCount, BlocksMatchLayerArithmetic) {
  const std::size_t emb = (15 * 128 + 128) + (128 + 128) + (128 * 16 + 16);
  const std::size_t enc = (31 * 512 + 512) + (512 * 256 + 256) + (256 * 128 + 128);
  const std::size_t head = 128 * 2 + 2;
  EmbeddingNet<float> e;
  EncoderNet<float> x;
  ClassifierHead<float> h;
  EXPECT_EQ(e.parameter_count(), emb);
  EXPECT_EQ(x.parameter_count(), enc);
  EXPECT_EQ(h.parameter_count(), head);
  EXPECT_EQ(emb, 4368u);
  EXPECT_EQ(enc, 180608u);
  EXPECT_EQ(head, 258u);
  EXPECT_EQ(param_count(e, x, h), 185234u);
  EXPECT_EQ(count_trainable(e.parameters()), emb);
  EXPECT_EQ(count_trainable(e.buffers()), 0u);
}

TEST(GradientCheck, AllLayersAndLossesOverSeeds) {
  for (const auto& [name, err] : fxtest::gradient_sweep(1, 30)) {
    EXPECT_LT(err, 1e-4) << name;
  }
}

TEST(Dense, HandComputedForwardBackward) {
  Dense<double> d(2, 1);
  d.weight << 1.0, 2.0;
  d.bias << 0.5;
  Matrix<double> x(2, 1);
  x << 3.0, 4.0;
  EXPECT_DOUBLE_EQ(d.forward(x)(0, 0), 11.5);
  Matrix<double> dz(1, 1);
  dz << 2.0;
  const auto dx = d.backward(dz);
  EXPECT_DOUBLE_EQ(d.weight_grad(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(d.weight_grad(0, 1), 8.0);
  EXPECT_DOUBLE_EQ(d.bias_grad(0), 2.0);
  EXPECT_DOUBLE_EQ(dx(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(dx(1, 0), 4.0);
}

TEST(Dense, GlorotInitIsBoundedAndSeeded) {
  std::mt19937_64 a(9), b(9);
  Dense<float> x(31, 512), y(31, 512);
  x.init(a);
  y.init(b);
  const float limit = std::sqrt(6.0f / (31 + 512));
  EXPECT_LE(x.weight.cwiseAbs().maxCoeff(), limit);
  EXPECT_GT(x.weight.cwiseAbs().maxCoeff(), 0.9f * limit);
  EXPECT_TRUE(x.bias.isZero());
  EXPECT_EQ(x.weight, y.weight);
}

TEST(LeakyRelu, Values) {
  LeakyReLU<double> act;
  Matrix<double> x(3, 1);
  x << -2.0, 0.0, 3.0;
  const auto y = act.forward(x);
  EXPECT_DOUBLE_EQ(y(0, 0), -0.02);
  EXPECT_DOUBLE_EQ(y(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(y(2, 0), 3.0);
  const auto g = act.backward(Matrix<double>::Ones(3, 1));
  EXPECT_DOUBLE_EQ(g(0, 0), 0.01);
  EXPECT_DOUBLE_EQ(g(1, 0), 0.01);
  EXPECT_DOUBLE_EQ(g(2, 0), 1.0);
}

TEST(BatchNorm, TrainStatisticsAndRunningUpdate) {
  BatchNorm<double> bn(1);
  Matrix<double> x(1, 4);
  x << 1.0, 2.0, 3.0, 6.0;  // mean 3, biased var 3.5, unbiased 14/3
  const auto y = bn.forward(x, Mode::train);
  const double inv = 1.0 / std::sqrt(3.5 + 1e-5);
  EXPECT_NEAR(y(0, 0), -2.0 * inv, 1e-12);
  EXPECT_NEAR(y(0, 3), 3.0 * inv, 1e-12);
  EXPECT_NEAR(y.sum(), 0.0, 1e-12);
  EXPECT_NEAR(bn.running_mean(0), 0.1 * 3.0, 1e-12);
  EXPECT_NEAR(bn.running_var(0), 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
  // Eval mode uses the running estimates and is per-sample.
  const auto e = bn.forward(x.col(0), Mode::eval);
  EXPECT_NEAR(e(0, 0), (1.0 - bn.running_mean(0)) / std::sqrt(bn.running_var(0) + 1e-5), 1e-12);
  EXPECT_NEAR(bn.infer(x.col(0))(0, 0), e(0, 0), 1e-15);
  EXPECT_THROW(bn.forward(x.col(0), Mode::train), BatchTooSmallForTrainMode);
}

TEST(Embedding, InferMatchesEvalForwardAndIsBatchIndependent) {
  std::mt19937_64 rng(3);
  EmbeddingNet<double> net;
  net.init(rng);
  const auto x = fxtest::random_matrix(rng, 15, 5);
  net.forward(x, Mode::train);  // move the running stats away from the identity
  const auto all = net.infer(x);
  EXPECT_TRUE(all.isApprox(net.forward(x, Mode::eval), 1e-12));
  for (Index c = 0; c < x.cols(); ++c) EXPECT_TRUE(net.infer(x.col(c)).isApprox(all.col(c), 1e-12));
  EXPECT_EQ(all.rows(), 16);
  EXPECT_EQ(concat_with_embedding(x, net).rows(), 31);
}

TEST(ContrastiveLoss, HandExamples) {
  Matrix<double> e(2, 4);
  e << 0, 3, 0, 0.5,  //
      0, 0, 0, 0;
  const std::vector<EmbeddingPair> pairs = {{0, 1, PairLabel::same}, {2, 3, PairLabel::different}};
  const auto r = contrastive_loss<double>(e, pairs, 1.0);
  EXPECT_DOUBLE_EQ(r.loss, (3.0 - 1.0) + (2.0 - 0.5));
  EXPECT_DOUBLE_EQ(r.grad(0, 0), -1.0);  // pulls the positive pair together
  EXPECT_DOUBLE_EQ(r.grad(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(r.grad(0, 2), 1.0);  // pushes the negative pair apart
  EXPECT_DOUBLE_EQ(r.grad(0, 3), -1.0);

  // Satisfied constraints contribute nothing.
  Matrix<double> ok(1, 4);
  ok << 0, 0.5, 0, 2.5;
  const auto z = contrastive_loss<double>(ok, pairs, 1.0);
  EXPECT_EQ(z.loss, 0.0);
  EXPECT_TRUE(z.grad.isZero());
  // Means are taken per pair type.
  Matrix<double> two(1, 4);
  two << 0, 3, 10, 12;
  const std::vector<EmbeddingPair> pos = {{0, 1, PairLabel::same}, {2, 3, PairLabel::same}};
  EXPECT_DOUBLE_EQ(contrastive_loss<double>(two, pos, 1.0).loss, (2.0 + 1.0) / 2.0);
}

TEST(ContrastiveLoss, HingeIsNonIncreasingUnderPairImprovement) {
  const double m = 1.0;
  for (int i = 0; i < 100; ++i) {
    for (int j = 0; j < 100; ++j) {
      const double pos = 3.0 * m * i / 99.0;
      const double neg = 3.0 * m * j / 99.0;
      for (int k = 1; k <= 20; ++k) {
        const double eps = m * k / 20.0;
        EXPECT_LE(contrastive_hinge(pos - eps, neg + eps, m), contrastive_hinge(pos, neg, m));
      }
    }
  }
  EXPECT_EQ(contrastive_hinge(1.0, 2.0, 1.0), 0.0);
  EXPECT_EQ(contrastive_hinge(1.5, 1.0, 1.0), 0.5 + 1.0);
}

TEST(CrossEntropy, ExamplesAndStability) {
  Matrix<double> z(2, 1);
  z << 0.0, 0.0;
  const std::vector<int> y0 = {0};
  const auto r = cross_entropy_loss<double>(z, y0);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(r.grad(0, 0), -0.5);
  EXPECT_DOUBLE_EQ(r.grad(1, 0), 0.5);

  Matrix<double> big(2, 2);
  big << 1000.0, 0.0,  //
      0.0, 1000.0;
  const std::vector<int> y = {0, 0};
  const auto s = cross_entropy_loss<double>(big, y);
  EXPECT_TRUE(std::isfinite(s.loss));
  EXPECT_NEAR(s.loss, 500.0, 1e-9);
  EXPECT_TRUE(softmax<double>(big).allFinite());
  const std::vector<int> wrong = {0};
  EXPECT_THROW(cross_entropy_loss<double>(big, wrong), ShapeMismatch);
}

TEST(Adam, FirstTwoStepsMatchHandRecurrence) {
  Vector<double> w(2), g(2);
  w << 1.0, -2.0;
  ParamList<double> p = {make_ref("w", w, &g)};
  Adam<double> opt(0.1);
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  const double grads[2][2] = {{0.5, -4.0}, {0.25, 1.0}};
  for (int t = 1; t <= 2; ++t) {
    g << grads[t - 1][0], grads[t - 1][1];
    opt.step(p);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w(i), ref[i], 1e-14);
    }
  }
  // First step magnitude is lr regardless of gradient scale.
  EXPECT_EQ(opt.steps(), 2u);
  Vector<double> w2 = Vector<double>::Zero(2), g2 = Vector<double>::Zero(2);
  ParamList<double> p2 = {make_ref("w", w2, &g2)};
  Adam<double> other(0.1);
  other.step(p2);
  Vector<double> w3(3), g3(3);
  ParamList<double> p3 = {make_ref("w", w3, &g3)};
  EXPECT_THROW(other.step(p3), ShapeMismatch);
}

TEST(Optimizers, MinimiseQuadratic) {
  for (auto kind : {OptimizerKind::adam, OptimizerKind::sgd}) {
    Vector<double> w(3), g(3);
    w << 3.0, -1.0, 2.0;
    ParamList<double> p = {make_ref("w", w, &g)};
    Optimizer<double> opt(kind, kind == OptimizerKind::adam ? 0.05 : 0.1);
    for (int i = 0; i < 2000; ++i) {
      g = 2.0 * w;
      opt.step(p);
    }
    EXPECT_LT(w.norm(), 1e-3);
  }
}

TEST(Sgd, ExactStep) {
  Vector<double> w(1), g(1);
  w << 1.0;
  g << 0.5;
  ParamList<double> p = {make_ref("w", w, &g)};
  Sgd<double>(0.2).step(p);
  EXPECT_DOUBLE_EQ(w(0), 0.9);
}
