#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rbc/losses.hpp"
#include "grad_fixture.hpp"
#include "test_support.hpp"

using namespace rbc;
using namespace rbc::testing;

namespace {

Tensor<double> probs_1x1(std::initializer_list<double> p) {
  Tensor<double> t(static_cast<int>(p.size()), 1, 1);
  int c = 0;
  for (double v : p) t.data[c++] = v;
  return t;
}

RefinedTarget target_of(const Mask& labels, double beta) { return {labels, beta, Mask(labels.height, labels.width)}; }

Mask labels_1xn(std::initializer_list<int> l) {
  Mask m(1, static_cast<int>(l.size()));
  int i = 0;
  for (int v : l) m.data[i++] = static_cast<std::uint8_t>(v);
  return m;
}

double hand_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST(PsLoss, HandExample) {
  const auto rt = target_of(labels_1xn({0}), 1.0);
  EXPECT_NEAR(ps_loss(probs_1x1({0.7, 0.2, 0.1}), rt), 0.356674943938732, 1e-9);
  EXPECT_NEAR(ps_loss(probs_1x1({0.7, 0.2, 0.1}), rt), -std::log(0.7), 1e-12);
}

TEST(PsLoss, IgnoreAndBetaZero) {
  EXPECT_EQ(ps_loss(probs_1x1({0.7, 0.2, 0.1}), target_of(labels_1xn({255}), 1.0)), 0.0);
  EXPECT_EQ(ps_loss(probs_1x1({0.7, 0.2, 0.1}), target_of(labels_1xn({1}), 0.0)), 0.0);
}

TEST(PsLoss, ClampRecorded) {
  bool clamped = false;
  const double v = weighted_ce<double>(probs_1x1({0.0, 1.0}), labels_1xn({0}), 1.0, nullptr, nullptr, &clamped);
  EXPECT_TRUE(clamped);
  EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
}

TEST(WeightMap, HandExamples) {
  // Pixel 0 old (class 1), pixel 1 new (class 2).
  const auto rt = target_of(labels_1xn({1, 2}), 1.0);
  const PixelSet old{{0, 0}};
  const std::vector<int> fresh{2};
  const auto wm = weight_map(rt, old, fresh);
  EXPECT_NEAR(wm.at(0, 0), 1.231059, 1e-6);
  EXPECT_NEAR(wm.at(0, 0), 0.5 + hand_sigmoid(1.0), 1e-15);
  EXPECT_EQ(wm.at(0, 1), 1.0);
}

TEST(WeightMap, NoNewPixelsUsesCap) {
  const auto rt = target_of(labels_1xn({1, 0}), 1.0);
  const std::vector<int> fresh{2};
  const auto wm = weight_map(rt, PixelSet{{0, 0}}, fresh, 20.0);
  EXPECT_NEAR(wm.at(0, 0), 0.5 + hand_sigmoid(20.0), 1e-15);
}

TEST(WeightMap, RangeInvariant) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> lab(0, 3);
  const std::vector<int> fresh{3};
  for (int trial = 0; trial < 100; ++trial) {
    Mask m(4, 5);
    for (auto& v : m.data) v = static_cast<std::uint8_t>(lab(rng));
    const auto rt = target_of(m, 1.0);
    const auto old = old_pixel_set(rt, 2);
    const auto wm = weight_map(rt, old, fresh);
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 5; ++w) {
        const int v = m.at(h, w);
        if (v == 1 || v == 2) {
          EXPECT_GE(wm.at(h, w), 1.0);
          EXPECT_LT(wm.at(h, w), 1.5);
        } else {
          EXPECT_EQ(wm.at(h, w), 1.0);
        }
      }
  }
}

TEST(BpsLoss, HandExample) {
  // Pixel A: old class 1 with p = 0.5. Pixel B: new class 2 with p = 0.8.
  Tensor<double> prob(3, 1, 2);
  prob.at(0, 0, 0) = 0.25, prob.at(1, 0, 0) = 0.5, prob.at(2, 0, 0) = 0.25;
  prob.at(0, 0, 1) = 0.1, prob.at(1, 0, 1) = 0.1, prob.at(2, 0, 1) = 0.8;
  const auto rt = target_of(labels_1xn({1, 2}), 1.0);
  const std::vector<int> fresh{2};
  const auto wm = weight_map(rt, PixelSet{{0, 0}}, fresh);
  const double eta = 0.5 + hand_sigmoid(1.0);
  const double expected = -0.5 * (eta * std::log(0.5) + std::log(0.8));
  EXPECT_NEAR(bps_loss(prob, rt, wm), expected, 1e-12);
  EXPECT_NEAR(bps_loss(prob, rt, wm), 0.5382241670978656, 1e-9);
}

TEST(BpsLoss, ReductionIdentities) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_int_distribution<int> lab(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> s(4, 3, 3);
    for (auto& v : s.data) v = u(rng);
    const auto prob = softmax_scores(s);
    Mask m(3, 3);
    for (auto& v : m.data) v = static_cast<std::uint8_t>(lab(rng));
    m.data[0] = kIgnore;
    const auto rt = target_of(m, 0.7);
    const WeightMap ones{3, 3, std::vector<double>(9, 1.0)};
    EXPECT_EQ(bps_loss(prob, rt, ones), ps_loss(prob, rt));
    const std::vector<int> fresh{3};
    const auto wm = weight_map(rt, old_pixel_set(rt, 2), fresh);
    EXPECT_GE(bps_loss(prob, rt, wm), ps_loss(prob, rt));
  }
}

TEST(KdLoss, HandExample) {
  EXPECT_NEAR(kd_loss(Tensor<double>(1, 1, 1, 2.0), Tensor<double>(1, 1, 1, 0.0)), 8.0, 1e-12);
}

TEST(KdLoss, SymmetryHomogeneityAndShape) {
  const auto a = random_image<double>(3, 4, 5, 1), b = random_image<double>(3, 4, 5, 2);
  EXPECT_NEAR(kd_loss(a, b), kd_loss(b, a), 1e-12);
  Tensor<double> a3 = a, b3 = b;
  for (auto& v : a3.data) v *= 3;
  for (auto& v : b3.data) v *= 3;
  EXPECT_NEAR(kd_loss(a3, b3), 9 * kd_loss(a, b), 1e-10);
  EXPECT_EQ(kd_loss(a, a), 0.0);
  EXPECT_THROW(kd_loss(a, random_image<double>(3, 5, 4, 3)), ShapeError);
}

TEST(CtxLoss, HandExample) {
  Tensor<double> sx(4, 1, 1), sxbar(4, 1, 1);
  sx.data = {0.3, 1.0, 2.0, 5.0};
  sxbar.data = {9.0, 2.0, 0.0, -1.0};  // channels 0 and 3 are not old classes
  EXPECT_NEAR(ctx_loss(sx, sxbar, PixelSet{{0, 0}}, 2), 5.0, 1e-12);
}

TEST(CtxLoss, ReductionIdentities) {
  const auto sx = random_image<double>(4, 3, 3, 1), sxbar = random_image<double>(4, 3, 3, 2);
  EXPECT_EQ(ctx_loss(sx, sxbar, PixelSet{}, 2), 0.0);
  EXPECT_EQ(ctx_loss(sx, sx, PixelSet{{0, 0}, {2, 1}}, 3), 0.0);
  EXPECT_THROW(ctx_loss(sx, sxbar, PixelSet{{0, 0}}, 4), std::out_of_range);
}

TEST(TotalLoss, AssembledFromHandComponents) {
  // x: 1x1, prob (0.7, 0.2, 0.1), label 0, feature 2 vs frozen 0.
  Tensor<double> sx(3, 1, 1), sxbar(3, 1, 1);
  sx.data = {std::log(0.7), std::log(0.2), std::log(0.1)};
  sxbar.data = {sx.data[0], sx.data[1] + 1.0, sx.data[2] - 2.0};
  const Tensor<double> fx(1, 1, 1, 2.0), fxbar(1, 1, 1, 1.0);
  const RowMatrix<double> phi_prev = RowMatrix<double>::Zero(2, 1);
  const Mask y = labels_1xn({0});
  const PixelSet old{{0, 0}};

  DupletLossInput<double> in;
  in.first = {&sx, &fx, &phi_prev, &y};
  in.second = BranchOutputs<double>{&sxbar, &fxbar, &phi_prev, &y};
  in.beta = 1.0;
  in.old_pixels = &old;
  in.num_old_classes = 2;
  in.use_ctx = true;
  LossHyper hyper;
  hyper.alpha = 1.0;
  hyper.gamma = 0.01;
  const auto b = total_loss(in, hyper);

  const double pxbar0 = std::exp(sxbar.data[0]) /
                        (std::exp(sxbar.data[0]) + std::exp(sxbar.data[1]) + std::exp(sxbar.data[2]));
  const double expected_ps = -std::log(0.7) - std::log(pxbar0);
  const double expected_kd = 8.0 + 2.0;
  const double expected_ctx = 5.0;
  EXPECT_NEAR(b.l_ps, expected_ps, 1e-9);
  EXPECT_NEAR(b.l_kd, expected_kd, 1e-9);
  EXPECT_NEAR(*b.l_ctx, expected_ctx, 1e-9);
  EXPECT_NEAR(b.total, expected_ps + expected_kd + 0.01 * expected_ctx, 1e-9);
  EXPECT_NEAR(b.total, b.l_dup + b.gamma * *b.l_ctx, 1e-12);

  hyper.gamma = 0.0;
  const auto b0 = total_loss(in, hyper);
  EXPECT_EQ(b0.total, b0.l_dup);
}

TEST(TotalLoss, MissingOldModel) {
  const Tensor<double> s(3, 1, 1), f(1, 1, 1);
  const Mask y = labels_1xn({0});
  DupletLossInput<double> in;
  in.first = {&s, &f, nullptr, &y};
  EXPECT_THROW(total_loss(in, LossHyper{}), MissingOldModel);
}

namespace {

void expect_conforming(Term term, const char* name) {
  GradFixture fx;
  ASSERT_GT(fx.loss(fx.model, term), 0.0) << name;
  const auto r = check_gradients(fx.model, fx.analytic(term),
                                 [&](const SegModel<double>& m) { return fx.loss(m, term); });
  EXPECT_LT(r.max_rel_error, 1e-4) << name << ": " << r.worst;
}

}  // namespace

TEST(LossGradients, PseudoLabel) { expect_conforming(Term::Ps, "ps"); }
TEST(LossGradients, BalancedPseudoLabel) { expect_conforming(Term::Bps, "bps"); }
TEST(LossGradients, Distillation) { expect_conforming(Term::Kd, "kd"); }
TEST(LossGradients, Consistency) { expect_conforming(Term::Ctx, "ctx"); }
TEST(LossGradients, Total) { expect_conforming(Term::All, "total"); }
TEST(LossGradients, TotalMeanReduction) { expect_conforming(Term::AllMean, "total mean"); }
