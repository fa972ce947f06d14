#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rbc/pseudo.hpp"
#include "test_support.hpp"

using namespace rbc;
using rbc::testing::random_image;
using rbc::testing::tiny_arch;

namespace {

Mask mask2x2(int a, int b, int c, int d) {
  Mask m(2, 2);
  m.data = {static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b), static_cast<std::uint8_t>(c),
            static_cast<std::uint8_t>(d)};
  return m;
}

/// Model whose head ignores the features and emits `bias` everywhere.
SegModel<double> constant_model(const ArchConfig& arch, const std::vector<double>& bias) {
  auto m = make_model<double>(arch, static_cast<int>(bias.size()) - 1, 3);
  std::fill(m.layers[kHead].weight.begin(), m.layers[kHead].weight.end(), 0.0);
  m.layers[kHead].bias = bias;
  return m;
}

PseudoPrediction fuse_example_pseudo() {
  PseudoPrediction p;
  p.labels = mask2x2(3, 5, 0, 2);
  p.confidence = {0.9, 0.9, 0.9, 0.4};
  return p;
}

}  // namespace

TEST(PredictPseudo, RequiresOldModel) {
  const auto img = random_image<double>(3, 4, 4, 1);
  EXPECT_THROW(predict_pseudo<double>(nullptr, img), MissingOldModel);
}

TEST(PredictPseudo, UniformOutputs) {
  const auto m = constant_model(tiny_arch(4), {0.0, 0.0, 0.0});
  const auto p = predict_pseudo(&m, random_image<double>(3, 4, 4, 2));
  for (double c : p.confidence) EXPECT_NEAR(c, 1.0 / 3.0, 1e-12);
}

TEST(PredictPseudo, HandBuiltScores) {
  const auto m = constant_model(tiny_arch(1), {std::log(0.1), std::log(0.7), std::log(0.2)});
  const auto p = predict_pseudo(&m, random_image<double>(3, 1, 1, 3));
  EXPECT_EQ(p.labels.data[0], 1);
  EXPECT_NEAR(p.confidence[0], 0.7, 1e-12);
}

TEST(PredictPseudo, Deterministic) {
  auto m = make_model<double>(tiny_arch(8), 3, 11);
  const auto img = random_image<double>(3, 8, 8, 4);
  const auto a = predict_pseudo(&m, img), b = predict_pseudo(&m, img);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.confidence, b.confidence);
}

TEST(FuseTargets, TwoByTwoExample) {
  const auto rt = fuse_targets(mask2x2(16, 0, 0, 255), fuse_example_pseudo(), 0.5);
  EXPECT_EQ(rt.labels, mask2x2(16, 5, 0, 255));
  EXPECT_EQ(rt.accepted, mask2x2(0, 1, 0, 0));
  // Only the top-right pixel is a candidate (background gt, old pseudo label).
  EXPECT_DOUBLE_EQ(rt.beta, 1.0);
}

TEST(FuseTargets, AllNewClassKeepsGroundTruth) {
  const Mask gt = mask2x2(16, 17, 16, 16);
  const auto rt = fuse_targets(gt, fuse_example_pseudo(), 0.5);
  EXPECT_EQ(rt.labels, gt);
  EXPECT_EQ(rt.beta, 0.0);
}

TEST(FuseTargets, TauOneRejectsEverything) {
  PseudoPrediction p;
  p.labels = mask2x2(3, 5, 0, 2);
  p.confidence = {1.0, 0.99, 0.9, 0.7};
  const auto rt = fuse_targets(mask2x2(0, 0, 0, 0), p, 1.0);
  EXPECT_EQ(rt.labels, mask2x2(255, 255, 0, 255));
  EXPECT_EQ(rt.beta, 0.0);
}

TEST(FuseTargets, RejectsBadTau) {
  EXPECT_THROW(fuse_targets(mask2x2(0, 0, 0, 0), fuse_example_pseudo(), 1.5), ValidationError);
}

TEST(FuseTargets, RandomizedInvariants) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> gt_label(0, 7), old_label(0, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Mask gt(5, 6);
    PseudoPrediction p{Mask(5, 6), std::vector<double>(30)};
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int g = gt_label(rng);  // 0..4 background, 5..6 new, 7 ignore
      gt.data[i] = static_cast<std::uint8_t>(g == 7 ? kIgnore : (g >= 5 ? g : 0));
      p.labels.data[i] = static_cast<std::uint8_t>(old_label(rng));
      p.confidence[i] = u(rng);
    }
    double prev_beta = 1.0;
    for (double tau : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const auto rt = fuse_targets(gt, p, tau);
      EXPECT_GE(rt.beta, 0.0);
      EXPECT_LE(rt.beta, 1.0);
      EXPECT_LE(rt.beta, prev_beta);
      prev_beta = rt.beta;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt.data[i] == 5 || gt.data[i] == 6) {
          EXPECT_EQ(rt.labels.data[i], gt.data[i]);
        }
      }
      for (const auto& c : old_pixel_set(rt, 4)) {
        const int g = gt.at(c.h, c.w);
        EXPECT_TRUE(g != 5 && g != 6);
      }
    }
  }
}

TEST(OldPixelSet, Examples) {
  const auto rt = fuse_targets(mask2x2(16, 0, 0, 255), fuse_example_pseudo(), 0.5);
  const PixelSet expected{{1, 0}};
  EXPECT_EQ(old_pixel_set(rt, 15), expected);

  RefinedTarget none{mask2x2(16, 0, 255, 0), 0.0, Mask(2, 2)};
  EXPECT_TRUE(old_pixel_set(none, 15).empty());

  RefinedTarget all{mask2x2(1, 2, 3, 4), 1.0, Mask(2, 2, 1)};
  const PixelSet grid{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  EXPECT_EQ(old_pixel_set(all, 4), grid);
}
