#include <gtest/gtest.h>

#include "distillab/augment.hpp"
#include "gradcheck.hpp"

using namespace distillab;
using namespace distillab::testing;

namespace {

Tensor ramp(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(n * c * h * w);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 17) / 16.0;
  return Tensor::from({n, c, h, w}, v);
}

}  // namespace

TEST(Augment, NoneIsIdentity) {
  const Tensor x = ramp(2, 1, 5, 5);
  AugmentRng rng(1);
  EXPECT_EQ(augment(x, AugmentationSpec::none(), rng).to_vector(), x.to_vector());
}

TEST(Augment, FlipIsInvolution) {
  const Tensor x = ramp(2, 3, 4, 5);
  const Tensor f = flip_horizontal(x);
  EXPECT_EQ(f.at(0), x.at(4));
  EXPECT_EQ(flip_horizontal(f).to_vector(), x.to_vector());
}

TEST(Augment, ShiftMovesImpulse) {
  std::vector<double> v(25, 0.0);
  v[2 * 5 + 2] = 1.0;
  const Tensor x = Tensor::from({1, 1, 5, 5}, v);
  const Tensor s = shift_crop(x, 1, -1, 2);
  EXPECT_EQ(s.at(1 * 5 + 3), 1.0);
  double total = 0.0;
  for (double p : s.to_vector()) total += p;
  EXPECT_EQ(total, 1.0);
  EXPECT_THROW(shift_crop(x, 3, 0, 2), std::invalid_argument);
  // content shifted past the border is lost, so the rim has zero gradient
  const Tensor leaf = Tensor::from({1, 1, 5, 5}, std::vector<double>(25, 1.0)).detach_leaf();
  const Tensor g = grad(sum(shift_crop(leaf, 2, 0, 2)), {leaf})[0];
  EXPECT_EQ(g.at(4), 0.0);
  EXPECT_EQ(g.at(3), 0.0);
  EXPECT_EQ(g.at(0), 1.0);
}

TEST(Augment, BrightnessAndContrast) {
  const Tensor x = ramp(1, 1, 3, 3);
  const Tensor b = adjust_brightness(x, 1.5);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(b.at(i), 1.5 * x.at(i));
  const Tensor c = adjust_contrast(x, 1.0);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(c.at(i), x.at(i), 1e-15);
  const Tensor flat = adjust_contrast(x, 0.0);
  for (std::size_t i = 1; i < 9; ++i) EXPECT_NEAR(flat.at(i), flat.at(0), 1e-15);
  const Tensor leaf = x.detach_leaf();
  const Tensor g = grad(sum(adjust_brightness(leaf, 0.7)), {leaf})[0];
  for (double v : g.to_vector()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Augment, CutoutMasks) {
  const Tensor hard = cutout_mask(8, 8, 0.5, 0.5, 0.25, 1.0, true);
  double zeros = 0.0;
  for (double v : hard.to_vector()) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    zeros += v == 0.0;
  }
  EXPECT_EQ(zeros, 4.0);
  const Tensor soft = cutout_mask(8, 8, 0.5, 0.5, 0.25, 1.0, false);
  for (double v : soft.to_vector()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Augment, GradientFlowsThroughFullPipeline) {
  AugmentationSpec spec;
  spec.cutout = true;
  const AugmentDraw draw{false, 1, -1, 1.1, 0.9, 0.4, 0.6};
  std::mt19937_64 rng(3);
  const Tensor w = random_tensor({2, 1, 6, 6}, rng);
  auto f = [&](const Tensor& x) { return sum(mul(apply_augmentation(x, spec, draw), w)); };
  EXPECT_LT(gradcheck(f, random_tensor({2, 1, 6, 6}, rng, 0, 1)), 1e-6);
}

TEST(Augment, DeterministicPerSeed) {
  AugmentationSpec spec;
  spec.flip = true;
  spec.cutout = true;
  const Tensor x = ramp(3, 1, 6, 6);
  AugmentRng a(9), b(9);
  const auto pa = augment_pair(x, spec, a);
  const auto pb = augment_pair(x, spec, b);
  EXPECT_EQ(pa.first.to_vector(), pb.first.to_vector());
  EXPECT_EQ(pa.second.to_vector(), pb.second.to_vector());
  EXPECT_NE(pa.first.to_vector(), pa.second.to_vector());
}

TEST(Augment, SameDrawAcrossBatch) {
  AugmentationSpec spec;
  spec.flip = true;
  const Tensor x = ramp(3, 1, 6, 6);
  const AugmentDraw draw = [] {
    AugmentRng rng(5);
    AugmentationSpec s;
    s.flip = true;
    return sample_draw(s, rng);
  }();
  const Tensor whole = apply_augmentation(x, spec, draw);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::vector<std::size_t> row{i};
    const Tensor part = apply_augmentation(index_select(x, row), spec, draw);
    for (std::size_t p = 0; p < 36; ++p) EXPECT_DOUBLE_EQ(part.at(p), whole.at(i * 36 + p));
  }
}

TEST(Augment, SpecValidation) {
  AugmentationSpec s;
  s.contrast_low = 1.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}
