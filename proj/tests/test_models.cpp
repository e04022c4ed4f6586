#include <gtest/gtest.h>

#include <cmath>

#include "distillab/models.hpp"
#include "gradcheck.hpp"

using namespace distillab;
using namespace distillab::testing;

namespace {

ModelSpec mlp_spec(std::vector<std::size_t> hidden = {16, 16}) {
  ModelSpec s;
  s.arch = Arch::mlp;
  s.hidden = std::move(hidden);
  return s;
}

ModelSpec conv_spec() {
  ModelSpec s;
  s.arch = Arch::convnet;
  s.channels = 1;
  s.height = 8;
  s.width = 8;
  s.hidden = {4, 4};
  s.num_classes = 3;
  return s;
}

}  // namespace

TEST(Models, ParameterCounts) {
  const ModelSpec m = mlp_spec();
  EXPECT_EQ(param_count(m), 196 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
  EXPECT_EQ(feature_width(m), 16u);
  const ModelSpec c = conv_spec();
  // two 3x3 conv blocks, 8x8 -> 4x4 -> 2x2
  EXPECT_EQ(param_count(c), 9 * 4 + 4 + 36 * 4 + 4 + 16 * 3 + 3);
  EXPECT_EQ(feature_width(c), 16u);
  EXPECT_EQ(param_layout(m).find("head.weight").shape, (Shape{16, 4}));
}

TEST(Models, InitDeterministicAndBounded) {
  const ModelSpec m = mlp_spec({64});
  const ParamVector a = init_model(m, 5), b = init_model(m, 5), c = init_model(m, 6);
  EXPECT_EQ(a.values.to_vector(), b.values.to_vector());
  EXPECT_NE(a.values.to_vector(), c.values.to_vector());
  const Segment& w = a.layout.find("fc0.weight");
  const double bound = std::sqrt(6.0 / 196.0);
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double v = a.values.at(w.offset + i);
    EXPECT_LE(std::abs(v), bound);
    sum_sq += v * v;
  }
  // uniform(-b, b) has variance b^2 / 3
  EXPECT_NEAR(sum_sq / static_cast<double>(w.size()), bound * bound / 3.0, 0.05 * bound * bound);
  const Segment& bias = a.layout.find("fc0.bias");
  for (std::size_t i = 0; i < bias.size(); ++i) EXPECT_EQ(a.values.at(bias.offset + i), 0.0);
}

TEST(Models, ZeroWeightsGiveZeroLogits) {
  const ModelSpec m = mlp_spec();
  std::mt19937_64 rng(1);
  const ForwardResult r =
      forward(m, Tensor::zeros({param_count(m)}), random_tensor({3, 1, 14, 14}, rng, 0, 1));
  for (double v : r.logits.to_vector()) EXPECT_EQ(v, 0.0);
  ModelSpec z = m;
  z.zero_init_head = true;
  const ForwardResult zr = forward(z, init_model(z, 2), random_tensor({3, 1, 14, 14}, rng, 0, 1));
  for (double v : zr.logits.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Models, BatchRowsIndependent) {
  for (const ModelSpec& spec : {mlp_spec(), conv_spec()}) {
    std::mt19937_64 rng(2);
    const ParamVector p = init_model(spec, 3);
    const Tensor x = random_tensor({4, spec.channels, spec.height, spec.width}, rng, 0, 1);
    const Tensor all = forward(spec, p, x).logits;
    const std::vector<std::size_t> one{2};
    const Tensor single = forward(spec, p, index_select(x, one)).logits;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      EXPECT_NEAR(all.at(2 * spec.num_classes + k), single.at(k), 1e-14);
    }
  }
}

TEST(Models, InputGradientMatchesFiniteDifferences) {
  ModelSpec s;
  s.height = 1;
  s.width = 2;
  s.hidden = {8};
  s.num_classes = 2;
  std::mt19937_64 rng(4);
  const ParamVector p = init_model(s, 7);
  const Tensor w = random_tensor({3, 2}, rng);
  auto f = [&](const Tensor& x) { return sum(mul(forward(s, p, x).logits, w)); };
  EXPECT_LT(gradcheck(f, random_tensor({3, 1, 1, 2}, rng, 0.1, 0.9)), 1e-6);
}

TEST(Models, ConvnetParameterGradient) {
  const ModelSpec s = conv_spec();
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  auto f = [&](const Tensor& p) { return sum(square(forward(s, p, x).logits)); };
  EXPECT_LT(gradcheck(f, init_model(s, 1).values), 1e-6);
}

TEST(Models, ConvnetSeesTranslation) {
  const ModelSpec s = conv_spec();
  std::vector<double> a(64, 0.0), b(64, 0.0);
  a[9] = 1.0;
  b[54] = 1.0;
  const ParamVector p = init_model(s, 1);
  const Tensor la = forward(s, p, Tensor::from({1, 1, 8, 8}, a)).logits;
  const Tensor lb = forward(s, p, Tensor::from({1, 1, 8, 8}, b)).logits;
  EXPECT_NE(la.to_vector(), lb.to_vector());
}

TEST(Models, ProjectionHead) {
  const ProjectionHead h = init_projection_head(16, 32, 3);
  EXPECT_EQ(h.in, 16u);
  EXPECT_EQ(h.hidden, 16u);
  EXPECT_EQ(h.params.numel(), h.layout().size);
  std::mt19937_64 rng(6);
  const Tensor feats = random_tensor({5, 16}, rng);
  EXPECT_EQ(project(h, feats).shape(), (Shape{5, 32}));
  auto f = [&](const Tensor& p) { return sum(square(project(h, p, feats))); };
  EXPECT_LT(gradcheck(f, h.params), 1e-6);
}

TEST(Models, FlattenRoundTrip) {
  const ParamVector p = init_model(conv_spec(), 9);
  const ParamVector q = ParamVector::flatten(p.layout, p.unflatten());
  EXPECT_EQ(p.values.to_vector(), q.values.to_vector());
}

TEST(Models, Accuracy) {
  const Tensor logits = Tensor::from({3, 2}, {1, 0, 0, 1, 2, 1});
  const std::vector<int> labels{0, 1, 1};
  EXPECT_NEAR(accuracy(logits, labels), 2.0 / 3.0, 1e-15);
}

TEST(Models, SpecValidation) {
  ModelSpec s;
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_EQ(parse_arch("convnet"), Arch::convnet);
  EXPECT_THROW(parse_arch("resnet"), std::invalid_argument);
}
