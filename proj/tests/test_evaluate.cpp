#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "distillab/distill.hpp"
#include "distillab/evaluate.hpp"
#include "fixtures.hpp"

using namespace distillab;
using namespace distillab::testing;

namespace {

struct Toy {
  LabeledDataset train, test;
  ModelSpec spec;
};

Toy small_toy() {
  ToyOptions o;
  o.height = 8;
  o.width = 8;
  o.per_class = 20;
  o.noise_sigma = 0.3;
  o.seed = 1;
  Toy t;
  t.train = make_toy_dataset(o);
  o.seed = 2;
  o.split = Split::test;
  t.test = make_toy_dataset(o);
  t.spec.height = 8;
  t.spec.width = 8;
  t.spec.hidden = {16};
  return t;
}

EvalConfig quick() {
  EvalConfig c;
  c.steps = 30;
  c.baseline_lr = 0.05;
  return c;
}

}  // namespace

TEST(Evaluate, ZeroLogitsGiveChance) {
  const Toy t = small_toy();
  const DatasetScore s = score_dataset(t.spec, Tensor::zeros({param_count(t.spec)}), t.test);
  EXPECT_DOUBLE_EQ(s.accuracy, 0.25);
  EXPECT_NEAR(s.loss, std::log(4.0), 1e-12);
}

TEST(Evaluate, RecordAggregates) {
  const Toy t = small_toy();
  const SyntheticDataset syn = init_synthetic(t.train, 1, SynInit::real_sample, 0.05, 3);
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  const MetricsRecord r = evaluate_distilled(syn, t.test, t.spec, quick(), seeds);
  ASSERT_EQ(r.accuracies.size(), 5u);
  double sum = 0.0;
  for (double a : r.accuracies) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    sum += a;
  }
  EXPECT_EQ(r.mean, sum / 5.0);
  EXPECT_GE(r.std, 0.0);
  EXPECT_LE(r.std, 0.5);
  EXPECT_EQ(r.arch, "mlp");
  EXPECT_EQ(r.ipc, 1u);
}

TEST(Evaluate, DoesNotMutateInput) {
  const Toy t = small_toy();
  SyntheticDataset syn = init_synthetic(t.train, 1, SynInit::real_sample, 0.05, 3);
  std::vector<double> v = syn.images.to_vector();
  v[0] = 1.7;
  syn.images = Tensor::from(syn.images.shape(), v);
  const auto before = encode_distilled(syn);
  evaluate_distilled(syn, t.test, t.spec, quick(), {0});
  EXPECT_EQ(encode_distilled(syn), before);
}

TEST(Evaluate, DeterministicAndCrossArchConsistent) {
  const Toy t = small_toy();
  const SyntheticDataset syn = init_synthetic(t.train, 2, SynInit::real_sample, 0.05, 3);
  ModelSpec conv = t.spec;
  conv.arch = Arch::convnet;
  conv.hidden = {4};
  const auto a = evaluate_distilled(syn, t.test, t.spec, quick(), {0, 1});
  const auto cross = cross_arch_eval(syn, t.test, {t.spec, conv}, quick(), {0, 1});
  ASSERT_EQ(cross.size(), 2u);
  EXPECT_EQ(cross[0].accuracies, a.accuracies);
  EXPECT_EQ(cross[1].arch, "convnet");
}

TEST(Evaluate, RandomBaselineDeterministicAndAboveChance) {
  const Toy t = small_toy();
  const auto a = random_baseline(t.train, 1, t.test, t.spec, quick(), {0, 1, 2});
  const auto b = random_baseline(t.train, 1, t.test, t.spec, quick(), {0, 1, 2});
  EXPECT_EQ(a.accuracies, b.accuracies);
  EXPECT_EQ(a.strategy, "random");
  EXPECT_GT(a.mean, 0.25);
}

TEST(Evaluate, Errors) {
  const Toy t = small_toy();
  const SyntheticDataset syn = init_synthetic(t.train, 1, SynInit::real_sample, 0.05, 3);
  ModelSpec five = t.spec;
  five.num_classes = 5;
  EXPECT_THROW(evaluate_distilled(syn, t.test, five, quick(), {0}), std::invalid_argument);
  EXPECT_THROW(evaluate_distilled(syn, t.test, t.spec, quick(), {0, 0}), std::invalid_argument);
  EXPECT_THROW(evaluate_distilled(syn, t.test, t.spec, quick(), {}), std::invalid_argument);
  SyntheticDataset wild = syn;
  wild.log_lr_syn = Tensor::scalar(700.0);
  EXPECT_THROW(evaluate_distilled(wild, t.test, t.spec, quick(), {0, 1}), EvaluationError);
}

TEST(Evaluate, FailedSeedsExcludedFromMean) {
  MetricsRecord r;
  r.seeds = {0, 1, 2};
  r.accuracies = {0.5, std::nan(""), 0.7};
  r.failed = {false, true, false};
  r.recompute();
  EXPECT_DOUBLE_EQ(r.mean, 0.6);
  EXPECT_NEAR(r.std, 0.1, 1e-15);
  EXPECT_EQ(r.successes(), 2u);
}

TEST(Evaluate, CsvLayout) {
  MetricsRecord r;
  r.dataset = "stripes";
  r.arch = "mlp";
  r.ipc = 1;
  r.strategy = "fusion";
  r.seeds = {3, 4};
  r.accuracies = {0.5, 0.75};
  r.failed = {false, false};
  r.recompute();
  const auto path = std::filesystem::temp_directory_path() / "distillab_test_metrics.csv";
  write_metrics_csv({r, r}, path);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], "dataset,arch,ipc,strategy,row,seed,accuracy,mean,std");
  EXPECT_EQ(lines[1], "stripes,mlp,1,fusion,seed,3,0.5,,");
  EXPECT_EQ(lines[3], "stripes,mlp,1,fusion,mean,,,0.625,0.125");
}
