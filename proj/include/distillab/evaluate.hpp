#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillab/augment.hpp"
#include "distillab/datasets.hpp"
#include "distillab/models.hpp"

namespace distillab {

struct EvalConfig {
  std::size_t steps = 300;        // SGD steps per trained network
  std::size_t batch_size = 0;     // 0: the whole training set each step
  double momentum = 0.5;
  bool use_augment = true;
  AugmentationSpec augment;
  double baseline_lr = 0.01;      // learning rate for sets without a learned one

  void validate() const;
};

/// Test accuracies of freshly initialized networks, one per seed.
struct MetricsRecord {
  std::string dataset;
  std::string arch;
  std::size_t ipc = 0;
  std::string strategy;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;  // NaN where that seed failed
  std::vector<bool> failed;
  double mean = 0.0;
  double std = 0.0;                // population standard deviation
  double seconds = 0.0;

  /// Mean and std over the seeds that did not fail.
  void recompute();
  std::size_t successes() const;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Train one network from init_model(spec, seed) on (images, label
/// probabilities) with constant lr and return its test accuracy, or NaN if
/// the training loss became non-finite.
double train_and_test(const Tensor& images, const Tensor& label_probs, double lr,
                      const LabeledDataset& test, const ModelSpec& spec, const EvalConfig& config,
                      std::uint64_t seed);

/// Clamped images, softmax soft labels, lr = the learned alpha_syn.
MetricsRecord evaluate_distilled(const SyntheticDataset& syn, const LabeledDataset& test,
                                 const ModelSpec& spec, const EvalConfig& config,
                                 const std::vector<std::uint64_t>& seeds);

/// `ipc` random real images per class with one-hot labels, a fresh selection
/// per seed, lr = config.baseline_lr.
MetricsRecord random_baseline(const LabeledDataset& real, std::size_t ipc,
                              const LabeledDataset& test, const ModelSpec& spec,
                              const EvalConfig& config, const std::vector<std::uint64_t>& seeds);

std::vector<MetricsRecord> cross_arch_eval(const SyntheticDataset& syn, const LabeledDataset& test,
                                           const std::vector<ModelSpec>& specs,
                                           const EvalConfig& config,
                                           const std::vector<std::uint64_t>& seeds);

/// Columns: dataset,arch,ipc,strategy,row,seed,accuracy,mean,std.
/// One row per seed (row=seed) then one aggregate row (row=mean, seed empty).
/// Wall-clock time is left out so repeated runs give identical files.
void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);

}  // namespace distillab
