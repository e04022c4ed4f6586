#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillab/binio.hpp"
#include "distillab/datasets.hpp"
#include "distillab/models.hpp"

namespace distillab {

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.5;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::size_t snapshot_interval = 1;

  bool operator==(const TrainConfig&) const = default;
};

/// Raised when teacher training produces a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct Snapshot {
  std::size_t epoch = 0;
  std::vector<double> params;

  bool operator==(const Snapshot&) const = default;
};

/// Teacher parameters recorded at fixed epoch intervals, starting with the
/// initialization.
struct Trajectory {
  ModelSpec spec;
  TrainConfig config;
  std::vector<Snapshot> snapshots;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;

  /// Position of the snapshot taken at `epoch`; throws if none was recorded.
  std::size_t index_of(std::size_t epoch) const;
  Tensor params_at(std::size_t epoch) const;
  std::size_t last_epoch() const;
  void validate() const;

  bool operator==(const Trajectory&) const = default;
};

/// SGD with momentum on hard labels, shuffled mini-batches from `seed`.
/// `test` (optional) is only used to record final_test_acc.
Trajectory train_teacher(const LabeledDataset& train, const ModelSpec& spec,
                         const TrainConfig& config, const LabeledDataset* test = nullptr);

/// Logits of the snapshot taken at `epoch`.
Tensor teacher_logits(const Trajectory& trajectory, std::size_t epoch, const Tensor& x);

/// Mean hard-label cross-entropy and accuracy of `params` over a dataset.
struct DatasetScore {
  double loss = 0.0;
  double accuracy = 0.0;
};
DatasetScore score_dataset(const ModelSpec& spec, const Tensor& params,
                           const LabeledDataset& data, std::size_t chunk = 256);

void save_trajectory(const Trajectory& trajectory, const std::filesystem::path& path,
                     DType dtype = DType::float64);
Trajectory load_trajectory(const std::filesystem::path& path);

/// buffers/{dataset}/{arch}/teacher_{seed}.ddtb under `root`.
std::filesystem::path buffer_path(const std::filesystem::path& root, const std::string& dataset,
                                  Arch arch, std::uint64_t seed);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

}  // namespace distillab
