#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillab/tensor.hpp"

namespace distillab {

enum class DatasetErrorKind { io, bad_magic, truncated, count_mismatch, bad_label, bad_size, invalid };

class DatasetError : public std::runtime_error {
 public:
  DatasetError(DatasetErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DatasetErrorKind kind() const { return kind_; }

 private:
  DatasetErrorKind kind_;
};

enum class Split { train, test };

std::string to_string(Split split);

/// Images in [0,1] as [N x C x H x W] with integer labels in [0, K).
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;
  /// class id -> sample indices, ascending.
  std::vector<std::vector<std::size_t>> class_index;

  static LabeledDataset make(Tensor images, std::vector<int> labels, std::size_t num_classes,
                             Split split);

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  void validate() const;
};

/// MNIST-style IDX pair (magics 0x00000803 / 0x00000801).
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split = Split::train,
                        std::size_t num_classes = 10);

/// CIFAR-10 binary batches: 3073-byte records (label, 3x32x32 channel-major).
LabeledDataset load_cifar_binary(const std::vector<std::filesystem::path>& paths,
                                 Split split = Split::train, std::size_t num_classes = 10);

enum class ToyKind { stripes, gaussians };

std::string to_string(ToyKind kind);
ToyKind parse_toy_kind(const std::string& name);
/// How many classes a toy generator can tell apart.
std::size_t toy_pattern_count(ToyKind kind);

struct ToyOptions {
  ToyKind kind = ToyKind::stripes;
  std::size_t num_classes = 4;
  std::size_t channels = 1;
  std::size_t height = 14;
  std::size_t width = 14;
  std::size_t per_class = 125;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

/// Class k is a fixed pattern (oriented sinusoidal stripes, or a Gaussian
/// blob at one of 16 grid positions) plus i.i.d. Gaussian pixel noise,
/// clipped to [0,1]. Samples are interleaved by class.
LabeledDataset make_toy_dataset(const ToyOptions& options);

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// The learnable distillation state. `soft_labels` are unnormalized logits;
/// consumers see softmax rows. The inner learning rate is exp(log_lr_syn).
struct SyntheticDataset {
  Tensor images;       // [(K*ipc) x C x H x W]
  Tensor soft_labels;  // [(K*ipc) x K]
  Tensor log_lr_syn;   // scalar
  std::size_t ipc = 0;
  std::size_t num_classes = 0;
  std::vector<int> class_of;

  std::size_t size() const { return class_of.size(); }
  double lr() const;
  /// Rows of softmax(soft_labels); each sums to 1.
  Tensor label_probs() const;
  /// Images clamped to [0,1] (export/evaluation view).
  Tensor clamped_images() const;
  /// Copy whose images, labels and log_lr_syn are fresh gradient leaves.
  SyntheticDataset as_leaves() const;
  SyntheticDataset detached() const;
  void validate() const;
};

enum class SynInit { real_sample, noise };

std::string to_string(SynInit init);
SynInit parse_syn_init(const std::string& name);

/// Pick `ipc` distinct real images per class (or uniform noise). Soft labels
/// start as `onehot_logit` on the true class and 0 elsewhere.
SyntheticDataset init_synthetic(const LabeledDataset& real, std::size_t ipc, SynInit init,
                                double lr_syn_init, std::uint64_t seed,
                                double onehot_logit = 10.0);

}  // namespace distillab
