#pragma once

// Small shared setups for the distillation and evaluation tests.

#include <random>
#include <vector>

#include "distillab/distill.hpp"
#include "distillab/expert.hpp"

namespace distillab::testing {

/// Two well separated clusters of 2-pixel "images" in [0, 1].
inline LabeledDataset two_cluster_points(std::size_t per_class, std::uint64_t seed,
                                         Split split = Split::train) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.08);
  const double centre[2][2] = {{0.25, 0.7}, {0.75, 0.3}};
  std::vector<double> pixels;
  std::vector<int> labels;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int k = 0; k < 2; ++k) {
      for (int d = 0; d < 2; ++d) {
        pixels.push_back(std::clamp(centre[k][d] + noise(rng), 0.0, 1.0));
      }
      labels.push_back(k);
    }
  }
  return LabeledDataset::make(Tensor::from({2 * per_class, 1, 1, 2}, std::move(pixels)),
                              std::move(labels), 2, split);
}

/// mlp 2-8-2.
inline ModelSpec tiny_mlp() {
  ModelSpec spec;
  spec.arch = Arch::mlp;
  spec.channels = 1;
  spec.height = 1;
  spec.width = 2;
  spec.hidden = {8};
  spec.num_classes = 2;
  return spec;
}

inline Trajectory tiny_teacher(std::uint64_t seed = 3, std::size_t epochs = 4) {
  TrainConfig cfg;
  cfg.lr = 0.2;
  cfg.momentum = 0.5;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return train_teacher(two_cluster_points(20, seed + 100), tiny_mlp(), cfg);
}

/// Brightness and contrast only: smooth in the pixels and valid for 1x2 images.
inline AugmentationSpec photometric_only() {
  AugmentationSpec a = AugmentationSpec::none();
  a.brightness = true;
  a.contrast = true;
  return a;
}

inline DistillConfig tiny_distill_config(std::size_t inner_steps = 2) {
  DistillConfig c;
  c.inner_steps = inner_steps;
  c.expert_epochs = 2;
  c.t_min = 0;
  c.t_max = 1;
  c.ipc = 2;
  c.proj_dim = 4;
  c.lr_syn_init = 0.1;
  c.augment = photometric_only();
  c.iterations = 3;
  c.lr_img = 1.0;
  c.seed = 9;
  return c;
}

}  // namespace distillab::testing
