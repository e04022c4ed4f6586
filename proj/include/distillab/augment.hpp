#pragma once

#include <cstdint>
#include <random>
#include <utility>

#include "distillab/tensor.hpp"

namespace distillab {

/// Differentiable image augmentations in the DSA style: one parameter draw
/// is shared by every image of a batch, and every op is differentiable with
/// respect to the input pixels.
struct AugmentationSpec {
  bool flip = false;
  bool shift = true;
  bool brightness = true;
  bool contrast = true;
  bool cutout = false;

  std::size_t max_shift = 2;
  double brightness_delta = 0.2;  // factor in [1 - delta, 1 + delta]
  double contrast_low = 0.8;
  double contrast_high = 1.2;
  double cutout_fraction = 0.25;  // side of the cut square relative to the image
  double cutout_softness = 1.0;   // edge width in pixels of the smooth mask
  bool hard_cutout = false;

  static AugmentationSpec none();
  bool any() const { return flip || shift || brightness || contrast || cutout; }
  void validate() const;
};

/// One sampled set of augmentation parameters.
struct AugmentDraw {
  bool flip = false;
  int dx = 0;
  int dy = 0;
  double brightness = 1.0;
  double contrast = 1.0;
  double cutout_u = 0.5;  // mask centre as a fraction of width
  double cutout_v = 0.5;  // and of height
};

using AugmentRng = std::mt19937_64;

/// Draws every enabled op's parameters, always consuming the same number of
/// variates for a given spec.
AugmentDraw sample_draw(const AugmentationSpec& spec, AugmentRng& rng);
Tensor apply_augmentation(const Tensor& x, const AugmentationSpec& spec, const AugmentDraw& draw);
/// Two independent draws applied to the same batch.
std::pair<Tensor, Tensor> augment_pair(const Tensor& x, const AugmentationSpec& spec,
                                       AugmentRng& rng);
Tensor augment(const Tensor& x, const AugmentationSpec& spec, AugmentRng& rng);

/// Mirror along the width axis.
Tensor flip_horizontal(const Tensor& x);
/// Zero-pad by `max_shift`, translate by (dx, dy), crop back to H x W. A
/// positive dx moves content to the right.
Tensor shift_crop(const Tensor& x, int dx, int dy, std::size_t max_shift);
Tensor adjust_brightness(const Tensor& x, double factor);
/// (x - m) * factor + m where m is the per-image mean.
Tensor adjust_contrast(const Tensor& x, double factor);
/// Square mask of side `fraction` * min(H, W) centred at (cx, cy). The soft
/// mask ramps linearly over `softness` pixels; the hard mask is binary.
Tensor cutout_mask(std::size_t height, std::size_t width, double cx, double cy, double fraction,
                   double softness, bool hard);
Tensor apply_cutout(const Tensor& x, const Tensor& mask);

}  // namespace distillab
