#include "distillab/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace distillab {

AugmentationSpec AugmentationSpec::none() {
  AugmentationSpec s;
  s.flip = s.shift = s.brightness = s.contrast = s.cutout = false;
  return s;
}

void AugmentationSpec::validate() const {
  if (!(brightness_delta >= 0.0 && brightness_delta < 1.0)) {
    throw std::invalid_argument("brightness_delta must lie in [0, 1)");
  }
  if (!(contrast_low > 0.0 && contrast_low <= contrast_high)) {
    throw std::invalid_argument("contrast range must satisfy 0 < low <= high");
  }
  if (!(cutout_fraction > 0.0 && cutout_fraction <= 1.0)) {
    throw std::invalid_argument("cutout_fraction must lie in (0, 1]");
  }
  if (!(cutout_softness > 0.0)) throw std::invalid_argument("cutout_softness must be positive");
}

namespace {

void require_images(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw TensorError(std::string(op) + ": expected [B x C x H x W], got " + to_string(x.shape()));
  }
}

}  // namespace

AugmentDraw sample_draw(const AugmentationSpec& spec, AugmentRng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u_flip = unit(rng);
  const double u_dx = unit(rng);
  const double u_dy = unit(rng);
  const double u_bright = unit(rng);
  const double u_contrast = unit(rng);
  const double u_cx = unit(rng);
  const double u_cy = unit(rng);

  AugmentDraw d;
  const auto span = static_cast<double>(2 * spec.max_shift + 1);
  const auto to_shift = [&](double u) {
    return std::min(static_cast<int>(u * span), static_cast<int>(2 * spec.max_shift)) -
           static_cast<int>(spec.max_shift);
  };
  if (spec.flip) d.flip = u_flip < 0.5;
  if (spec.shift) {
    d.dx = to_shift(u_dx);
    d.dy = to_shift(u_dy);
  }
  if (spec.brightness) d.brightness = 1.0 - spec.brightness_delta + 2.0 * spec.brightness_delta * u_bright;
  if (spec.contrast) {
    d.contrast = spec.contrast_low + (spec.contrast_high - spec.contrast_low) * u_contrast;
  }
  if (spec.cutout) {
    d.cutout_u = u_cx;
    d.cutout_v = u_cy;
  }
  return d;
}

Tensor apply_augmentation(const Tensor& x, const AugmentationSpec& spec, const AugmentDraw& draw) {
  require_images(x, "augment");
  Tensor out = x;
  if (spec.brightness) out = adjust_brightness(out, draw.brightness);
  if (spec.contrast) out = adjust_contrast(out, draw.contrast);
  if (spec.shift && (draw.dx != 0 || draw.dy != 0)) {
    out = shift_crop(out, draw.dx, draw.dy, spec.max_shift);
  }
  if (spec.flip && draw.flip) out = flip_horizontal(out);
  if (spec.cutout) {
    const auto h = static_cast<double>(x.dim(2));
    const auto w = static_cast<double>(x.dim(3));
    out = apply_cutout(out, cutout_mask(x.dim(2), x.dim(3), draw.cutout_u * w, draw.cutout_v * h,
                                        spec.cutout_fraction, spec.cutout_softness,
                                        spec.hard_cutout));
  }
  return out;
}

std::pair<Tensor, Tensor> augment_pair(const Tensor& x, const AugmentationSpec& spec,
                                       AugmentRng& rng) {
  const AugmentDraw first = sample_draw(spec, rng);
  const AugmentDraw second = sample_draw(spec, rng);
  return {apply_augmentation(x, spec, first), apply_augmentation(x, spec, second)};
}

Tensor augment(const Tensor& x, const AugmentationSpec& spec, AugmentRng& rng) {
  return apply_augmentation(x, spec, sample_draw(spec, rng));
}

Tensor flip_horizontal(const Tensor& x) {
  require_images(x, "flip_horizontal");
  const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2);
  const std::size_t w = x.dim(3);
  auto index = std::make_shared<std::vector<std::int64_t>>(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      (*index)[r * w + c] = static_cast<std::int64_t>(r * w + (w - 1 - c));
    }
  }
  return gather(x, std::move(index), x.shape());
}

Tensor shift_crop(const Tensor& x, int dx, int dy, std::size_t max_shift) {
  require_images(x, "shift_crop");
  const auto limit = static_cast<int>(max_shift);
  if (std::abs(dx) > limit || std::abs(dy) > limit) {
    throw TensorError("shift_crop: shift (" + std::to_string(dx) + ", " + std::to_string(dy) +
                      ") exceeds padding " + std::to_string(max_shift));
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const auto h = static_cast<int>(x.dim(2));
  const auto w = static_cast<int>(x.dim(3));
  auto index = std::make_shared<std::vector<std::int64_t>>(x.numel());
  std::size_t pos = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < h; ++y) {
      for (int c = 0; c < w; ++c) {
        const int sy = y - dy;
        const int sx = c - dx;
        (*index)[pos++] = (sy < 0 || sx < 0 || sy >= h || sx >= w)
                              ? -1
                              : static_cast<std::int64_t>(p * static_cast<std::size_t>(h * w) +
                                                          static_cast<std::size_t>(sy * w + sx));
      }
    }
  }
  return gather(x, std::move(index), x.shape());
}

Tensor adjust_brightness(const Tensor& x, double factor) { return scale(x, factor); }

Tensor adjust_contrast(const Tensor& x, double factor) {
  require_images(x, "adjust_contrast");
  Tensor flat = flatten_rows(x);
  const std::size_t cols = flat.dim(1);
  Tensor means = repeat_cols(scale(row_sum(flat), 1.0 / static_cast<double>(cols)), cols);
  Tensor out = add(scale(flat, factor), scale(means, 1.0 - factor));
  return reshape(out, x.shape());
}

Tensor cutout_mask(std::size_t height, std::size_t width, double cx, double cy, double fraction,
                   double softness, bool hard) {
  const double half = 0.5 * fraction * static_cast<double>(std::min(height, width));
  const auto weight = [&](double pos, double centre) {
    const double d = std::abs(pos - centre);
    if (hard) return d <= half ? 1.0 : 0.0;
    return std::clamp((half + 0.5 * softness - d) / softness, 0.0, 1.0);
  };
  std::vector<double> mask(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double wy = weight(static_cast<double>(y) + 0.5, cy);
      const double wx = weight(static_cast<double>(x) + 0.5, cx);
      mask[y * width + x] = 1.0 - wy * wx;
    }
  }
  return Tensor::from({height, width}, std::move(mask));
}

Tensor apply_cutout(const Tensor& x, const Tensor& mask) {
  require_images(x, "apply_cutout");
  if (mask.shape() != Shape{x.dim(2), x.dim(3)}) {
    throw TensorError("apply_cutout: mask " + to_string(mask.shape()) + " does not match image");
  }
  const std::size_t plane = mask.numel();
  const auto m = mask.data();
  std::vector<double> full(x.numel());
  for (std::size_t i = 0; i < full.size(); ++i) full[i] = m[i % plane];
  return mul(x, Tensor::from(x.shape(), std::move(full)));
}

}  // namespace distillab
