#include "distillab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "distillab/binio.hpp"

namespace distillab {

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::string to_string(ToyKind kind) { return kind == ToyKind::stripes ? "stripes" : "gaussians"; }

ToyKind parse_toy_kind(const std::string& name) {
  if (name == "stripes") return ToyKind::stripes;
  if (name == "gaussians") return ToyKind::gaussians;
  throw DatasetError(DatasetErrorKind::invalid, "unknown toy dataset kind '" + name + "'");
}

std::size_t toy_pattern_count(ToyKind kind) { return kind == ToyKind::stripes ? 8 : 16; }

std::string to_string(SynInit init) { return init == SynInit::real_sample ? "real" : "noise"; }

SynInit parse_syn_init(const std::string& name) {
  if (name == "real" || name == "real-sample") return SynInit::real_sample;
  if (name == "noise") return SynInit::noise;
  throw DatasetError(DatasetErrorKind::invalid, "unknown synthetic init '" + name + "'");
}

LabeledDataset LabeledDataset::make(Tensor images, std::vector<int> labels,
                                    std::size_t num_classes, Split split) {
  LabeledDataset d;
  d.images = std::move(images);
  d.labels = std::move(labels);
  d.num_classes = num_classes;
  d.split = split;
  d.class_index.assign(num_classes, {});
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    const int y = d.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DatasetError(DatasetErrorKind::bad_label,
                         "label " + std::to_string(y) + " at index " + std::to_string(i) +
                             " outside [0, " + std::to_string(num_classes) + ")");
    }
    d.class_index[static_cast<std::size_t>(y)].push_back(i);
  }
  d.validate();
  return d;
}

void LabeledDataset::validate() const {
  if (images.rank() != 4) {
    throw DatasetError(DatasetErrorKind::invalid, "images must be [N x C x H x W]");
  }
  if (images.dim(0) != labels.size()) {
    throw DatasetError(DatasetErrorKind::count_mismatch,
                       std::to_string(images.dim(0)) + " images but " +
                           std::to_string(labels.size()) + " labels");
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DatasetError(DatasetErrorKind::invalid, "image value outside [0,1]");
    }
  }
  std::size_t indexed = 0;
  for (const auto& members : class_index) indexed += members.size();
  if (class_index.size() != num_classes || indexed != labels.size()) {
    throw DatasetError(DatasetErrorKind::invalid, "class index does not partition the samples");
  }
}

// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::string& file) {
  if (offset + 4 > bytes.size()) {
    throw DatasetError(DatasetErrorKind::truncated, file + ": truncated header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  try {
    return read_file_bytes(path);
  } catch (const FormatError& e) {
    throw DatasetError(DatasetErrorKind::io, e.what());
  }
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split,
                        std::size_t num_classes) {
  const auto img = slurp(images_path);
  const auto lbl = slurp(labels_path);
  const std::string img_name = images_path.string();
  const std::string lbl_name = labels_path.string();

  if (read_be32(img, 0, img_name) != 0x00000803) {
    throw DatasetError(DatasetErrorKind::bad_magic, img_name + ": not an IDX image file");
  }
  if (read_be32(lbl, 0, lbl_name) != 0x00000801) {
    throw DatasetError(DatasetErrorKind::bad_magic, lbl_name + ": not an IDX label file");
  }
  const std::size_t n = read_be32(img, 4, img_name);
  const std::size_t h = read_be32(img, 8, img_name);
  const std::size_t w = read_be32(img, 12, img_name);
  const std::size_t n_labels = read_be32(lbl, 4, lbl_name);
  if (img.size() < 16 + n * h * w) {
    throw DatasetError(DatasetErrorKind::truncated, img_name + ": truncated pixel data");
  }
  if (lbl.size() < 8 + n_labels) {
    throw DatasetError(DatasetErrorKind::truncated, lbl_name + ": truncated label data");
  }
  if (n != n_labels) {
    throw DatasetError(DatasetErrorKind::count_mismatch,
                       std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  std::vector<double> pixels(n * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img[16 + i] / 255.0;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = lbl[8 + i];
  return LabeledDataset::make(Tensor::from({n, 1, h, w}, std::move(pixels)), std::move(labels),
                              num_classes, split);
}

LabeledDataset load_cifar_binary(const std::vector<std::filesystem::path>& paths, Split split,
                                 std::size_t num_classes) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    const auto bytes = slurp(path);
    if (bytes.size() % kRecord != 0) {
      throw DatasetError(DatasetErrorKind::bad_size,
                         path.string() + ": size " + std::to_string(bytes.size()) +
                             " is not a multiple of " + std::to_string(kRecord));
    }
    const std::size_t records = bytes.size() / kRecord;
    for (std::size_t r = 0; r < records; ++r) {
      const std::uint8_t* rec = bytes.data() + r * kRecord;
      labels.push_back(rec[0]);
      for (std::size_t i = 0; i < kPixels; ++i) pixels.push_back(rec[1 + i] / 255.0);
    }
  }
  const std::size_t n = labels.size();
  return LabeledDataset::make(Tensor::from({n, 3, 32, 32}, std::move(pixels)), std::move(labels),
                              num_classes, split);
}

LabeledDataset make_toy_dataset(const ToyOptions& o) {
  if (o.num_classes < 2 || o.num_classes > toy_pattern_count(o.kind)) {
    throw DatasetError(DatasetErrorKind::invalid,
                       "toy '" + to_string(o.kind) + "' supports 2.." +
                           std::to_string(toy_pattern_count(o.kind)) + " classes, got " +
                           std::to_string(o.num_classes));
  }
  if (o.channels == 0 || o.height == 0 || o.width == 0 || o.per_class == 0) {
    throw DatasetError(DatasetErrorKind::invalid, "toy dataset with a zero extent");
  }
  if (o.noise_sigma < 0.0) throw DatasetError(DatasetErrorKind::invalid, "negative noise sigma");

  const std::size_t plane = o.height * o.width;
  std::vector<std::vector<double>> patterns(o.num_classes, std::vector<double>(plane));
  for (std::size_t k = 0; k < o.num_classes; ++k) {
    for (std::size_t y = 0; y < o.height; ++y) {
      for (std::size_t x = 0; x < o.width; ++x) {
        const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(o.height);
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(o.width);
        double v;
        if (o.kind == ToyKind::stripes) {
          const double theta = std::numbers::pi * static_cast<double>(k) /
                               static_cast<double>(o.num_classes);
          constexpr double kCycles = 2.0;
          v = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * kCycles *
                                   (fx * std::cos(theta) + fy * std::sin(theta)));
        } else {
          const double cx = (static_cast<double>(k % 4) + 0.5) / 4.0;
          const double cy = (static_cast<double>(k / 4) + 0.5) / 4.0;
          constexpr double kSigma = 0.125;
          const double d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
          v = std::exp(-d2 / (2.0 * kSigma * kSigma));
        }
        patterns[k][y * o.width + x] = v;
      }
    }
  }

  const std::size_t n = o.num_classes * o.per_class;
  std::vector<double> pixels(n * o.channels * plane);
  std::vector<int> labels(n);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % o.num_classes;
    labels[i] = static_cast<int>(k);
    for (std::size_t c = 0; c < o.channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        double v = patterns[k][p];
        if (o.noise_sigma > 0.0) v += o.noise_sigma * noise(rng);
        pixels[(i * o.channels + c) * plane + p] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return LabeledDataset::make(Tensor::from({n, o.channels, o.height, o.width}, std::move(pixels)),
                              std::move(labels), o.num_classes, o.split);
}

void save_dataset(const LabeledDataset& d, const std::filesystem::path& path) {
  nlohmann::json header = {{"kind", "labeled-dataset"},
                           {"shape", d.images.shape()},
                           {"num_classes", d.num_classes},
                           {"split", to_string(d.split)}};
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  write_container(path, "DDLD", std::move(header),
                  {{"images", d.images.to_vector()}, {"labels", std::move(labels)}});
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path, "DDLD");
  try {
    auto shape = c.header.at("shape").get<Shape>();
    std::vector<int> labels;
    for (double v : c.array("labels")) labels.push_back(static_cast<int>(v));
    const Split split = c.header.at("split").get<std::string>() == "test" ? Split::test : Split::train;
    return LabeledDataset::make(Tensor::from(std::move(shape), c.array("images")), std::move(labels),
                                c.header.at("num_classes").get<std::size_t>(), split);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed, e.what());
  } catch (const TensorError& e) {
    throw FormatError(FormatErrorKind::malformed, e.what());
  }
}

// ---------------------------------------------------------------------------

double SyntheticDataset::lr() const { return std::exp(log_lr_syn.item()); }

Tensor SyntheticDataset::label_probs() const { return softmax_rows(soft_labels); }

Tensor SyntheticDataset::clamped_images() const {
  std::vector<double> v = images.to_vector();
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return Tensor::from(images.shape(), std::move(v));
}

SyntheticDataset SyntheticDataset::as_leaves() const {
  SyntheticDataset s = *this;
  s.images = images.detach_leaf();
  s.soft_labels = soft_labels.detach_leaf();
  s.log_lr_syn = log_lr_syn.detach_leaf();
  return s;
}

SyntheticDataset SyntheticDataset::detached() const {
  SyntheticDataset s = *this;
  s.images = images.detach();
  s.soft_labels = soft_labels.detach();
  s.log_lr_syn = log_lr_syn.detach();
  return s;
}

void SyntheticDataset::validate() const {
  if (ipc == 0 || num_classes == 0) throw DatasetError(DatasetErrorKind::invalid, "empty synthetic set");
  if (class_of.size() != ipc * num_classes || images.rank() != 4 ||
      images.dim(0) != class_of.size() || soft_labels.shape() != Shape{class_of.size(), num_classes} ||
      log_lr_syn.numel() != 1) {
    throw DatasetError(DatasetErrorKind::invalid, "inconsistent synthetic dataset shapes");
  }
  std::vector<std::size_t> per_class(num_classes, 0);
  for (int c : class_of) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw DatasetError(DatasetErrorKind::bad_label, "synthetic class out of range");
    }
    ++per_class[static_cast<std::size_t>(c)];
  }
  for (std::size_t count : per_class) {
    if (count != ipc) throw DatasetError(DatasetErrorKind::invalid, "unbalanced synthetic classes");
  }
}

SyntheticDataset init_synthetic(const LabeledDataset& real, std::size_t ipc, SynInit init,
                                double lr_syn_init, std::uint64_t seed, double onehot_logit) {
  if (ipc == 0) throw DatasetError(DatasetErrorKind::invalid, "ipc must be positive");
  if (!(lr_syn_init > 0.0)) throw DatasetError(DatasetErrorKind::invalid, "lr_syn_init must be positive");
  const std::size_t k = real.num_classes;
  for (std::size_t c = 0; c < k; ++c) {
    if (real.class_index[c].size() < ipc) {
      throw DatasetError(DatasetErrorKind::invalid,
                         "class " + std::to_string(c) + " has " +
                             std::to_string(real.class_index[c].size()) + " samples, ipc is " +
                             std::to_string(ipc));
    }
  }
  const std::size_t per_image = real.images.numel() / real.size();
  std::mt19937_64 rng(seed);
  std::vector<double> pixels;
  pixels.reserve(k * ipc * per_image);
  std::vector<int> class_of;
  const auto src = real.images.data();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> members = real.class_index[c];
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < ipc; ++j) {
      class_of.push_back(static_cast<int>(c));
      if (init == SynInit::real_sample) {
        const auto image = src.subspan(members[j] * per_image, per_image);
        pixels.insert(pixels.end(), image.begin(), image.end());
      } else {
        for (std::size_t p = 0; p < per_image; ++p) pixels.push_back(unit(rng));
      }
    }
  }
  Shape shape = real.images.shape();
  shape[0] = k * ipc;
  std::vector<double> labels(k * ipc * k, 0.0);
  for (std::size_t i = 0; i < class_of.size(); ++i) {
    labels[i * k + static_cast<std::size_t>(class_of[i])] = onehot_logit;
  }
  SyntheticDataset syn;
  syn.images = Tensor::from(std::move(shape), std::move(pixels));
  syn.soft_labels = Tensor::from({k * ipc, k}, std::move(labels));
  syn.log_lr_syn = Tensor::scalar(std::log(lr_syn_init));
  syn.ipc = ipc;
  syn.num_classes = k;
  syn.class_of = std::move(class_of);
  return syn;
}

}  // namespace distillab
