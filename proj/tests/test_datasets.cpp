#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "distillab/datasets.hpp"
#include "distillab/expert.hpp"

using namespace distillab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "distillab_test_datasets";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

// Two 2x3 images with labels 1, 0.
void write_idx_fixture(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::uint32_t label_count = 2) {
  std::vector<std::uint8_t> img;
  be32(img, 0x803);
  be32(img, 2);
  be32(img, 2);
  be32(img, 3);
  for (std::uint8_t v : {0x7F, 0, 255, 1, 2, 3, 10, 20, 30, 40, 50, 60}) img.push_back(v);
  std::vector<std::uint8_t> lab;
  be32(lab, 0x801);
  be32(lab, label_count);
  for (std::uint32_t i = 0; i < label_count; ++i) lab.push_back(static_cast<std::uint8_t>(1 - i % 2));
  write_bytes(images, img);
  write_bytes(labels, lab);
}

DatasetErrorKind idx_error(const std::filesystem::path& images, const std::filesystem::path& labels) {
  try {
    load_idx(images, labels, Split::train, 10);
  } catch (const DatasetError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return DatasetErrorKind::invalid;
}

}  // namespace

TEST(Idx, LoadsFixture) {
  const auto im = scratch("a-images.idx"), lb = scratch("a-labels.idx");
  write_idx_fixture(im, lb);
  const LabeledDataset d = load_idx(im, lb, Split::test, 10);
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(d.images.at(0), 127.0 / 255.0);
  EXPECT_DOUBLE_EQ(d.images.at(2), 1.0);
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(d.split, Split::test);
  EXPECT_EQ(d.class_index[1], (std::vector<std::size_t>{0}));
}

TEST(Idx, Errors) {
  const auto im = scratch("b-images.idx"), lb = scratch("b-labels.idx");
  write_idx_fixture(im, lb, 3);
  EXPECT_EQ(idx_error(im, lb), DatasetErrorKind::count_mismatch);

  write_idx_fixture(im, lb);
  auto bytes = read_file_bytes(im);
  bytes[3] = 0x01;
  write_bytes(im, bytes);
  EXPECT_EQ(idx_error(im, lb), DatasetErrorKind::bad_magic);

  write_idx_fixture(im, lb);
  bytes = read_file_bytes(im);
  bytes.resize(bytes.size() - 1);
  write_bytes(im, bytes);
  EXPECT_EQ(idx_error(im, lb), DatasetErrorKind::truncated);

  write_bytes(im, {});
  EXPECT_EQ(idx_error(im, lb), DatasetErrorKind::truncated);
  EXPECT_EQ(idx_error(scratch("missing.idx"), lb), DatasetErrorKind::io);
}

TEST(Cifar, LoadsAndValidates) {
  const auto p = scratch("batch.bin");
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 7;
  rec[1] = 0x7F;  // first red pixel
  rec[1 + 1024] = 255;  // first green pixel
  std::vector<std::uint8_t> two = rec;
  two.insert(two.end(), rec.begin(), rec.end());
  two[3073] = 2;
  write_bytes(p, two);
  const LabeledDataset d = load_cifar_binary({p});
  EXPECT_EQ(d.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(d.labels, (std::vector<int>{7, 2}));
  EXPECT_DOUBLE_EQ(d.images.at(0), 127.0 / 255.0);
  EXPECT_DOUBLE_EQ(d.images.at(1024), 1.0);

  two.pop_back();
  write_bytes(p, two);
  try {
    load_cifar_binary({p});
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.kind(), DatasetErrorKind::bad_size);
  }
  rec[0] = 12;
  write_bytes(p, rec);
  try {
    load_cifar_binary({p});
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.kind(), DatasetErrorKind::bad_label);
  }
}

TEST(Toy, DeterministicBalancedInRange) {
  ToyOptions o;
  o.per_class = 10;
  o.seed = 4;
  const LabeledDataset a = make_toy_dataset(o), b = make_toy_dataset(o);
  EXPECT_EQ(a.images.to_vector(), b.images.to_vector());
  EXPECT_EQ(a.size(), 40u);
  for (const auto& idx : a.class_index) EXPECT_EQ(idx.size(), 10u);
  for (double v : a.images.to_vector()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  o.seed = 5;
  EXPECT_NE(make_toy_dataset(o).images.to_vector(), a.images.to_vector());
}

TEST(Toy, NoiseFreeSamplesAreThePattern) {
  for (ToyKind kind : {ToyKind::stripes, ToyKind::gaussians}) {
    ToyOptions o;
    o.kind = kind;
    o.per_class = 3;
    o.noise_sigma = 0.0;
    const LabeledDataset d = make_toy_dataset(o);
    const std::size_t n = 14 * 14;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t first = d.class_index[static_cast<std::size_t>(d.labels[i])][0];
      for (std::size_t p = 0; p < n; ++p) {
        ASSERT_EQ(d.images.at(i * n + p), d.images.at(first * n + p));
      }
    }
  }
}

TEST(Toy, LinearlySeparable) {
  ToyOptions o;
  o.per_class = 50;
  o.seed = 1;
  const LabeledDataset train = make_toy_dataset(o);
  ModelSpec spec;
  spec.hidden = {};
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 0.1;
  const Trajectory t = train_teacher(train, spec, cfg);
  EXPECT_GE(t.final_train_acc, 0.95);
}

TEST(Toy, Errors) {
  ToyOptions o;
  o.num_classes = 9;
  EXPECT_THROW(make_toy_dataset(o), DatasetError);
  EXPECT_EQ(parse_toy_kind("gaussians"), ToyKind::gaussians);
}

TEST(Synthetic, InitFromReal) {
  ToyOptions o;
  o.per_class = 5;
  const LabeledDataset real = make_toy_dataset(o);
  const SyntheticDataset s = init_synthetic(real, 2, SynInit::real_sample, 0.01, 3);
  EXPECT_EQ(s.size(), 8u);
  EXPECT_NEAR(s.lr(), 0.01, 1e-15);
  const std::size_t n = 14 * 14;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int c = s.class_of[i];
    bool found = false;
    for (std::size_t r : real.class_index[static_cast<std::size_t>(c)]) {
      bool same = true;
      for (std::size_t p = 0; p < n && same; ++p) same = s.images.at(i * n + p) == real.images.at(r * n + p);
      found = found || same;
    }
    EXPECT_TRUE(found) << "synthetic row " << i;
    EXPECT_EQ(s.soft_labels.at(i * 4 + static_cast<std::size_t>(c)), 10.0);
  }
  const Tensor probs = s.label_probs();
  for (std::size_t i = 0; i < s.size(); ++i) {
    double row = 0.0;
    for (std::size_t k = 0; k < 4; ++k) row += probs.at(i * 4 + k);
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  EXPECT_THROW(init_synthetic(real, 6, SynInit::real_sample, 0.01, 3), std::exception);
  const SyntheticDataset noise = init_synthetic(real, 1, SynInit::noise, 0.01, 3);
  for (double v : noise.images.to_vector()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Synthetic, ClampedView) {
  ToyOptions o;
  o.per_class = 2;
  SyntheticDataset s = init_synthetic(make_toy_dataset(o), 1, SynInit::real_sample, 0.01, 0);
  std::vector<double> v = s.images.to_vector();
  v[0] = -0.5;
  v[1] = 1.5;
  s.images = Tensor::from(s.images.shape(), v);
  const Tensor c = s.clamped_images();
  EXPECT_EQ(c.at(0), 0.0);
  EXPECT_EQ(c.at(1), 1.0);
}

TEST(Persistence, LabeledRoundTrip) {
  ToyOptions o;
  o.per_class = 4;
  o.split = Split::test;
  const LabeledDataset d = make_toy_dataset(o);
  const auto p = scratch("toy.ddld");
  save_dataset(d, p);
  const LabeledDataset back = load_dataset(p);
  EXPECT_EQ(back.images.to_vector(), d.images.to_vector());
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.split, Split::test);
  EXPECT_EQ(back.num_classes, 4u);
}
