#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "distillab/cli.hpp"

using namespace distillab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("distillab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = dir_ / "run.json";
    write_config(base_config());
  }
  void TearDown() override { fs::remove_all(dir_); }

  json base_config() const {
    return {{"seed", 3},
            {"dataset", {{"height", 8}, {"width", 8}, {"per_class", 10}, {"test_per_class", 10},
                         {"noise_sigma", 0.3}}},
            {"model", {{"hidden", {16}}}},
            {"teacher", {{"count", 2}, {"epochs", 4}, {"batch_size", 8}}},
            {"distill", {{"iterations", 3}, {"inner_steps", 3}}},
            {"eval", {{"steps", 20}, {"seeds", {0, 1}}}},
            {"output", {{"root", (dir_ / "runs").string()}}}};
  }

  void write_config(const json& j) const { std::ofstream(config_) << j.dump(2); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    for (std::string& a : args) {
      if (a == "@config") a = config_.string();
    }
    return run_cli(args, out_, err_);
  }

  fs::path dir_, config_;
  std::ostringstream out_, err_;
};

std::vector<std::uint8_t> bytes_of(const fs::path& p) { return read_file_bytes(p); }

std::string text_of(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  const RunConfig c = parse_run_config(json::object());
  EXPECT_EQ(c.distill.inner_steps, 20u);
  EXPECT_EQ(c.distill.temperature, 0.1);
  EXPECT_EQ(c.teacher.count, 2u);
  const json j = run_config_to_json(c);
  EXPECT_EQ(run_config_to_json(parse_run_config(j)), j);
  EXPECT_EQ(config_hash(j), config_hash(run_config_to_json(parse_run_config(j))));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_run_config({{"distill", {{"alpah", 0.1}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"distill", {{"augment", {{"rotate", true}}}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"distill", {{"ipc", -1}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"distill", {{"strategy", "both"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"distill", {{"temperature", 0}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"model", 3}}), ConfigError);
}

TEST_F(CliTest, GenTeachersWritesAndRefuses) {
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0) << err_.str();
  const RunConfig cfg = load_run_config(config_);
  EXPECT_TRUE(fs::exists(cfg.teacher_path(0)));
  EXPECT_TRUE(fs::exists(cfg.teacher_path(1)));
  EXPECT_EQ(run({"gen-teachers", "--config", "@config"}), 1);
  EXPECT_NE(err_.str().find("--force"), std::string::npos);
  EXPECT_EQ(run({"gen-teachers", "--config", "@config", "--force"}), 0);
}

TEST_F(CliTest, ConfigAndUsageErrorsExitTwo) {
  std::ofstream(config_) << "{ not json";
  EXPECT_EQ(run({"gen-teachers", "--config", "@config"}), 2);
  EXPECT_NE(err_.str().find("not valid JSON"), std::string::npos);
  write_config({{"unknown", 1}});
  EXPECT_EQ(run({"distill", "--config", "@config"}), 2);
  EXPECT_EQ(run({"distill", "--no-such-flag"}), 2);
  EXPECT_EQ(run({}), 2);
}

TEST_F(CliTest, DistillNeedsTeachers) {
  EXPECT_EQ(run({"distill", "--config", "@config"}), 1);
  EXPECT_NE(err_.str().find("gen-teachers"), std::string::npos);
}

TEST_F(CliTest, DistillDeterministicAndOverridable) {
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0) << err_.str();
  const fs::path a = dir_ / "a.ddsn", b = dir_ / "b.ddsn", z = dir_ / "zero.ddsn";
  ASSERT_EQ(run({"distill", "--config", "@config", "--out", a.string()}), 0) << err_.str();
  const auto first = bytes_of(a);
  ASSERT_EQ(run({"distill", "--config", "@config", "--out", a.string()}), 0);
  EXPECT_EQ(bytes_of(a), first);
  ASSERT_EQ(run({"distill", "--config", "@config", "--out", b.string()}), 0);
  EXPECT_EQ(load_distilled(a).images.to_vector(), load_distilled(b).images.to_vector());
  EXPECT_TRUE(fs::exists(dir_ / "a.history.csv"));

  ASSERT_EQ(run({"distill", "--config", "@config", "--iterations", "0", "--out", z.string()}), 0);
  const RunConfig cfg = load_run_config(config_);
  std::vector<Trajectory> teachers{load_trajectory(cfg.teacher_path(0)),
                                   load_trajectory(cfg.teacher_path(1))};
  ToyOptions o;
  o.height = o.width = 8;
  o.per_class = 10;
  o.noise_sigma = 0.3;
  o.seed = 1;
  DistillConfig dc = cfg.distill;
  const DistillResult init = distill_init(make_toy_dataset(o), teachers, dc);
  EXPECT_EQ(load_distilled(z).images.to_vector(), init.syn.images.to_vector());

  const fs::path t = dir_ / "tm.ddsn", al = dir_ / "alpha0.ddsn";
  ASSERT_EQ(run({"distill", "--config", "@config", "--strategy", "tm_only", "--out", t.string()}), 0);
  ASSERT_EQ(run({"distill", "--config", "@config", "--alpha", "0", "--out", al.string()}), 0);
  EXPECT_EQ(load_distilled(t).images.to_vector(), load_distilled(al).images.to_vector());
  EXPECT_NE(load_distilled(t).images.to_vector(), load_distilled(a).images.to_vector());
}

TEST_F(CliTest, SeedFromEnvironment) {
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0);
  setenv("DISTILLAB_SEED", "7", 1);
  const int code = run({"gen-teachers", "--config", "@config"});
  unsetenv("DISTILLAB_SEED");
  EXPECT_EQ(code, 0) << err_.str();
  EXPECT_NE(out_.str().find("teacher_7.ddtb"), std::string::npos);
  setenv("DISTILLAB_SEED", "x", 1);
  EXPECT_EQ(run({"gen-teachers", "--config", "@config"}), 2);
  unsetenv("DISTILLAB_SEED");
}

TEST_F(CliTest, EvalWritesIdenticalCsvs) {
  json j = base_config();
  j["eval"]["models"] = {{{"arch", "mlp"}, {"hidden", {16}}}, {{"arch", "convnet"}, {"hidden", {4}}}};
  write_config(j);
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0);
  ASSERT_EQ(run({"distill", "--config", "@config"}), 0) << err_.str();
  const fs::path m1 = dir_ / "m1.csv", m2 = dir_ / "m2.csv";
  ASSERT_EQ(run({"eval", "--config", "@config", "--out", m1.string()}), 0) << err_.str();
  ASSERT_EQ(run({"eval", "--config", "@config", "--out", m2.string()}), 0);
  EXPECT_EQ(text_of(m1), text_of(m2));
  // 2 archs x (distilled + random) x (2 seeds + mean row) + header
  std::istringstream lines(text_of(m1));
  std::size_t n = 0;
  for (std::string l; std::getline(lines, l);) ++n;
  EXPECT_EQ(n, 13u);
}

TEST_F(CliTest, EvalClassMismatch) {
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0);
  ASSERT_EQ(run({"distill", "--config", "@config"}), 0);
  json j = base_config();
  j["dataset"]["num_classes"] = 3;
  const fs::path other = dir_ / "three.json";
  std::ofstream(other) << j.dump();
  const RunConfig cfg = load_run_config(config_);
  EXPECT_EQ(run({"eval", "--config", other.string(), "--distilled", cfg.distilled_path().string()}), 1);
  EXPECT_NE(err_.str().find("class-count mismatch"), std::string::npos);
}

TEST_F(CliTest, AblateGridAndResume) {
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0);
  const fs::path csv = dir_ / "ablate.csv";
  ASSERT_EQ(run({"ablate", "--config", "@config", "--grid", "alpha=0,0.01,0.05,0.1", "--out",
                 csv.string(), "--jobs", "2"}),
            0)
      << err_.str();
  std::vector<std::string> lines;
  {
    std::istringstream in(text_of(csv));
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  ASSERT_EQ(lines.size(), 5u);
  // drop one finished cell and resume: only it is recomputed
  {
    std::ofstream o(csv, std::ios::trunc);
    for (std::size_t i = 0; i + 1 < lines.size(); ++i) o << lines[i] << "\n";
  }
  ASSERT_EQ(run({"ablate", "--config", "@config", "--grid", "alpha=0,0.01,0.05,0.1", "--out",
                 csv.string()}),
            0);
  EXPECT_NE(out_.str().find("3 already done"), std::string::npos);
  std::istringstream in(text_of(csv));
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  EXPECT_EQ(n, 5u);

  EXPECT_EQ(run({"ablate", "--config", "@config", "--grid", "strategy=fusion,update", "--out",
                 (dir_ / "s.csv").string()}),
            0);
  EXPECT_EQ(run({"ablate", "--config", "@config"}), 2);
}

TEST_F(CliTest, ExportImages) {
  json j = base_config();
  j["distill"]["ipc"] = 2;
  write_config(j);
  ASSERT_EQ(run({"gen-teachers", "--config", "@config"}), 0);
  ASSERT_EQ(run({"distill", "--config", "@config"}), 0) << err_.str();
  const fs::path out = dir_ / "img";
  ASSERT_EQ(run({"export-images", "--config", "@config", "--out", out.string()}), 0) << err_.str();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file();
  EXPECT_EQ(files, 9u);  // 4 classes x 2 + montage
  EXPECT_TRUE(fs::exists(out / "3_1.pgm"));

  const SyntheticDataset syn = load_distilled(load_run_config(config_).distilled_path());
  std::size_t c = 0, h = 0, w = 0;
  const std::vector<double> back = read_pnm(out / "0_0.pgm", c, h, w);
  EXPECT_EQ(c, 1u);
  EXPECT_EQ(h, 8u);
  const Tensor clamped = syn.clamped_images();
  for (std::size_t p = 0; p < back.size(); ++p) {
    EXPECT_EQ(back[p], quantize_pixel(clamped.at(p)) / 255.0);
  }
  std::size_t mc = 0, mh = 0, mw = 0;
  read_pnm(out / "montage.pgm", mc, mh, mw);
  EXPECT_EQ(mh, 32u);
  EXPECT_EQ(mw, 16u);

  EXPECT_EQ(run({"export-images", "--config", "@config", "--out", (config_ / "sub").string()}), 1);
}

TEST(Pnm, RoundingAndRoundTrip) {
  EXPECT_EQ(quantize_pixel(0.5), 128);
  EXPECT_EQ(quantize_pixel(-0.2), 0);
  EXPECT_EQ(quantize_pixel(1.3), 255);
  const fs::path p = fs::temp_directory_path() / "distillab_test_const.ppm";
  write_pnm(p, std::vector<double>(3 * 2 * 2, 0.5), 3, 2, 2);
  const auto bytes = read_file_bytes(p);
  for (std::size_t i = bytes.size() - 12; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 128);
  std::size_t c = 0, h = 0, w = 0;
  const auto v = read_pnm(p, c, h, w);
  EXPECT_EQ(c, 3u);
  for (double x : v) EXPECT_EQ(x, 128.0 / 255.0);
  fs::remove(p);
}

TEST_F(CliTest, ExportTenClasses) {
  SyntheticDataset syn;
  syn.ipc = 1;
  syn.num_classes = 10;
  syn.images = Tensor::full({10, 1, 3, 3}, 0.5);
  syn.soft_labels = Tensor::zeros({10, 10});
  syn.log_lr_syn = Tensor::scalar(std::log(0.01));
  for (int k = 0; k < 10; ++k) syn.class_of.push_back(k);
  const fs::path set = dir_ / "ten.ddsn", out = dir_ / "ten";
  save_distilled(syn, set);
  ASSERT_EQ(run({"export-images", "--distilled", set.string(), "--out", out.string()}), 0) << err_.str();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file();
  EXPECT_EQ(files, 11u);
  const auto bytes = read_file_bytes(out / "9_0.pgm");
  for (std::size_t i = bytes.size() - 9; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 128);
}
