#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillab/distill.hpp"
#include "distillab/evaluate.hpp"
#include "distillab/expert.hpp"
#include "json.hpp"

namespace distillab {

/// Invalid or unreadable configuration; the CLI exits with code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetSource { toy, idx, cifar };

struct DatasetSection {
  DatasetSource source = DatasetSource::toy;
  std::string name;              // buffer directory tag; defaults per source
  ToyKind toy = ToyKind::stripes;
  std::size_t num_classes = 4;
  std::size_t channels = 1;
  std::size_t height = 14;
  std::size_t width = 14;
  std::size_t per_class = 125;
  std::size_t test_per_class = 125;
  double noise_sigma = 1.0;
  std::uint64_t seed = 1;        // toy train set; the test set uses seed + 1000
  std::string train_images, train_labels, test_images, test_labels;   // idx
  std::vector<std::string> train_files, test_files;                   // cifar

  std::string tag() const;
};

struct TeacherSection {
  std::size_t count = 2;
  TrainConfig train;             // train.seed is replaced per teacher
  DType dtype = DType::float64;
};

struct EvalSection {
  EvalConfig config;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<ModelSpec> models;  // empty: the model section only
  bool random_baseline = true;
};

struct OutputSection {
  std::filesystem::path root = "runs";
  std::filesystem::path distilled;  // empty: derived from root
  std::filesystem::path history;
  std::filesystem::path metrics;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSection dataset;
  ModelSpec model;               // input shape and class count come from the dataset
  TeacherSection teacher;
  DistillConfig distill;
  EvalSection eval;
  OutputSection output;

  std::filesystem::path distilled_path() const;
  std::filesystem::path history_path() const;
  std::filesystem::path metrics_path() const;
  std::filesystem::path teacher_path(std::size_t i) const;
  std::uint64_t teacher_seed(std::size_t i) const { return seed + i; }
};

/// Parse a config document; unknown keys are errors. An empty object gives
/// every default.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
/// The fully resolved config, in the same schema as the input.
nlohmann::json run_config_to_json(const RunConfig& config);

/// 64-bit FNV-1a of a canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

/// Binary PGM (1 channel) or PPM (3 channels); pixels clamped to [0,1] and
/// mapped to round-half-to-even(255 * x).
void write_pnm(const std::filesystem::path& path, const std::vector<double>& chw,
               std::size_t channels, std::size_t height, std::size_t width);
/// Returns the pixels scaled back to [0,1] in CHW order.
std::vector<double> read_pnm(const std::filesystem::path& path, std::size_t& channels,
                             std::size_t& height, std::size_t& width);
std::uint8_t quantize_pixel(double x);

/// Entry point shared by the executable and the tests. Returns the exit code:
/// 0 success, 1 runtime failure, 2 configuration or usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace distillab
