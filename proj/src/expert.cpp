#include "distillab/expert.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "distillab/optim.hpp"

namespace distillab {

std::size_t Trajectory::index_of(std::size_t epoch) const {
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    if (snapshots[i].epoch == epoch) return i;
  }
  throw std::out_of_range("trajectory has no snapshot at epoch " + std::to_string(epoch));
}

Tensor Trajectory::params_at(std::size_t epoch) const {
  const Snapshot& s = snapshots[index_of(epoch)];
  return Tensor::from({s.params.size()}, s.params);
}

std::size_t Trajectory::last_epoch() const {
  if (snapshots.empty()) throw std::out_of_range("empty trajectory");
  return snapshots.back().epoch;
}

void Trajectory::validate() const {
  if (snapshots.empty() || snapshots.front().epoch != 0) {
    throw std::invalid_argument("trajectory must start with the epoch-0 snapshot");
  }
  const std::size_t n = param_count(spec);
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    if (snapshots[i].params.size() != n) {
      throw std::invalid_argument("snapshot " + std::to_string(i) + " has wrong length");
    }
    if (i > 0 && snapshots[i].epoch <= snapshots[i - 1].epoch) {
      throw std::invalid_argument("snapshot epochs must increase strictly");
    }
  }
}

DatasetScore score_dataset(const ModelSpec& spec, const Tensor& params, const LabeledDataset& data,
                           std::size_t chunk) {
  NoGradGuard no_grad;
  DatasetScore score;
  if (data.size() == 0) return score;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tensor logits = forward(spec, params, index_select(data.images, rows)).logits;
    std::span<const int> labels(data.labels.data() + start, end - start);
    score.loss += softmax_cross_entropy(logits, one_hot(labels, spec.num_classes)).item() *
                  static_cast<double>(end - start);
    correct += static_cast<std::size_t>(
        std::lround(accuracy(logits, labels) * static_cast<double>(end - start)));
  }
  score.loss /= static_cast<double>(data.size());
  score.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return score;
}

Trajectory train_teacher(const LabeledDataset& train, const ModelSpec& spec,
                         const TrainConfig& config, const LabeledDataset* test) {
  if (config.epochs == 0) throw std::invalid_argument("teacher training needs at least one epoch");
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (config.snapshot_interval == 0) throw std::invalid_argument("snapshot interval must be positive");
  if (train.split != Split::train) throw std::invalid_argument("teachers train on a train split");
  if (train.num_classes != spec.num_classes) {
    throw std::invalid_argument("dataset has " + std::to_string(train.num_classes) +
                                " classes, model expects " + std::to_string(spec.num_classes));
  }

  Trajectory traj;
  traj.spec = spec;
  traj.config = config;
  StudentState state = StudentState::start(init_model(spec, config.seed).values);
  traj.snapshots.push_back({0, state.params.to_vector()});

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (std::size_t r : rows) labels.push_back(train.labels[r]);

      Tensor params = state.params.detach_leaf();
      Tensor logits = forward(spec, params, index_select(train.images, rows)).logits;
      Tensor loss = softmax_cross_entropy(logits, one_hot(labels, spec.num_classes));
      if (!std::isfinite(loss.item())) {
        throw TrainingError(epoch, "teacher training diverged in epoch " + std::to_string(epoch));
      }
      Tensor g = grad(loss, {params})[0];
      state = sgd_momentum_step(StudentState{params.detach(), state.velocity, state.step}, g,
                                config.lr, config.momentum);
    }
    if (epoch % config.snapshot_interval == 0 || epoch == config.epochs) {
      traj.snapshots.push_back({epoch, state.params.to_vector()});
    }
  }
  traj.final_train_acc = score_dataset(spec, state.params, train).accuracy;
  if (test) traj.final_test_acc = score_dataset(spec, state.params, *test).accuracy;
  return traj;
}

Tensor teacher_logits(const Trajectory& trajectory, std::size_t epoch, const Tensor& x) {
  NoGradGuard no_grad;
  return forward(trajectory.spec, trajectory.params_at(epoch), x).logits;
}

// ---------------------------------------------------------------------------

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  return {{"arch", to_string(spec.arch)},
          {"channels", spec.channels},
          {"height", spec.height},
          {"width", spec.width},
          {"hidden", spec.hidden},
          {"num_classes", spec.num_classes},
          {"zero_init_head", spec.zero_init_head}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.arch = parse_arch(j.at("arch").get<std::string>());
  spec.channels = j.at("channels").get<std::size_t>();
  spec.height = j.at("height").get<std::size_t>();
  spec.width = j.at("width").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  spec.num_classes = j.at("num_classes").get<std::size_t>();
  spec.zero_init_head = j.value("zero_init_head", false);
  spec.validate();
  return spec;
}

namespace {

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"snapshot_interval", c.snapshot_interval}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.snapshot_interval = j.at("snapshot_interval").get<std::size_t>();
  return c;
}

}  // namespace

void save_trajectory(const Trajectory& trajectory, const std::filesystem::path& path, DType dtype) {
  trajectory.validate();
  const ParamLayout layout = param_layout(trajectory.spec);
  nlohmann::json segments = nlohmann::json::array();
  for (const Segment& s : layout.segments) {
    segments.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.offset}});
  }
  std::vector<std::size_t> epochs;
  std::vector<NamedArray> arrays;
  for (const Snapshot& s : trajectory.snapshots) {
    epochs.push_back(s.epoch);
    arrays.push_back({"epoch_" + std::to_string(s.epoch), s.params});
  }
  nlohmann::json header = {{"kind", "teacher-trajectory"},
                           {"spec", model_spec_to_json(trajectory.spec)},
                           {"train_config", train_config_to_json(trajectory.config)},
                           {"snapshot_count", trajectory.snapshots.size()},
                           {"epochs", epochs},
                           {"segments", segments},
                           {"final_train_acc", trajectory.final_train_acc},
                           {"final_test_acc", trajectory.final_test_acc}};
  write_container(path, "DDTB", std::move(header), arrays, dtype);
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  const Container c = read_container(path, "DDTB");
  Trajectory t;
  try {
    t.spec = model_spec_from_json(c.header.at("spec"));
    t.config = train_config_from_json(c.header.at("train_config"));
    t.final_train_acc = c.header.at("final_train_acc").get<double>();
    t.final_test_acc = c.header.at("final_test_acc").get<double>();
    const auto epochs = c.header.at("epochs").get<std::vector<std::size_t>>();
    if (epochs.size() != c.header.at("snapshot_count").get<std::size_t>()) {
      throw FormatError(FormatErrorKind::malformed, "snapshot count disagrees with epoch list");
    }
    for (std::size_t e : epochs) {
      t.snapshots.push_back({e, c.array("epoch_" + std::to_string(e))});
    }
    t.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed, std::string("bad trajectory header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrorKind::malformed, e.what());
  }
  return t;
}

std::filesystem::path buffer_path(const std::filesystem::path& root, const std::string& dataset,
                                  Arch arch, std::uint64_t seed) {
  return root / "buffers" / dataset / to_string(arch) /
         ("teacher_" + std::to_string(seed) + ".ddtb");
}

}  // namespace distillab
