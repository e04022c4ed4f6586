#include "distillab/evaluate.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "distillab/expert.hpp"
#include "distillab/optim.hpp"

namespace distillab {

void EvalConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("evaluation needs at least one step");
  if (!(baseline_lr > 0.0)) throw std::invalid_argument("baseline_lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  augment.validate();
}

std::size_t MetricsRecord::successes() const {
  std::size_t n = 0;
  for (bool f : failed) n += !f;
  return n;
}

void MetricsRecord::recompute() {
  const std::size_t n = successes();
  if (n == 0) {
    mean = std = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    if (!failed[i]) s += accuracies[i];
  }
  mean = s / static_cast<double>(n);
  double v = 0.0;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    if (!failed[i]) v += (accuracies[i] - mean) * (accuracies[i] - mean);
  }
  std = std::sqrt(v / static_cast<double>(n));
}

namespace {

double train_and_test_unchecked(const Tensor& images, const Tensor& label_probs, double lr,
                                const LabeledDataset& test, const ModelSpec& spec,
                                const EvalConfig& config, std::uint64_t seed) {
  const std::size_t n = images.dim(0);
  StudentState state = StudentState::start(init_model(spec, seed).values);
  std::seed_seq seq{seed, std::uint64_t{0xe7a1}};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  const bool full = config.batch_size == 0 || config.batch_size >= n;
  const std::size_t bs = full ? n : config.batch_size;

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::iota(order.begin(), order.end(), 0);
    if (!full) std::shuffle(order.begin(), order.end(), rng);
    std::span<const std::size_t> rows(order.data(), bs);
    Tensor x = index_select(images, rows);
    if (config.use_augment) x = augment(x, config.augment, rng);
    const Tensor params = state.params.detach_leaf();
    const Tensor loss =
        softmax_cross_entropy(forward(spec, params, x).logits, index_select(label_probs, rows));
    if (!std::isfinite(loss.item())) return std::numeric_limits<double>::quiet_NaN();
    const Tensor g = grad(loss, {params})[0];
    bool finite = true;
    for (double v : g.data()) finite = finite && std::isfinite(v);
    if (!finite) return std::numeric_limits<double>::quiet_NaN();
    state = sgd_momentum_step(StudentState{params.detach(), state.velocity, state.step}, g, lr,
                              config.momentum);
  }
  for (double v : state.params.data()) {
    if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
  }
  return score_dataset(spec, state.params, test).accuracy;
}

}  // namespace

double train_and_test(const Tensor& images, const Tensor& label_probs, double lr,
                      const LabeledDataset& test, const ModelSpec& spec, const EvalConfig& config,
                      std::uint64_t seed) {
  config.validate();
  if (images.dim(0) == 0 || label_probs.dim(0) != images.dim(0)) {
    throw std::invalid_argument("train_and_test: images and labels disagree");
  }
  try {
    return train_and_test_unchecked(images, label_probs, lr, test, spec, config, seed);
  } catch (const TensorError&) {
    // overflowed parameters trip domain checks inside the tape
    return std::numeric_limits<double>::quiet_NaN();
  }
}

namespace {

void check_seeds(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("evaluation needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("evaluation seeds must be distinct");
  }
}

template <class PerSeed>
MetricsRecord run_seeds(const std::vector<std::uint64_t>& seeds, const ModelSpec& spec,
                        PerSeed per_seed) {
  check_seeds(seeds);
  const auto t0 = std::chrono::steady_clock::now();
  MetricsRecord r;
  r.arch = to_string(spec.arch);
  r.seeds = seeds;
  for (std::uint64_t s : seeds) {
    const double acc = per_seed(s);
    r.accuracies.push_back(acc);
    r.failed.push_back(!std::isfinite(acc));
  }
  r.recompute();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (r.successes() == 0) throw EvaluationError("training diverged for every evaluation seed");
  return r;
}

}  // namespace

MetricsRecord evaluate_distilled(const SyntheticDataset& syn, const LabeledDataset& test,
                                 const ModelSpec& spec, const EvalConfig& config,
                                 const std::vector<std::uint64_t>& seeds) {
  syn.validate();
  if (syn.num_classes != test.num_classes || spec.num_classes != test.num_classes) {
    throw std::invalid_argument("class count mismatch: distilled " + std::to_string(syn.num_classes) +
                                ", test " + std::to_string(test.num_classes) + ", model " +
                                std::to_string(spec.num_classes));
  }
  Tensor images, probs;
  {
    NoGradGuard no_grad;
    images = syn.clamped_images().detach();
    probs = syn.label_probs().detach();
  }
  const double lr = syn.lr();
  MetricsRecord r = run_seeds(seeds, spec, [&](std::uint64_t s) {
    return train_and_test(images, probs, lr, test, spec, config, s);
  });
  r.ipc = syn.ipc;
  return r;
}

MetricsRecord random_baseline(const LabeledDataset& real, std::size_t ipc,
                              const LabeledDataset& test, const ModelSpec& spec,
                              const EvalConfig& config, const std::vector<std::uint64_t>& seeds) {
  if (real.num_classes != test.num_classes || spec.num_classes != test.num_classes) {
    throw std::invalid_argument("class count mismatch between real, test and model");
  }
  MetricsRecord r = run_seeds(seeds, spec, [&](std::uint64_t s) {
    const SyntheticDataset pick =
        init_synthetic(real, ipc, SynInit::real_sample, config.baseline_lr, s);
    const Tensor labels = one_hot(pick.class_of, real.num_classes);
    return train_and_test(pick.images, labels, config.baseline_lr, test, spec, config, s);
  });
  r.ipc = ipc;
  r.strategy = "random";
  return r;
}

std::vector<MetricsRecord> cross_arch_eval(const SyntheticDataset& syn, const LabeledDataset& test,
                                           const std::vector<ModelSpec>& specs,
                                           const EvalConfig& config,
                                           const std::vector<std::uint64_t>& seeds) {
  std::vector<MetricsRecord> out;
  for (const ModelSpec& spec : specs) out.push_back(evaluate_distilled(syn, test, spec, config, seeds));
  return out;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "dataset,arch,ipc,strategy,row,seed,accuracy,mean,std\n";
  char buf[512];
  for (const MetricsRecord& r : records) {
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%s,seed,%llu,%.17g,,\n", r.dataset.c_str(),
                    r.arch.c_str(), r.ipc, r.strategy.c_str(),
                    static_cast<unsigned long long>(r.seeds[i]), r.accuracies[i]);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%s,mean,,,%.17g,%.17g\n", r.dataset.c_str(),
                  r.arch.c_str(), r.ipc, r.strategy.c_str(), r.mean, r.std);
    out << buf;
  }
}

}  // namespace distillab
