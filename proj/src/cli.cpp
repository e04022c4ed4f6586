#include "distillab/cli.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

namespace distillab {

using nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
    }
    try {
      out = v->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class Parse, class T>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string name;
    get(key, name);
    if (!find(key)) return;
    try {
      out = parse(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const { return "'" + path_ + "." + key + "'"; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const json kEmpty = json::object();

const json& child(Section& s, const std::string& key) {
  const json* v = s.find(key);
  return v ? *v : kEmpty;
}

DatasetSource parse_source(const std::string& s) {
  if (s == "toy") return DatasetSource::toy;
  if (s == "idx") return DatasetSource::idx;
  if (s == "cifar") return DatasetSource::cifar;
  throw std::invalid_argument("unknown dataset source '" + s + "' (toy, idx, cifar)");
}

std::string to_string(DatasetSource s) {
  switch (s) {
    case DatasetSource::toy: return "toy";
    case DatasetSource::idx: return "idx";
    case DatasetSource::cifar: return "cifar";
  }
  return "toy";
}

DType parse_dtype(const std::string& s) {
  if (s == "float64") return DType::float64;
  if (s == "float32") return DType::float32;
  throw std::invalid_argument("unknown dtype '" + s + "' (float64, float32)");
}

void parse_augment(const json& j, const std::string& path, AugmentationSpec& a) {
  Section s(j, path);
  s.get("flip", a.flip);
  s.get("shift", a.shift);
  s.get("brightness", a.brightness);
  s.get("contrast", a.contrast);
  s.get("cutout", a.cutout);
  s.get("max_shift", a.max_shift);
  s.get("brightness_delta", a.brightness_delta);
  s.get("contrast_low", a.contrast_low);
  s.get("contrast_high", a.contrast_high);
  s.get("cutout_fraction", a.cutout_fraction);
  s.get("cutout_softness", a.cutout_softness);
  s.get("hard_cutout", a.hard_cutout);
  s.finish();
}

json augment_to_json(const AugmentationSpec& a) {
  return {{"flip", a.flip},
          {"shift", a.shift},
          {"brightness", a.brightness},
          {"contrast", a.contrast},
          {"cutout", a.cutout},
          {"max_shift", a.max_shift},
          {"brightness_delta", a.brightness_delta},
          {"contrast_low", a.contrast_low},
          {"contrast_high", a.contrast_high},
          {"cutout_fraction", a.cutout_fraction},
          {"cutout_softness", a.cutout_softness},
          {"hard_cutout", a.hard_cutout}};
}

void parse_model(const json& j, const std::string& path, ModelSpec& m) {
  Section s(j, path);
  s.get_enum("arch", m.arch, parse_arch);
  s.get("hidden", m.hidden);
  s.get("zero_init_head", m.zero_init_head);
  s.finish();
}

json model_to_json(const ModelSpec& m) {
  return {{"arch", to_string(m.arch)}, {"hidden", m.hidden}, {"zero_init_head", m.zero_init_head}};
}

}  // namespace

std::string DatasetSection::tag() const {
  if (!name.empty()) return name;
  switch (source) {
    case DatasetSource::toy: return to_string(toy);
    case DatasetSource::idx: return "idx";
    case DatasetSource::cifar: return "cifar10";
  }
  return "data";
}

std::filesystem::path RunConfig::distilled_path() const {
  if (!output.distilled.empty()) return output.distilled;
  return output.root / "distilled" /
         (dataset.tag() + "_" + to_string(model.arch) + "_" + to_string(distill.strategy) + "_ipc" +
          std::to_string(distill.ipc) + ".ddsn");
}

std::filesystem::path RunConfig::history_path() const {
  if (!output.history.empty()) return output.history;
  std::filesystem::path p = distilled_path();
  return p.replace_extension(".history.csv");
}

std::filesystem::path RunConfig::metrics_path() const {
  if (!output.metrics.empty()) return output.metrics;
  return output.root / "metrics" / "eval.csv";
}

std::filesystem::path RunConfig::teacher_path(std::size_t i) const {
  return buffer_path(output.root, dataset.tag(), model.arch, teacher_seed(i));
}

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  Section top(doc, "config");
  top.get("seed", c.seed);
  {
    Section s(child(top, "dataset"), "dataset");
    DatasetSection& d = c.dataset;
    s.get_enum("source", d.source, parse_source);
    s.get("name", d.name);
    s.get_enum("toy", d.toy, parse_toy_kind);
    s.get("num_classes", d.num_classes);
    s.get("channels", d.channels);
    s.get("height", d.height);
    s.get("width", d.width);
    s.get("per_class", d.per_class);
    s.get("test_per_class", d.test_per_class);
    s.get("noise_sigma", d.noise_sigma);
    s.get("seed", d.seed);
    s.get("train_images", d.train_images);
    s.get("train_labels", d.train_labels);
    s.get("test_images", d.test_images);
    s.get("test_labels", d.test_labels);
    s.get("train_files", d.train_files);
    s.get("test_files", d.test_files);
    s.finish();
  }
  parse_model(child(top, "model"), "model", c.model);
  {
    Section s(child(top, "teacher"), "teacher");
    TeacherSection& t = c.teacher;
    s.get("count", t.count);
    s.get("epochs", t.train.epochs);
    s.get("lr", t.train.lr);
    s.get("momentum", t.train.momentum);
    s.get("batch_size", t.train.batch_size);
    s.get("snapshot_interval", t.train.snapshot_interval);
    s.get_enum("dtype", t.dtype, parse_dtype);
    s.finish();
    if (t.count == 0) throw ConfigError("'teacher.count' must be at least 1");
  }
  {
    Section s(child(top, "distill"), "distill");
    DistillConfig& d = c.distill;
    s.get("inner_steps", d.inner_steps);
    s.get("expert_epochs", d.expert_epochs);
    s.get("t_min", d.t_min);
    s.get("t_max", d.t_max);
    s.get_enum("strategy", d.strategy, parse_strategy);
    s.get("alpha", d.alpha);
    s.get("beta", d.beta);
    s.get("lambda", d.lambda);
    s.get("temperature", d.temperature);
    s.get("inner_momentum", d.inner_momentum);
    s.get("lr_img", d.lr_img);
    s.get("lr_label", d.lr_label);
    s.get("lr_lr", d.lr_lr);
    s.get("lr_head", d.lr_head);
    s.get("lr_syn_init", d.lr_syn_init);
    s.get("iterations", d.iterations);
    s.get("batch_syn", d.batch_syn);
    s.get("ipc", d.ipc);
    s.get_enum("init", d.init, parse_syn_init);
    s.get_enum("label_init", d.label_init, parse_label_init);
    s.get("label_epoch", d.label_epoch);
    s.get("onehot_logit", d.onehot_logit);
    s.get("proj_dim", d.proj_dim);
    parse_augment(child(s, "augment"), "distill.augment", d.augment);
    s.finish();
  }
  {
    Section s(child(top, "eval"), "eval");
    EvalSection& e = c.eval;
    s.get("steps", e.config.steps);
    s.get("batch_size", e.config.batch_size);
    s.get("momentum", e.config.momentum);
    s.get("use_augment", e.config.use_augment);
    s.get("baseline_lr", e.config.baseline_lr);
    s.get("seeds", e.seeds);
    s.get("random_baseline", e.random_baseline);
    parse_augment(child(s, "augment"), "eval.augment", e.config.augment);
    if (const json* models = s.find("models")) {
      if (!models->is_array()) throw ConfigError("'eval.models' must be an array");
      for (std::size_t i = 0; i < models->size(); ++i) {
        ModelSpec m;
        parse_model((*models)[i], "eval.models[" + std::to_string(i) + "]", m);
        e.models.push_back(m);
      }
    }
    s.finish();
  }
  {
    Section s(child(top, "output"), "output");
    std::string root = c.output.root.string(), distilled, history, metrics;
    s.get("root", root);
    s.get("distilled", distilled);
    s.get("history", history);
    s.get("metrics", metrics);
    s.finish();
    c.output.root = root;
    c.output.distilled = distilled;
    c.output.history = history;
    c.output.metrics = metrics;
  }
  top.finish();

  c.distill.seed = c.seed;
  try {
    c.distill.validate();
    c.eval.config.validate();
    if (c.eval.seeds.empty()) throw std::invalid_argument("'eval.seeds' must not be empty");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json run_config_to_json(const RunConfig& c) {
  const DatasetSection& d = c.dataset;
  const DistillConfig& k = c.distill;
  json models = json::array();
  for (const ModelSpec& m : c.eval.models) models.push_back(model_to_json(m));
  return {
      {"seed", c.seed},
      {"dataset",
       {{"source", to_string(d.source)}, {"name", d.name}, {"toy", to_string(d.toy)},
        {"num_classes", d.num_classes}, {"channels", d.channels}, {"height", d.height},
        {"width", d.width}, {"per_class", d.per_class}, {"test_per_class", d.test_per_class},
        {"noise_sigma", d.noise_sigma}, {"seed", d.seed}, {"train_images", d.train_images},
        {"train_labels", d.train_labels}, {"test_images", d.test_images},
        {"test_labels", d.test_labels}, {"train_files", d.train_files},
        {"test_files", d.test_files}}},
      {"model", model_to_json(c.model)},
      {"teacher",
       {{"count", c.teacher.count}, {"epochs", c.teacher.train.epochs},
        {"lr", c.teacher.train.lr}, {"momentum", c.teacher.train.momentum},
        {"batch_size", c.teacher.train.batch_size},
        {"snapshot_interval", c.teacher.train.snapshot_interval},
        {"dtype", c.teacher.dtype == DType::float32 ? "float32" : "float64"}}},
      {"distill",
       {{"inner_steps", k.inner_steps}, {"expert_epochs", k.expert_epochs}, {"t_min", k.t_min},
        {"t_max", k.t_max}, {"strategy", to_string(k.strategy)}, {"alpha", k.alpha},
        {"beta", k.beta}, {"lambda", k.lambda}, {"temperature", k.temperature},
        {"inner_momentum", k.inner_momentum}, {"lr_img", k.lr_img}, {"lr_label", k.lr_label},
        {"lr_lr", k.lr_lr}, {"lr_head", k.lr_head}, {"lr_syn_init", k.lr_syn_init},
        {"iterations", k.iterations}, {"batch_syn", k.batch_syn}, {"ipc", k.ipc},
        {"init", to_string(k.init)}, {"label_init", to_string(k.label_init)},
        {"label_epoch", k.label_epoch}, {"onehot_logit", k.onehot_logit},
        {"proj_dim", k.proj_dim}, {"augment", augment_to_json(k.augment)}}},
      {"eval",
       {{"steps", c.eval.config.steps}, {"batch_size", c.eval.config.batch_size},
        {"momentum", c.eval.config.momentum}, {"use_augment", c.eval.config.use_augment},
        {"baseline_lr", c.eval.config.baseline_lr}, {"seeds", c.eval.seeds},
        {"random_baseline", c.eval.random_baseline}, {"models", models},
        {"augment", augment_to_json(c.eval.config.augment)}}},
      {"output",
       {{"root", c.output.root.string()}, {"distilled", c.output.distilled.string()},
        {"history", c.output.history.string()}, {"metrics", c.output.metrics.string()}}}};
}

std::string config_hash(const json& doc) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : doc.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void apply_env_seed(json& doc) {
  const char* env = std::getenv("DISTILLAB_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || env[0] == '-') {
    throw ConfigError(std::string("DISTILLAB_SEED must be a non-negative integer, got '") + env + "'");
  }
  doc["seed"] = static_cast<std::uint64_t>(v);
}

// "alpha" or "section.key"; a bare key names a distill field.
void set_override(json& doc, const std::string& key, const json& value) {
  const auto dot = key.find('.');
  const std::string section = dot == std::string::npos ? "distill" : key.substr(0, dot);
  const std::string field = dot == std::string::npos ? key : key.substr(dot + 1);
  if (section == "seed" || key == "seed") {
    doc["seed"] = value;
    return;
  }
  if (!doc.contains(section)) doc[section] = json::object();
  if (!doc[section].is_object()) throw ConfigError("'" + section + "' must be a JSON object");
  doc[section][field] = value;
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

std::pair<LabeledDataset, LabeledDataset> load_data(const DatasetSection& d) {
  switch (d.source) {
    case DatasetSource::toy: {
      ToyOptions o;
      o.kind = d.toy;
      o.num_classes = d.num_classes;
      o.channels = d.channels;
      o.height = d.height;
      o.width = d.width;
      o.per_class = d.per_class;
      o.noise_sigma = d.noise_sigma;
      o.seed = d.seed;
      LabeledDataset train = make_toy_dataset(o);
      o.per_class = d.test_per_class;
      o.seed = d.seed + 1000;
      o.split = Split::test;
      return {std::move(train), make_toy_dataset(o)};
    }
    case DatasetSource::idx:
      if (d.train_images.empty() || d.test_images.empty()) {
        throw ConfigError("idx datasets need dataset.train_images/train_labels/test_images/test_labels");
      }
      return {load_idx(d.train_images, d.train_labels, Split::train, d.num_classes),
              load_idx(d.test_images, d.test_labels, Split::test, d.num_classes)};
    case DatasetSource::cifar: {
      if (d.train_files.empty() || d.test_files.empty()) {
        throw ConfigError("cifar datasets need dataset.train_files and dataset.test_files");
      }
      std::vector<std::filesystem::path> tr(d.train_files.begin(), d.train_files.end());
      std::vector<std::filesystem::path> te(d.test_files.begin(), d.test_files.end());
      return {load_cifar_binary(tr, Split::train, d.num_classes),
              load_cifar_binary(te, Split::test, d.num_classes)};
    }
  }
  throw ConfigError("unknown dataset source");
}

ModelSpec fit_model(ModelSpec m, const LabeledDataset& data) {
  m.channels = data.channels();
  m.height = data.height();
  m.width = data.width();
  m.num_classes = data.num_classes;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return m;
}

std::vector<Trajectory> load_teachers(const RunConfig& cfg, const ModelSpec& spec) {
  std::vector<Trajectory> teachers;
  for (std::size_t i = 0; i < cfg.teacher.count; ++i) {
    const auto path = cfg.teacher_path(i);
    if (!std::filesystem::exists(path)) {
      throw std::runtime_error("missing teacher buffer " + path.string() +
                               "; run `distillab gen-teachers --config <file>` first");
    }
    teachers.push_back(load_trajectory(path));
    if (!(teachers.back().spec == spec)) {
      throw std::runtime_error("teacher buffer " + path.string() +
                               " was trained for a different model or dataset shape");
    }
  }
  for (const Trajectory& t : teachers) {
    try {
      cfg.distill.validate_for(t);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("distill match range: ") + e.what());
    }
  }
  return teachers;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void print_record(std::ostream& out, const MetricsRecord& r) {
  out << "  " << r.arch << "  " << r.strategy << "  ipc=" << r.ipc << "  acc "
      << fmt("%.4f", r.mean) << " +- " << fmt("%.4f", r.std) << "  (" << r.successes() << "/"
      << r.seeds.size() << " seeds, " << fmt("%.1f", r.seconds) << " s)\n";
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, json>>& overrides,
                  json* resolved = nullptr) {
  json doc = c.config.empty() ? json::object() : read_json_file(c.config);
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  apply_env_seed(doc);
  if (c.seed) doc["seed"] = *c.seed;
  for (const auto& [k, v] : overrides) set_override(doc, k, v);
  RunConfig cfg = parse_run_config(doc);
  if (resolved) *resolved = run_config_to_json(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------

int cmd_gen_teachers(const RunConfig& cfg, bool force, std::ostream& out) {
  auto [train, test] = load_data(cfg.dataset);
  const ModelSpec spec = fit_model(cfg.model, train);
  if (!force) {
    for (std::size_t i = 0; i < cfg.teacher.count; ++i) {
      if (std::filesystem::exists(cfg.teacher_path(i))) {
        throw std::runtime_error(cfg.teacher_path(i).string() +
                                 " already exists; pass --force to overwrite");
      }
    }
  }
  out << "seed  train_acc  test_acc  path\n";
  for (std::size_t i = 0; i < cfg.teacher.count; ++i) {
    TrainConfig tc = cfg.teacher.train;
    tc.seed = cfg.teacher_seed(i);
    const Trajectory t = train_teacher(train, spec, tc, &test);
    save_trajectory(t, cfg.teacher_path(i), cfg.teacher.dtype);
    out << tc.seed << "  " << fmt("%.4f", t.final_train_acc) << "  " << fmt("%.4f", t.final_test_acc)
        << "  " << cfg.teacher_path(i).string() << "\n";
  }
  return 0;
}

int cmd_distill(const RunConfig& cfg, const json& resolved, std::ostream& out) {
  auto [train, test] = load_data(cfg.dataset);
  const ModelSpec spec = fit_model(cfg.model, train);
  const std::vector<Trajectory> teachers = load_teachers(cfg, spec);
  const DistillResult r = distill_run(train, teachers, cfg.distill);
  const json meta = {{"dataset", cfg.dataset.tag()},
                     {"arch", to_string(spec.arch)},
                     {"strategy", to_string(cfg.distill.strategy)},
                     {"config_hash", config_hash(resolved)},
                     {"config", resolved}};
  save_distilled(r.syn, cfg.distilled_path(), meta);
  write_history_csv(r.history, cfg.history_path());
  out << "distilled " << r.syn.size() << " images (" << cfg.distill.iterations << " iterations, "
      << to_string(cfg.distill.strategy) << ")\n";
  if (!r.history.empty()) {
    const IterationLog& last = r.history.back();
    out << "final L_tm " << fmt("%.6f", last.l_tm) << "  L_contrast " << fmt("%.6f", last.l_contrast)
        << "  alpha_syn " << fmt("%.6g", r.syn.lr()) << "\n";
  }
  out << "wrote " << cfg.distilled_path().string() << "\n"
      << "wrote " << cfg.history_path().string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::filesystem::path& distilled_override,
             std::ostream& out) {
  const auto path = distilled_override.empty() ? cfg.distilled_path() : distilled_override;
  const SyntheticDataset syn = load_distilled(path);
  std::string strategy = "distilled";
  try {
    const Container c = read_container(path, "DDSN");
    if (c.header.contains("meta") && c.header["meta"].contains("strategy")) {
      strategy = c.header["meta"]["strategy"].get<std::string>();
    }
  } catch (const std::exception&) {
  }
  auto [train, test] = load_data(cfg.dataset);
  if (syn.num_classes != test.num_classes) {
    throw std::runtime_error("class-count mismatch: distilled set has " +
                             std::to_string(syn.num_classes) + " classes, test set " +
                             std::to_string(test.num_classes));
  }
  std::vector<ModelSpec> specs;
  for (const ModelSpec& m : cfg.eval.models.empty() ? std::vector<ModelSpec>{cfg.model} : cfg.eval.models) {
    specs.push_back(fit_model(m, test));
  }
  std::vector<MetricsRecord> records;
  out << "evaluating " << path.string() << "\n";
  for (const ModelSpec& spec : specs) {
    MetricsRecord r = evaluate_distilled(syn, test, spec, cfg.eval.config, cfg.eval.seeds);
    r.dataset = cfg.dataset.tag();
    r.strategy = strategy;
    print_record(out, r);
    records.push_back(r);
    if (cfg.eval.random_baseline) {
      MetricsRecord b = random_baseline(train, syn.ipc, test, spec, cfg.eval.config, cfg.eval.seeds);
      b.dataset = cfg.dataset.tag();
      print_record(out, b);
      records.push_back(b);
    }
  }
  write_metrics_csv(records, cfg.metrics_path());
  out << "wrote " << cfg.metrics_path().string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

GridAxis parse_grid(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--grid expects key=v1,v2,... got '" + spec + "'");
  GridAxis axis{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) axis.values.push_back(item);
  }
  if (axis.values.empty()) throw ConfigError("--grid " + axis.key + " has no values");
  return axis;
}

std::string csv_header(const std::vector<GridAxis>& grid) {
  std::string h = "config_hash";
  for (const GridAxis& a : grid) h += "," + a.key;
  return h + ",arch,ipc,strategy,mean,std,accuracies";
}

int cmd_ablate(const Common& common, const std::vector<std::string>& grid_specs, std::size_t jobs,
               const std::string& out_csv, std::ostream& out, std::ostream& err) {
  if (grid_specs.empty()) throw ConfigError("ablate needs at least one --grid key=v1,v2,...");
  std::vector<GridAxis> grid;
  for (const std::string& g : grid_specs) grid.push_back(parse_grid(g));

  std::vector<std::vector<std::string>> cells{{}};
  for (const GridAxis& axis : grid) {
    std::vector<std::vector<std::string>> next;
    for (const auto& prefix : cells) {
      for (const std::string& v : axis.values) {
        auto c = prefix;
        c.push_back(v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }

  struct Cell {
    std::vector<std::string> values;
    RunConfig cfg;
    std::string hash;
  };
  std::vector<Cell> todo;
  for (const auto& values : cells) {
    std::vector<std::pair<std::string, json>> ov;
    for (std::size_t i = 0; i < grid.size(); ++i) ov.emplace_back(grid[i].key, parse_value(values[i]));
    json resolved;
    RunConfig cfg = resolve(common, ov, &resolved);
    todo.push_back({values, std::move(cfg), config_hash(resolved)});
  }

  const RunConfig& base = todo.front().cfg;
  const std::filesystem::path csv =
      out_csv.empty() ? base.output.root / "metrics" / "ablation.csv" : std::filesystem::path(out_csv);
  const std::string header = csv_header(grid);
  std::set<std::string> done;
  if (std::filesystem::exists(csv)) {
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    if (line != header) {
      throw std::runtime_error(csv.string() + " has a different header; use another --out");
    }
    while (std::getline(in, line)) {
      if (!line.empty()) done.insert(line.substr(0, line.find(',')));
    }
  } else {
    if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
    std::ofstream(csv) << header << "\n";
  }

  std::vector<const Cell*> pending;
  for (const Cell& c : todo) {
    if (!done.count(c.hash)) pending.push_back(&c);
  }
  out << cells.size() << " cells, " << cells.size() - pending.size() << " already done\n";
  if (pending.empty()) return 0;

  auto [train, test] = load_data(base.dataset);
  std::mutex io;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const Cell& cell = *pending[i];
      try {
        const ModelSpec spec = fit_model(cell.cfg.model, train);
        const std::vector<Trajectory> teachers = load_teachers(cell.cfg, spec);
        const DistillResult r = distill_run(train, teachers, cell.cfg.distill);
        const MetricsRecord m =
            evaluate_distilled(r.syn, test, spec, cell.cfg.eval.config, cell.cfg.eval.seeds);
        std::string row = cell.hash;
        for (const std::string& v : cell.values) row += "," + v;
        row += "," + to_string(spec.arch) + "," + std::to_string(cell.cfg.distill.ipc) + "," +
               to_string(cell.cfg.distill.strategy) + "," + fmt("%.17g", m.mean) + "," +
               fmt("%.17g", m.std) + ",";
        for (std::size_t k = 0; k < m.accuracies.size(); ++k) {
          row += (k ? ";" : "") + fmt("%.17g", m.accuracies[k]);
        }
        std::lock_guard<std::mutex> lock(io);
        std::ofstream(csv, std::ios::app) << row << "\n";
        out << "  " << cell.hash;
        for (std::size_t k = 0; k < grid.size(); ++k) out << "  " << grid[k].key << "=" << cell.values[k];
        out << "  acc " << fmt("%.4f", m.mean) << " +- " << fmt("%.4f", m.std) << "\n";
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(io);
        err << "cell " << cell.hash << " failed: " << e.what() << "\n";
        failed = true;
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, pending.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();
  out << "wrote " << csv.string() << "\n";
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------

int cmd_export(const std::filesystem::path& distilled, const std::filesystem::path& out_dir,
               std::ostream& out) {
  const SyntheticDataset syn = load_distilled(distilled);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("cannot create output directory " + out_dir.string());
  }
  const std::size_t c = syn.images.dim(1), h = syn.images.dim(2), w = syn.images.dim(3);
  const std::size_t n = c * h * w;
  const std::vector<double> pixels = syn.images.to_vector();
  std::vector<std::size_t> seen(syn.num_classes, 0);
  const std::size_t cols = syn.ipc;
  std::vector<double> montage(c * syn.num_classes * h * cols * w, 0.0);
  const std::size_t mh = syn.num_classes * h, mw = cols * w;
  for (std::size_t i = 0; i < syn.size(); ++i) {
    const std::size_t cls = static_cast<std::size_t>(syn.class_of[i]);
    const std::size_t idx = seen[cls]++;
    std::vector<double> img(pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                            pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    const std::string name =
        std::to_string(cls) + "_" + std::to_string(idx) + (c == 1 ? ".pgm" : ".ppm");
    write_pnm(out_dir / name, img, c, h, w);
    if (idx < cols) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            montage[ch * mh * mw + (cls * h + y) * mw + idx * w + x] = img[ch * h * w + y * w + x];
          }
        }
      }
    }
  }
  write_pnm(out_dir / (c == 1 ? "montage.pgm" : "montage.ppm"), montage, c, mh, mw);
  out << "wrote " << syn.size() << " images and a " << syn.num_classes << "x" << cols
      << " montage to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

std::uint8_t quantize_pixel(double x) {
  const double v = std::nearbyint(std::clamp(x, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(v);
}

void write_pnm(const std::filesystem::path& path, const std::vector<double>& chw,
               std::size_t channels, std::size_t height, std::size_t width) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("PNM export needs 1 or 3 channels");
  if (chw.size() != channels * height * width) throw std::invalid_argument("PNM pixel count mismatch");
  std::string data = std::string(channels == 1 ? "P5" : "P6") + "\n" + std::to_string(width) + " " +
                     std::to_string(height) + "\n255\n";
  const std::size_t plane = height * width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t ch = 0; ch < channels; ++ch) data.push_back(static_cast<char>(quantize_pixel(chw[ch * plane + p])));
  }
  write_file_atomic(path, std::vector<std::uint8_t>(data.begin(), data.end()));
}

std::vector<double> read_pnm(const std::filesystem::path& path, std::size_t& channels,
                             std::size_t& height, std::size_t& width) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw std::runtime_error(path.string() + " is not a binary PGM/PPM");
  channels = magic == "P5" ? 1 : 3;
  width = std::stoul(token());
  height = std::stoul(token());
  if (token() != "255") throw std::runtime_error(path.string() + ": only maxval 255 is supported");
  ++pos;
  const std::size_t plane = height * width;
  if (bytes.size() - pos != plane * channels) throw std::runtime_error(path.string() + " is truncated");
  std::vector<double> chw(plane * channels);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t ch = 0; ch < channels; ++ch) chw[ch * plane + p] = bytes[pos++] / 255.0;
  }
  return chw;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json doc = read_json_file(path);
  return parse_run_config(doc);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dataset distillation by trajectory matching with a contrastive term", "distillab"};
  app.require_subcommand(1);

  Common common;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", seed_value, "override the config seed");
  };

  bool force = false;
  auto* gen = app.add_subcommand("gen-teachers", "train teachers and write trajectory buffers");
  add_common(gen);
  gen->add_flag("--force", force, "overwrite existing buffers");

  auto* distill = app.add_subcommand("distill", "distill a synthetic set from the teachers");
  add_common(distill);
  std::optional<double> alpha, beta, lambda, lr_img;
  std::optional<std::string> strategy, out_path;
  std::optional<std::size_t> ipc, iterations;
  distill->add_option("--alpha", alpha);
  distill->add_option("--beta", beta);
  distill->add_option("--lambda", lambda);
  distill->add_option("--lr-img", lr_img);
  distill->add_option("--strategy", strategy, "fusion, update or tm_only");
  distill->add_option("--ipc", ipc);
  distill->add_option("--iterations", iterations);
  distill->add_option("--out", out_path, "distilled dataset path");

  auto* eval = app.add_subcommand("eval", "train fresh networks on a distilled set");
  add_common(eval);
  std::string distilled_path, metrics_out;
  eval->add_option("--distilled", distilled_path, "distilled dataset (default: from config)");
  eval->add_option("--out", metrics_out, "metrics CSV path");

  auto* ablate = app.add_subcommand("ablate", "grid of distill + eval runs");
  add_common(ablate);
  std::vector<std::string> grid;
  std::size_t jobs = 1;
  std::string ablate_out;
  ablate->add_option("--grid", grid, "key=v1,v2,... (repeatable)");
  ablate->add_option("--jobs", jobs, "cells run in parallel");
  ablate->add_option("--out", ablate_out, "results CSV path");

  auto* exp = app.add_subcommand("export-images", "write distilled images as PGM/PPM");
  add_common(exp);
  std::string export_in, export_dir;
  exp->add_option("--distilled", export_in, "distilled dataset (default: from config)");
  exp->add_option("--out", export_dir, "output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "distillab: " << e.what() << "\n";
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) common.seed = seed_value;
    std::vector<std::pair<std::string, json>> ov;
    if (sub == gen) return cmd_gen_teachers(resolve(common, ov), force, out);
    if (sub == distill) {
      if (alpha) ov.emplace_back("alpha", *alpha);
      if (beta) ov.emplace_back("beta", *beta);
      if (lambda) ov.emplace_back("lambda", *lambda);
      if (lr_img) ov.emplace_back("lr_img", *lr_img);
      if (strategy) ov.emplace_back("strategy", *strategy);
      if (ipc) ov.emplace_back("ipc", *ipc);
      if (iterations) ov.emplace_back("iterations", *iterations);
      if (out_path) ov.emplace_back("output.distilled", *out_path);
      json resolved;
      RunConfig cfg = resolve(common, ov, &resolved);
      return cmd_distill(cfg, resolved, out);
    }
    if (sub == eval) {
      if (!metrics_out.empty()) ov.emplace_back("output.metrics", metrics_out);
      return cmd_eval(resolve(common, ov), distilled_path, out);
    }
    if (sub == ablate) return cmd_ablate(common, grid, jobs, ablate_out, out, err);
    if (sub == exp) {
      const std::filesystem::path in =
          export_in.empty() ? resolve(common, ov).distilled_path() : std::filesystem::path(export_in);
      return cmd_export(in, export_dir, out);
    }
  } catch (const ConfigError& e) {
    err << "distillab: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "distillab: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace distillab
