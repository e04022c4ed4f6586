#include "distillab/distill.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace distillab {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::fusion: return "fusion";
    case Strategy::update: return "update";
    case Strategy::tm_only: return "tm_only";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "fusion") return Strategy::fusion;
  if (name == "update") return Strategy::update;
  if (name == "tm_only" || name == "tm-only") return Strategy::tm_only;
  throw std::invalid_argument("unknown strategy '" + name + "' (fusion, update, tm_only)");
}

std::string to_string(LabelInit l) { return l == LabelInit::onehot ? "onehot" : "teacher"; }

LabelInit parse_label_init(const std::string& name) {
  if (name == "onehot") return LabelInit::onehot;
  if (name == "teacher") return LabelInit::teacher;
  throw std::invalid_argument("unknown label init '" + name + "' (onehot, teacher)");
}

void DistillConfig::validate() const {
  if (expert_epochs == 0) throw std::invalid_argument("expert_epochs (M) must be at least 1");
  if (t_min > t_max) throw std::invalid_argument("match range needs t_min <= t_max");
  if (alpha < 0.0 || beta < 0.0 || lambda < 0.0) {
    throw std::invalid_argument("loss weights alpha, beta, lambda must be non-negative");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (!(lr_syn_init > 0.0)) throw std::invalid_argument("lr_syn_init must be positive");
  if (lr_img < 0.0 || lr_label < 0.0 || lr_lr < 0.0 || lr_head < 0.0) {
    throw std::invalid_argument("outer learning rates must be non-negative");
  }
  if (ipc == 0) throw std::invalid_argument("ipc must be positive");
  if (proj_dim == 0) throw std::invalid_argument("proj_dim must be positive");
  augment.validate();
}

void DistillConfig::validate_for(const Trajectory& trajectory) const {
  validate();
  if (t_max + expert_epochs > trajectory.last_epoch()) {
    throw std::invalid_argument("t_max + M = " + std::to_string(t_max + expert_epochs) +
                                " exceeds the trajectory's last epoch " +
                                std::to_string(trajectory.last_epoch()));
  }
  for (std::size_t t = t_min; t <= t_max; ++t) {
    trajectory.index_of(t);
    trajectory.index_of(t + expert_epochs);
  }
}

// ---------------------------------------------------------------------------

std::size_t ContrastiveBatch::negatives_of(std::size_t anchor) const {
  const std::size_t p = negatives.defined() && negatives.rank() == 2 ? negatives.dim(0) : 0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < p; ++j) count += negative_mask.at(anchor * p + j) != 0.0;
  return count;
}

void ContrastiveBatch::validate(double tolerance) const {
  const std::size_t b = anchor_class.size();
  if (z1.shape() != z2.shape() || z1.rank() != 2 || z1.dim(0) != b) {
    throw std::invalid_argument("contrastive batch: z1/z2 shapes disagree with anchor count");
  }
  const std::size_t p = negative_class.size();
  if (negatives.rank() != 2 || negatives.dim(0) != p || negatives.dim(1) != z1.dim(1) ||
      negative_mask.shape() != Shape{b, p}) {
    throw std::invalid_argument("contrastive batch: negative shapes are inconsistent");
  }
  auto check_rows = [&](const Tensor& t, const char* what) {
    const std::size_t d = t.dim(1);
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      double n2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) n2 += t.at(r * d + c) * t.at(r * d + c);
      if (std::abs(std::sqrt(n2) - 1.0) > tolerance) {
        throw std::invalid_argument(std::string("contrastive batch: ") + what + " row " +
                                    std::to_string(r) + " is not unit norm");
      }
    }
  };
  check_rows(z1, "z1");
  check_rows(z2, "z2");
  check_rows(negatives, "negative");
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      if (negative_mask.at(i * p + j) != 0.0 && negative_class[j] == anchor_class[i]) {
        throw std::invalid_argument("contrastive batch: negative shares its anchor's class");
      }
    }
  }
}

Tensor contrastive_loss(const ContrastiveBatch& batch, double temperature) {
  const std::size_t b = batch.anchors();
  if (b == 0 || !batch.z1.defined()) throw std::invalid_argument("contrastive_loss: empty batch");
  if (!(temperature > 0.0)) throw std::invalid_argument("contrastive_loss: temperature must be positive");
  const double inv_t = 1.0 / temperature;
  const std::size_t p = batch.negative_class.size();

  // Rows are unit vectors, so dot products are the cosine similarities.
  const Tensor pos = scale(row_sum(mul(batch.z1, batch.z2)), inv_t);  // [B x 1]
  Tensor sims;                                                         // [B x P]
  if (p > 0) sims = scale(matmul(batch.z1, transpose(batch.negatives)), inv_t);

  // Per-anchor shift: the largest logit that takes part in the softmax.
  std::vector<double> shift(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = pos.at(i);
    for (std::size_t j = 0; j < p; ++j) {
      if (batch.negative_mask.at(i * p + j) != 0.0) m = std::max(m, sims.at(i * p + j));
    }
    shift[i] = m;
  }
  const Tensor shift_col = Tensor::from({b, 1}, shift);
  const Tensor pos_shifted = sub(pos, shift_col);
  Tensor denom = exp(pos_shifted);
  if (p > 0) {
    // Unused pairs are pushed far below the shift so exp() underflows to 0.
    std::vector<double> exclude(b * p);
    for (std::size_t k = 0; k < exclude.size(); ++k) {
      exclude[k] = batch.negative_mask.at(k) != 0.0 ? 0.0 : -1e4;
    }
    Tensor shifted = sub(sims, repeat_cols(shift_col, p));
    Tensor masked = add(mul(shifted, batch.negative_mask), Tensor::from({b, p}, std::move(exclude)));
    denom = add(denom, row_sum(exp(masked)));
  }
  return mean(sub(log(denom), pos_shifted));
}

ContrastiveBatch make_contrastive_batch(const ProjectionHead& head, const Tensor& head_params,
                                        const Tensor& features1, const Tensor& features2,
                                        const std::vector<int>& classes) {
  const std::size_t b = classes.size();
  if (features1.rank() != 2 || features1.dim(0) != b || features2.shape() != features1.shape()) {
    throw std::invalid_argument("make_contrastive_batch: feature shapes disagree with classes");
  }
  bool mixed = false;
  for (int c : classes) mixed = mixed || c != classes.front();
  if (b == 0 || !mixed) {
    throw std::invalid_argument("contrastive batch needs at least two classes (no negatives exist)");
  }
  ContrastiveBatch batch;
  batch.z1 = normalize_rows(project(head, head_params, features1));
  batch.z2 = normalize_rows(project(head, head_params, features2));
  batch.negatives = batch.z2;
  std::vector<double> mask(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) mask[i * b + j] = classes[i] != classes[j] ? 1.0 : 0.0;
  }
  batch.negative_mask = Tensor::from({b, b}, std::move(mask));
  batch.anchor_class = classes;
  batch.negative_class = classes;
  return batch;
}

ContrastiveBatch build_contrastive_batch(const SyntheticDataset& syn, const ModelSpec& spec,
                                         const ProjectionHead& head, const Tensor& params,
                                         const AugmentationSpec& aug, AugmentRng& rng) {
  auto [x1, x2] = augment_pair(syn.images, aug, rng);
  const Tensor f1 = forward(spec, params, x1).features;
  const Tensor f2 = forward(spec, params, x2).features;
  return make_contrastive_batch(head, head.params, f1, f2, syn.class_of);
}

// ---------------------------------------------------------------------------

Tensor trajectory_loss(const Tensor& student_end, const Tensor& teacher_start,
                       const Tensor& teacher_target) {
  if (student_end.numel() != teacher_target.numel() ||
      teacher_start.numel() != teacher_target.numel()) {
    throw std::invalid_argument("trajectory_loss: parameter vectors differ in length");
  }
  const Tensor start = reshape(teacher_start, student_end.shape());
  const Tensor target = reshape(teacher_target, student_end.shape());
  const Tensor denom = sum(square(sub(start, target)));
  if (denom.item() == 0.0) {
    throw DistillError("trajectory_loss: teacher segment has zero length");
  }
  return div(sum(square(sub(student_end, target))), denom);
}

Tensor total_loss(const Tensor& contrast, const Tensor& tm, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("total_loss: negative weight");
  return add(scale(contrast, alpha), scale(tm, beta));
}

InnerResult inner_loop(const SyntheticDataset& syn, const ProjectionHead& head,
                       const Tensor& head_params, const Trajectory& trajectory, std::size_t t,
                       const DistillConfig& config, std::mt19937_64& rng) {
  config.validate();
  const ModelSpec& spec = trajectory.spec;
  const std::size_t n_syn = syn.size();
  const bool full_batch = config.batch_syn == 0 || config.batch_syn >= n_syn;
  const bool update = config.strategy == Strategy::update;

  StudentState student = StudentState::start(trajectory.params_at(t).detach_leaf());
  StudentState head_state =
      StudentState::start(head_params.tracked() ? head_params : head_params.detach_leaf());
  const Tensor lr = exp(syn.log_lr_syn);
  const Tensor probs = syn.label_probs();

  InnerResult result;
  Tensor contrast_sum;
  std::vector<std::size_t> order(n_syn);
  for (std::size_t step = 0; step < config.inner_steps; ++step) {
    std::iota(order.begin(), order.end(), 0);
    if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
    std::span<const std::size_t> rows(order.data(), full_batch ? n_syn : config.batch_syn);
    std::vector<int> classes;
    for (std::size_t r : rows) classes.push_back(syn.class_of[r]);

    const Tensor x = index_select(syn.images, rows);
    const Tensor y = index_select(probs, rows);
    auto [x1, x2] = augment_pair(x, config.augment, rng);
    const ForwardResult view1 = forward(spec, student.params, x1);
    const ForwardResult view2 = forward(spec, student.params, x2);
    const Tensor ce = softmax_cross_entropy(view1.logits, y);
    const ContrastiveBatch batch =
        make_contrastive_batch(head, head_state.params, view1.features, view2.features, classes);
    const Tensor contrast = contrastive_loss(batch, config.temperature);

    if (update) {
      const Tensor objective = add(ce, scale(contrast, config.lambda));
      auto g = grad(objective, {student.params, head_state.params}, true);
      student = sgd_momentum_step(student, g[0], lr, config.inner_momentum);
      head_state = sgd_momentum_step(head_state, g[1], lr, config.inner_momentum);
    } else {
      auto g = grad(ce, {student.params}, true);
      student = sgd_momentum_step(student, g[0], lr, config.inner_momentum);
    }
    contrast_sum = contrast_sum.defined() ? add(contrast_sum, contrast) : contrast;
    result.ce_losses.push_back(ce.item());
  }
  result.params = student.params;
  result.contrast_mean = contrast_sum.defined()
                             ? scale(contrast_sum, 1.0 / static_cast<double>(config.inner_steps))
                             : Tensor::scalar(0.0);
  result.head_params = head_state.params;
  return result;
}

void set_soft_labels_from_teacher(SyntheticDataset& syn, const Trajectory& teacher, long epoch) {
  const std::size_t e = epoch < 0 ? teacher.last_epoch() : static_cast<std::size_t>(epoch);
  syn.soft_labels = teacher_logits(teacher, e, syn.images).detach();
}

DistillResult distill_init(const LabeledDataset& real, const std::vector<Trajectory>& teachers,
                           const DistillConfig& config) {
  if (teachers.empty()) throw std::invalid_argument("distillation needs at least one teacher");
  for (const Trajectory& t : teachers) {
    if (!(t.spec == teachers.front().spec)) {
      throw std::invalid_argument("all teachers must share one model spec");
    }
    config.validate_for(t);
  }
  const ModelSpec& spec = teachers.front().spec;
  if (real.num_classes != spec.num_classes) {
    throw std::invalid_argument("real data has " + std::to_string(real.num_classes) +
                                " classes, teachers predict " + std::to_string(spec.num_classes));
  }
  DistillResult r;
  r.syn = init_synthetic(real, config.ipc, config.init, config.lr_syn_init, config.seed,
                         config.onehot_logit);
  if (config.label_init == LabelInit::teacher) {
    set_soft_labels_from_teacher(r.syn, teachers.front(), config.label_epoch);
  }
  r.head = init_projection_head(feature_width(spec), config.proj_dim, config.seed + 1);
  return r;
}

DistillResult distill_from(SyntheticDataset syn, ProjectionHead head,
                           const std::vector<Trajectory>& teachers, const DistillConfig& config) {
  if (teachers.empty()) throw std::invalid_argument("distillation needs at least one teacher");
  for (const Trajectory& t : teachers) config.validate_for(t);
  syn.validate();

  DistillResult result;
  std::seed_seq seq{config.seed, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick_teacher(0, teachers.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_start(config.t_min, config.t_max);
  const bool head_in_outer = config.strategy != Strategy::update;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const SyntheticDataset leaves = syn.as_leaves();
    const Tensor head_leaf = head.params.detach_leaf();
    const std::size_t k = pick_teacher(rng);
    const std::size_t t = pick_start(rng);
    const Trajectory& teacher = teachers[k];

    InnerResult inner;
    try {
      inner = inner_loop(leaves, head, head_leaf, teacher, t, config, rng);
    } catch (const std::invalid_argument& e) {
      throw DistillError("inner loop failed at iteration " + std::to_string(it) + ": " + e.what());
    }
    const Tensor tm = trajectory_loss(inner.params, teacher.params_at(t),
                                      teacher.params_at(t + config.expert_epochs));
    const Tensor total = config.strategy == Strategy::update
                             ? scale(tm, config.beta)
                             : total_loss(inner.contrast_mean, tm, config.effective_alpha(),
                                          config.beta);
    if (!std::isfinite(total.item())) {
      throw DistillError("non-finite outer loss at iteration " + std::to_string(it));
    }

    std::vector<Tensor> wrt{leaves.images, leaves.soft_labels, leaves.log_lr_syn};
    if (head_in_outer) wrt.push_back(head_leaf);
    const std::vector<Tensor> g = grad(total, wrt);

    IterationLog log;
    log.iteration = it;
    log.teacher = k;
    log.start_epoch = t;
    log.l_tm = tm.item();
    log.l_contrast = inner.contrast_mean.item();
    log.l_total = total.item();
    log.alpha_syn = syn.lr();
    result.history.push_back(log);

    syn.images = sub(leaves.images.detach(), scale(g[0], config.lr_img));
    syn.soft_labels = sub(leaves.soft_labels.detach(), scale(g[1], config.lr_label));
    syn.log_lr_syn = sub(leaves.log_lr_syn.detach(), scale(g[2], config.lr_lr));
    if (head_in_outer) {
      head.params = sub(head_leaf.detach(), scale(g[3], config.lr_head));
    } else {
      head.params = inner.head_params.detach();
    }
  }
  result.syn = std::move(syn);
  result.head = std::move(head);
  return result;
}

DistillResult distill_run(const LabeledDataset& real, const std::vector<Trajectory>& teachers,
                          const DistillConfig& config) {
  DistillResult init = distill_init(real, teachers, config);
  return distill_from(std::move(init.syn), std::move(init.head), teachers, config);
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_distilled(const SyntheticDataset& syn, const nlohmann::json& extra) {
  syn.validate();
  nlohmann::json header = {{"kind", "distilled-dataset"},
                           {"ipc", syn.ipc},
                           {"num_classes", syn.num_classes},
                           {"image_shape", syn.images.shape()},
                           {"class_of", syn.class_of},
                           {"meta", extra}};
  return encode_container("DDSN", std::move(header),
                          {{"images", syn.images.to_vector()},
                           {"soft_labels", syn.soft_labels.to_vector()},
                           {"log_lr_syn", syn.log_lr_syn.to_vector()}});
}

void save_distilled(const SyntheticDataset& syn, const std::filesystem::path& path,
                    const nlohmann::json& extra) {
  write_file_atomic(path, encode_distilled(syn, extra));
}

SyntheticDataset load_distilled(const std::filesystem::path& path) {
  const Container c = read_container(path, "DDSN");
  SyntheticDataset syn;
  try {
    syn.ipc = c.header.at("ipc").get<std::size_t>();
    syn.num_classes = c.header.at("num_classes").get<std::size_t>();
    syn.class_of = c.header.at("class_of").get<std::vector<int>>();
    syn.images = Tensor::from(c.header.at("image_shape").get<Shape>(), c.array("images"));
    syn.soft_labels = Tensor::from({syn.class_of.size(), syn.num_classes}, c.array("soft_labels"));
    syn.log_lr_syn = Tensor::from({}, c.array("log_lr_syn"));
    syn.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed, std::string("bad distilled header: ") + e.what());
  } catch (const TensorError& e) {
    throw FormatError(FormatErrorKind::malformed, e.what());
  } catch (const DatasetError& e) {
    throw FormatError(FormatErrorKind::malformed, e.what());
  }
  return syn;
}

void write_history_csv(const std::vector<IterationLog>& history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,l_tm,l_contrast,l_total,alpha_syn\n";
  char line[256];
  for (const IterationLog& h : history) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", h.iteration, h.l_tm,
                  h.l_contrast, h.l_total, h.alpha_syn);
    out << line;
  }
}

}  // namespace distillab
