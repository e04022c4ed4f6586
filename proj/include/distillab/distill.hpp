#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillab/augment.hpp"
#include "distillab/datasets.hpp"
#include "distillab/expert.hpp"
#include "distillab/models.hpp"
#include "distillab/optim.hpp"

namespace distillab {

/// How the contrastive term enters the optimization.
///  - fusion:  student steps on CE only; the outer loss is
///             alpha * mean(L_contrast) + beta * L_tm.
///  - update:  student steps on CE + lambda * L_contrast; outer loss beta * L_tm.
///  - tm_only: fusion with alpha forced to 0.
enum class Strategy { fusion, update, tm_only };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

enum class LabelInit { onehot, teacher };

std::string to_string(LabelInit l);
LabelInit parse_label_init(const std::string& name);

struct DistillConfig {
  std::size_t inner_steps = 20;    // N, synthetic mini-batch steps
  std::size_t expert_epochs = 2;   // M, teacher epochs ahead
  std::size_t t_min = 0;           // start epoch window, inclusive
  std::size_t t_max = 2;
  Strategy strategy = Strategy::fusion;
  double alpha = 0.1;
  double beta = 1.0;
  double lambda = 0.1;
  double temperature = 0.1;
  double inner_momentum = 0.5;

  double lr_img = 1.0;
  double lr_label = 0.01;
  double lr_lr = 1e-4;
  double lr_head = 0.01;
  double lr_syn_init = 0.01;

  std::size_t iterations = 300;
  std::size_t batch_syn = 0;       // 0: the whole synthetic set each step
  std::size_t ipc = 1;
  SynInit init = SynInit::real_sample;
  LabelInit label_init = LabelInit::teacher;
  long label_epoch = -1;           // teacher snapshot for soft labels; -1 = last
  double onehot_logit = 10.0;
  std::size_t proj_dim = 32;
  AugmentationSpec augment;
  std::uint64_t seed = 0;

  /// Alpha actually applied (0 for tm_only).
  double effective_alpha() const { return strategy == Strategy::tm_only ? 0.0 : alpha; }
  /// Checks the static invariants; with a trajectory length (number of
  /// snapshot epochs) also checks t_max + M fits.
  void validate() const;
  void validate_for(const Trajectory& trajectory) const;
};

// ---------------------------------------------------------------------------
// Contrastive term.

/// Anchors z1[i] and positives z2[i]; candidate negatives are the rows of
/// `negatives`, and negative_mask[i][j] = 1 selects those used by anchor i.
struct ContrastiveBatch {
  Tensor z1;             // [B x d], unit rows
  Tensor z2;             // [B x d], unit rows
  Tensor negatives;      // [P x d], unit rows
  Tensor negative_mask;  // [B x P] of 0/1
  std::vector<int> anchor_class;
  std::vector<int> negative_class;

  std::size_t anchors() const { return anchor_class.size(); }
  std::size_t negatives_of(std::size_t anchor) const;
  /// Unit norms within `tolerance` and no negative sharing its anchor's class.
  void validate(double tolerance = 1e-6) const;
};

/// Mean over anchors of
///   -log( e^{s(z1,z2)/tau} / (e^{s(z1,z2)/tau} + sum_j e^{s(z1,z_j^-)/tau}) )
/// with s the cosine similarity; evaluated with a per-anchor max shift.
Tensor contrastive_loss(const ContrastiveBatch& batch, double temperature);

/// Project and L2-normalize two views' features; negatives of anchor i are
/// the view-2 embeddings of every item of a different class.
ContrastiveBatch make_contrastive_batch(const ProjectionHead& head, const Tensor& head_params,
                                        const Tensor& features1, const Tensor& features2,
                                        const std::vector<int>& classes);

/// Augment the whole synthetic set twice, encode both views with the given
/// student parameters, and build the batch.
ContrastiveBatch build_contrastive_batch(const SyntheticDataset& syn, const ModelSpec& spec,
                                         const ProjectionHead& head, const Tensor& params,
                                         const AugmentationSpec& aug, AugmentRng& rng);

// ---------------------------------------------------------------------------
// Trajectory matching.

class DistillError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// |end - target|^2 / |start - target|^2.
Tensor trajectory_loss(const Tensor& student_end, const Tensor& teacher_start,
                       const Tensor& teacher_target);

Tensor total_loss(const Tensor& contrast, const Tensor& tm, double alpha, double beta);

struct InnerResult {
  Tensor params;          // student after N steps, tracked
  Tensor contrast_mean;   // mean L_contrast over the steps
  Tensor head_params;     // head after the inner loop (changes only under update)
  std::vector<double> ce_losses;
};

/// Unrolled student training on the synthetic set starting from the teacher
/// snapshot at epoch `t`. `syn` and `head_params` should be gradient leaves
/// so the caller can differentiate through every step.
InnerResult inner_loop(const SyntheticDataset& syn, const ProjectionHead& head,
                       const Tensor& head_params, const Trajectory& trajectory, std::size_t t,
                       const DistillConfig& config, std::mt19937_64& rng);

struct IterationLog {
  std::size_t iteration = 0;
  std::size_t teacher = 0;
  std::size_t start_epoch = 0;
  double l_tm = 0.0;
  double l_contrast = 0.0;
  double l_total = 0.0;
  double alpha_syn = 0.0;
};

struct DistillResult {
  SyntheticDataset syn;
  ProjectionHead head;
  std::vector<IterationLog> history;
};

/// Soft labels = teacher logits of the synthetic images at `epoch`
/// (negative: last snapshot).
void set_soft_labels_from_teacher(SyntheticDataset& syn, const Trajectory& teacher, long epoch);

/// The full outer loop: initialize, then per iteration sample a teacher and a
/// start epoch, unroll, and take one SGD step on images, soft labels and
/// log_lr_syn (plus the projection head under fusion).
DistillResult distill_run(const LabeledDataset& real, const std::vector<Trajectory>& teachers,
                          const DistillConfig& config);

/// Same, starting from an explicit initial state.
DistillResult distill_from(SyntheticDataset syn, ProjectionHead head,
                           const std::vector<Trajectory>& teachers, const DistillConfig& config);

/// Initial state distill_run would start from.
DistillResult distill_init(const LabeledDataset& real, const std::vector<Trajectory>& teachers,
                           const DistillConfig& config);

// ---------------------------------------------------------------------------
// Persistence ("DDSN" container) and loss history.

void save_distilled(const SyntheticDataset& syn, const std::filesystem::path& path,
                    const nlohmann::json& extra = nlohmann::json::object());
SyntheticDataset load_distilled(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_distilled(const SyntheticDataset& syn,
                                           const nlohmann::json& extra = nlohmann::json::object());

/// iteration,l_tm,l_contrast,l_total,alpha_syn
void write_history_csv(const std::vector<IterationLog>& history, const std::filesystem::path& path);

}  // namespace distillab
