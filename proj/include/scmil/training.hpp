#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "scmil/core.hpp"
#include "scmil/data.hpp"
#include "scmil/mil.hpp"

namespace scmil {

// ---------------------------------------------------------------------------
// End-to-end optimization: Adam with decoupled weight decay, cosine-annealed
// learning rate, the batch-size-1 epoch loop, checkpoint serialization, the
// finite-difference gradient checker, and the cross-validation harness.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 40;
  double lr0 = 1e-4;
  double weight_decay = 5e-3;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double kink_margin = 1e-3;  // gradient checking only
};

/// lr0 * (1 + cos(pi * epoch / total)) / 2. Requires 0 <= epoch < total.
double cosine_lr(int epoch, int total, double lr0);

/// Flat view of one named parameter tensor. `decay` marks tensors subject to
/// weight decay: everything except the log-stepsize and the lambda-net biases.
struct TensorRef {
  std::string name;
  double* data = nullptr;
  Index rows = 0;
  Index cols = 0;
  bool decay = true;

  Index size() const { return rows * cols; }
};

/// Learnable tensors of a model, in a stable documented order.
std::vector<TensorRef> learnable_params(MilModel& model);
std::vector<TensorRef> learnable_params(const MilModel& model);  // const view, data non-null
std::vector<TensorRef> grad_tensors(MilGrads& grads, const MilModel& model);

struct AdamState {
  std::vector<Vector> m;  // first moments, one flat vector per tensor
  std::vector<Vector> v;  // second moments
  long step = 0;
};

/// One bias-corrected Adam step with decoupled weight decay. Initializes the
/// state lazily from the parameter shapes. Throws TrainingError naming the
/// offending tensor if any gradient entry is non-finite.
void adam_step(AdamState& state, std::vector<TensorRef>& params,
               const std::vector<TensorRef>& grads, double lr, const TrainConfig& cfg);

struct EvalMetrics {
  double loss = 0.0;
  double acc = 0.0;
  double auc_score = 0.0;  // NaN when undefined (single-class split)
};

EvalMetrics evaluate(const MilModel& model, const std::vector<Bag>& bags);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = 0.0;  // NaN when no validation split
  double val_auc = 0.0;
};

struct FitResult {
  MilModel model;  // best validation accuracy (AUC tiebreak), final when no val
  std::vector<EpochStats> history;
  int best_epoch = -1;
  long steps_taken = 0;  // optimizer steps = epochs x training bags
};

/// Epoch loop at batch size 1: per epoch, a seeded shuffle of the training
/// bags and one Adam step per bag. Fits the feature standardization from the
/// training split before the first step.
FitResult fit(MilModel model, const std::vector<Bag>& train, const std::vector<Bag>& val,
              const TrainConfig& cfg);

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  bool margin_ok = true;     // no pre-activation closer than kink_margin to a kink
  double margin = 0.0;
  double max_rel_err = 0.0;
  std::string worst_param;
  Index coords_checked = 0;
  std::vector<GradCheckGroup> groups;
};

/// Central finite differences over every learnable coordinate (deterministic
/// subsample of at most max_coords) against the analytic backward pass.
/// Relative error uses max(|analytic|, |numeric|, 1e-4) in the denominator to
/// keep roundoff on near-zero coordinates from registering as disagreement.
/// When the forward trace passes within kink_margin of any soft-threshold,
/// ReLU, max-pool tie, or probability clamp, margin_ok is false and the
/// caller should redraw the bag.
GradCheckReport grad_check(const MilModel& model, const Bag& bag, double eps,
                           double kink_margin, Index max_coords = 2000);

// ---------------------------------------------------------------------------
// Checkpoints: a text format with full round-trip precision.
// Line 1: `SCMIL-CKPT v1`; line 2: tensor count; per tensor a header line
// `<name> <rows> <cols>` followed by `rows` lines of `cols` values; trailing
// `# key=value` comment lines echo the configuration.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::vector<std::pair<std::string, std::string>> config;

  const Matrix* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// All model tensors (learnable plus the feature standardization) and enough
/// configuration to rebuild the model.
Checkpoint to_checkpoint(const MilModel& model);
MilModel model_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Cross-validation harness
// ---------------------------------------------------------------------------

struct CvConfig {
  MilModelConfig model;
  TrainConfig train;
  int k = 10;
  int repetitions = 5;
  int jobs = 1;
};

struct CvFoldRow {
  int rep = 0;
  int fold = 0;
  double acc = 0.0;
  double auc_score = 0.0;
  int n_train = 0;
  int n_test = 0;
};

struct CvResult {
  std::vector<CvFoldRow> rows;  // sorted by (rep, fold)
  double mean_acc = 0.0;
  double std_acc = 0.0;   // sample standard deviation over fold rows
  double mean_auc = 0.0;
  double std_auc = 0.0;
};

/// k-fold x repetitions: a fresh model per fold, trained on the k-1 training
/// folds (the held-out fold doubles as the validation split for checkpoint
/// selection) and scored on the held-out fold. Folds may run in parallel;
/// results are deterministic regardless of jobs.
CvResult run_cv(const Dataset& dataset, const CvConfig& cfg);

}  // namespace scmil
