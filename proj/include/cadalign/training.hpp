#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cadalign/geometry.hpp"
#include "cadalign/model.hpp"
#include "cadalign/noise.hpp"

namespace cadalign {

struct LossWeights {
  double w_mse = 1.0;
  double w_mae = 1.0;
  double w_missing = 1.0;
  double w_obsolete = 1.0;
  // Extra alignment term on Gaussian-smoothed maps (one entry per sigma, in
  // pixels). Off by default.
  double w_smooth = 0.0;
  std::vector<double> smooth_sigmas;

  void validate() const;
};

constexpr double kBceEpsilon = 1e-7;

double alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w);
// Adds d(loss)/d(pred) into *grad when given.
double alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w,
                      ProbabilityMask* grad);

double segmentation_loss(const ProbabilityMask& prob, const BinaryMask& gt);
double segmentation_loss(const ProbabilityMask& prob, const BinaryMask& gt, ProbabilityMask* grad);

// Same smoothing-term contribution used by total_loss; exposed for tests.
double smooth_alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w,
                             ProbabilityMask* grad);

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  double smooth = 0.0;
  double missing = 0.0;
  double obsolete = 0.0;
};

struct OutputGradient {
  TransformField field;
  ProbabilityMask missing;
  ProbabilityMask obsolete;
};

// Noisy-mask instances that take part in the alignment term: every
// component whose pixels are not mostly obsolete ground truth.
std::vector<InstanceRegion> alignment_instances(const TrainingSample& sample);

// Sum-then-clamp composition of the pooled per-instance warps.
ProbabilityMask compose_from_field(const std::vector<InstanceRegion>& instances,
                                   const TransformField& field, const FieldCalibration& cal,
                                   int width, int height);

LossBreakdown total_loss(const TrainingSample& sample, const ModelOutput& output,
                         const LossWeights& weights, const FieldCalibration& cal,
                         OutputGradient* grad = nullptr);

// Field that undoes the recorded corruption for every surviving instance.
TransformField field_from_record(const TrainingSample& sample, const FieldCalibration& cal);

class Adam {
public:
  Adam(std::vector<NamedParameter> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  // Applies one update from the accumulated gradients scaled by grad_scale.
  void step(double grad_scale = 1.0);
  long steps() const { return t_; }

private:
  std::vector<NamedParameter> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 1;
  double learning_rate = 1e-3;
  int patch_size = 448;
  CorruptionSpec corruption;
  LossWeights weights;
  FieldCalibration calibration;
  GeneratorConfig generator;
  std::uint64_t seed = 0;
  std::string checkpoint_dir = "checkpoints";
  // Training stops after the iteration that crosses either budget; 0 = none.
  long max_iterations = 0;
  double max_cpu_seconds = 0.0;
  // Linear ramp of the corruption displacement bound from ramp_start_disp to
  // corruption.max_disp over this many iterations; 0 = no ramp.
  long disp_ramp_iterations = 0;
  double ramp_start_disp = 2.0;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  LossBreakdown loss;
  double val_iou_corrupted = 0.0;
  double val_iou_corrected = 0.0;
  double val_acc_missing = 0.0;
  double val_acc_obsolete = 0.0;
};

struct ValidationResult {
  double iou_corrupted = 0.0;
  double iou_corrected = 0.0;
  double acc_missing = 0.0;
  double acc_obsolete = 0.0;
};

// Corrupts every tile with seed derived from (seed, index) and scores the
// model's aligned map and detection heads.
ValidationResult validate_model(const RepairModel& model, const std::vector<LabeledTile>& tiles,
                                const CorruptionSpec& spec, const FieldCalibration& cal);

struct FitResult {
  std::string best_checkpoint;
  std::string metrics_path;
  std::vector<EpochMetrics> history;
  long iterations = 0;
  double cpu_seconds = 0.0;
};

using ProgressFn = std::function<void(const EpochMetrics&, long iterations, double cpu_seconds)>;

FitResult fit(const std::vector<LabeledTile>& train, const std::vector<LabeledTile>& val,
              const TrainConfig& config, const ProgressFn& progress = {});

// Model entry point shared by fit and the repair path: forward with gradient
// recording, loss, and backward into the generator parameters.
LossBreakdown train_step(Generator& model, const TrainingSample& sample, const LossWeights& weights,
                         const FieldCalibration& cal);

std::string metrics_json_line(const EpochMetrics& m);

// Corruption seed of training sample `index` in `epoch`; every epoch sees a
// fresh corruption of each tile.
std::uint64_t training_corruption_seed(std::uint64_t seed, int epoch, std::size_t index);

}  // namespace cadalign
