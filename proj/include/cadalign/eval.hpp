#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cadalign/inference.hpp"
#include "cadalign/model.hpp"
#include "cadalign/noise.hpp"

namespace cadalign {

enum class EvalMode { Alignment, AlignAndDetect };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct Provenance {
  std::string checkpoint;
  std::string dataset;
  std::uint64_t seed = 0;
};

struct EvalReport {
  EvalMode mode = EvalMode::Alignment;
  double iou = 0.0;
  double accuracy = 0.0;
  int instance_count = 0;
  int removed = 0;
  int added = 0;
  Provenance provenance;
};

// Alignment scores aligned_map against the ground-truth components that
// best match (by IoU) an instance of input_mask; AlignAndDetect scores
// final_map against the whole ground truth. gt is always the reference.
EvalReport evaluate(const RepairResult& pred, const BinaryMask& gt_mask, const BinaryMask& input_mask,
                    EvalMode mode);

// Ground truth restricted to the components matched by input instances.
BinaryMask matched_ground_truth(const BinaryMask& gt_mask, const BinaryMask& input_mask);

std::string report_json(const EvalReport& r);

struct SweepRow {
  double max_disp = 0.0;
  double iou_corrupted = 0.0;
  double iou_corrected = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepOptions {
  std::vector<double> displacements{8, 16, 24, 32, 40, 48, 56, 64};
  CorruptionSpec corruption;  // max_disp is overridden per row
  int trials = 1;
  std::uint64_t seed = 0;
  RepairThresholds thresholds;
  FieldCalibration calibration;
};

// Mean IoU over the dataset of the corrupted mask and of the repaired final
// map, one row per displacement bound. D = 0 is a noise-free control.
// Every row reuses the same per-sample seeds, so the draws scale with D.
std::vector<SweepRow> displacement_sweep(const RepairModel& model, const std::vector<LabeledTile>& dataset,
                                         const SweepOptions& options);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

std::string sweep_svg(const std::vector<SweepRow>& rows);
void emit_plot(const std::vector<SweepRow>& rows, const std::string& out_path);

}  // namespace cadalign
