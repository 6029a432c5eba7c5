#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cadalign/geometry.hpp"
#include "cadalign/model.hpp"
#include "cadalign/raster.hpp"

namespace cadalign {

struct Span {
  int begin = 0;
  int end = 0;  // exclusive
  bool contains(int v) const { return v >= begin && v < end; }
};

struct Tile {
  int row0 = 0;
  int col0 = 0;
  Span interior_rows;  // image coordinates
  Span interior_cols;
};

struct TilePlan {
  int height = 0;
  int width = 0;
  int patch_size = 448;
  int border = 64;
  std::vector<Tile> tiles;

  int stride() const { return patch_size - 2 * border; }
};

// Origins step by patch_size - 2*border; the last tile on each axis is
// clamped to the image edge. Interior windows partition the image.
TilePlan plan_tiles(int height, int width, int patch_size = 448, int border = 64);

struct RepairThresholds {
  double tau_obs = 0.5;
  double tau_miss = 0.5;
  int min_area = 20;
  double regularize_tolerance = 2.0;
  bool orthogonalize = true;
};

struct RepairResult {
  BinaryMask aligned_map;
  BinaryMask final_map;
  std::set<int> removed_labels;
  std::map<int, SimilarityTransform> per_instance_transforms;
  std::vector<Ring> missing_polygons;
  std::vector<std::string> warnings;
};

using Regularizer = std::function<Ring(const Ring&, double tolerance)>;

// Douglas-Peucker simplification followed by snapping to a dominant
// orthogonal axis pair when >= 80% of the edge length is within 15 degrees of it.
Ring regularize_polygon(const Ring& polygon, double tolerance = 2.0, bool orthogonalize = true);

// Post-processing of one forward pass over the whole frame.
RepairResult repair_from_output(const BinaryMask& noisy_mask, const ModelOutput& output,
                                const RepairThresholds& thresholds, const FieldCalibration& cal,
                                const Regularizer& regularizer = {});

RepairResult repair_patch(const RepairModel& model, const IntensityImage& image,
                          const BinaryMask& noisy_mask, const RepairThresholds& thresholds = {},
                          const FieldCalibration& cal = {});

struct RepairImageOptions {
  RepairThresholds thresholds;
  FieldCalibration calibration;
  Regularizer regularizer;
  int workers = 1;
  // Observes which tile decided each instance (label, tile index); tests use it.
  std::function<void(int label, std::size_t tile)> on_decision;
};

RepairResult repair_image(const RepairModel& model, const IntensityImage& image,
                          const BinaryMask& noisy_mask, const TilePlan& plan,
                          const RepairImageOptions& options = {});

}  // namespace cadalign
