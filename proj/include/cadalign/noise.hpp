#pragma once

#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cadalign/geometry.hpp"
#include "cadalign/raster.hpp"
#include "cadalign/rng.hpp"

namespace cadalign {

struct CorruptionSpec {
  double max_disp = 64.0;
  double max_rot = std::numbers::pi / 6.0;
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double p_remove = 0.1;
  double p_inject = 0.1;  // per inject_region x inject_region cell
  double global_max_disp = 16.0;
  double global_max_rot = std::numbers::pi / 36.0;
  std::uint64_t seed = 0;

  int inject_region = 64;
  int inject_min_side = 10;
  int inject_max_side = 60;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct CorruptionRecord {
  // Keyed by GT label; transforms are anchored at the GT barycenter.
  std::map<int, SimilarityTransform> per_instance;
  std::map<int, Point2> barycenters;
  std::set<int> removed_labels;
  std::vector<Ring> injected_shapes;
  SimilarityTransform global_transform;
  Point2 global_anchor;

  // Transform that maps the corrupted instance of `label` back onto its GT
  // footprint, re-anchored at `noisy_barycenter`.
  SimilarityTransform correction_for(int label, Point2 noisy_barycenter) const;
  std::uint64_t digest() const;
};

struct TrainingSample {
  IntensityImage image;
  BinaryMask noisy_mask;
  BinaryMask gt_mask;
  BinaryMask missing_gt;
  BinaryMask obsolete_gt;
  CorruptionRecord record;
};

// Rewrites t (anchored at `from`) as the same map anchored at `to`.
SimilarityTransform reanchor(const SimilarityTransform& t, Point2 from, Point2 to);

// Warp of a binary instance followed by a 0.5 threshold.
BinaryMask warp_binary(const BinaryMask& mask, const SimilarityTransform& t, Point2 barycenter);

TrainingSample corrupt(const IntensityImage& image, const BinaryMask& gt_mask,
                       const CorruptionSpec& spec);

// Same as corrupt() without an image; the image field is left empty.
TrainingSample corrupt_mask(const BinaryMask& gt_mask, const CorruptionSpec& spec);

double displacement_iou_baseline(const BinaryMask& gt_mask, const CorruptionSpec& spec);

// The corrupted footprint of GT instance `label` as it appears in the noisy
// mask (per-instance warp followed by the global warp).
BinaryMask corrupted_instance(const BinaryMask& gt_instance, int label,
                              const CorruptionRecord& record);

}  // namespace cadalign
