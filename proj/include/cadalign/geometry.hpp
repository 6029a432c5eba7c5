#pragma once

#include <array>
#include <numbers>
#include <vector>

#include "cadalign/raster.hpp"

namespace cadalign {

// Maps q to s * R(theta) * (q - c) + c + (tx, ty) for an anchor c.
struct SimilarityTransform {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;
  double scale = 1.0;

  static SimilarityTransform identity() { return {}; }
  friend bool operator==(const SimilarityTransform&, const SimilarityTransform&) = default;
};

// Dense 4-channel raw field, channel order (tx, ty, theta, scale), values in [-1,1].
class TransformField {
public:
  static constexpr int kChannels = 4;

  TransformField() = default;
  TransformField(int width, int height, double fill = 0.0);

  int width() const { return width_; }
  int height() const { return height_; }

  double& at(int channel, int row, int col) { return values_[offset(channel, row, col)]; }
  double at(int channel, int row, int col) const { return values_[offset(channel, row, col)]; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  // Fills one channel with a constant.
  void fill_channel(int channel, double value);

private:
  std::size_t offset(int channel, int row, int col) const {
    return (static_cast<std::size_t>(channel) * height_ + row) * width_ + col;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

// Maps tanh-range raw values to physical units.
struct FieldCalibration {
  double max_translation = 64.0;
  double max_rotation = std::numbers::pi / 6.0;
  double max_log_scale = 0.22314355131420976;  // ln 1.25

  void validate() const;
};

using RawTransform = std::array<double, 4>;

SimilarityTransform calibrate(const RawTransform& raw, const FieldCalibration& cal);
// Inverse of calibrate; theta and scale are not clamped to the raw range.
RawTransform decalibrate(const SimilarityTransform& t, const FieldCalibration& cal);
// d(tx, ty, theta, scale) / d(raw) per channel (the map is diagonal).
RawTransform calibrate_jacobian(const RawTransform& raw, const FieldCalibration& cal);

RawTransform pool_raw(const TransformField& field, const InstanceRegion& region);
SimilarityTransform pool_instance_transform(const TransformField& field,
                                            const InstanceRegion& region,
                                            const FieldCalibration& cal);

Point2 apply_to_point(const SimilarityTransform& t, Point2 p, Point2 barycenter);

struct InvertedTransform {
  SimilarityTransform transform;
  Point2 barycenter;  // image of the original barycenter
};
InvertedTransform invert(const SimilarityTransform& t, Point2 barycenter);

// Composition g o f expressed about f's barycenter.
SimilarityTransform compose(const SimilarityTransform& second, Point2 second_barycenter,
                            const SimilarityTransform& first, Point2 first_barycenter);

double wrap_angle(double theta);  // to (-pi, pi]

// A soft instance mask stored in a sub-window of a larger frame. Samples
// outside the window read 0.
struct MaskWindow {
  ProbabilityMask values;
  int row0 = 0;
  int col0 = 0;

  static MaskWindow full(const ProbabilityMask& mask) { return {mask, 0, 0}; }
  // Tight window around the nonzero support of a region.
  static MaskWindow from_region(const InstanceRegion& region);
};

struct WarpGradient {
  double d_tx = 0.0;
  double d_ty = 0.0;
  double d_theta = 0.0;
  double d_scale = 0.0;
};

// Output pixel p samples the mask at f^-1(p) with bilinear interpolation.
ProbabilityMask warp_instance(const ProbabilityMask& mask, const SimilarityTransform& t,
                              Point2 barycenter);

// Adds the warped window into `frame`; only pixels the warp can reach are visited.
void warp_accumulate(const MaskWindow& mask, const SimilarityTransform& t, Point2 barycenter,
                     ProbabilityMask& frame);

// Vector-Jacobian product: gradient of sum_p upstream(p) * warp(mask)(p) with
// respect to the transform parameters.
WarpGradient warp_backward(const MaskWindow& mask, const SimilarityTransform& t,
                           Point2 barycenter, const ProbabilityMask& upstream);

struct InstanceWarp {
  MaskWindow mask;
  SimilarityTransform transform;
  Point2 barycenter;
};

// Pixelwise min(sum of warped instances, 1).
ProbabilityMask compose_aligned_map(const std::vector<InstanceWarp>& instances, int width,
                                    int height);
ProbabilityMask compose_aligned_map(
    const std::vector<std::tuple<ProbabilityMask, SimilarityTransform, Point2>>& instances);

// Subgradient mask of the overlap clamp: 1 where the unclamped sum is below 1.
ProbabilityMask compose_unclamped(const std::vector<InstanceWarp>& instances, int width,
                                  int height);

}  // namespace cadalign
