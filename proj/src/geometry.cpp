#include "cadalign/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

namespace cadalign {

TransformField::TransformField(int width, int height, double fill)
    : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("field dimensions must be positive");
  values_.assign(static_cast<std::size_t>(kChannels) * width * height, fill);
}

void TransformField::fill_channel(int channel, double value) {
  const auto n = static_cast<std::size_t>(width_) * height_;
  std::fill_n(values_.begin() + static_cast<long>(channel * n), n, value);
}

void FieldCalibration::validate() const {
  if (!(max_translation > 0.0) || !(max_rotation > 0.0) || !(max_log_scale > 0.0))
    throw std::invalid_argument("field calibration ranges must be strictly positive");
}

SimilarityTransform calibrate(const RawTransform& raw, const FieldCalibration& cal) {
  return {raw[0] * cal.max_translation, raw[1] * cal.max_translation,
          raw[2] * cal.max_rotation, std::exp(raw[3] * cal.max_log_scale)};
}

RawTransform decalibrate(const SimilarityTransform& t, const FieldCalibration& cal) {
  return {t.tx / cal.max_translation, t.ty / cal.max_translation, t.theta / cal.max_rotation,
          std::log(t.scale) / cal.max_log_scale};
}

RawTransform calibrate_jacobian(const RawTransform& raw, const FieldCalibration& cal) {
  return {cal.max_translation, cal.max_translation, cal.max_rotation,
          std::exp(raw[3] * cal.max_log_scale) * cal.max_log_scale};
}

RawTransform pool_raw(const TransformField& field, const InstanceRegion& region) {
  if (region.pixels.empty()) throw std::invalid_argument("cannot pool over an empty region");
  RawTransform sum{};
  for (const auto& p : region.pixels) {
    if (p.row < 0 || p.col < 0 || p.row >= field.height() || p.col >= field.width())
      throw std::out_of_range("region pixel outside transform field");
    for (int ch = 0; ch < TransformField::kChannels; ++ch) sum[ch] += field.at(ch, p.row, p.col);
  }
  const double n = static_cast<double>(region.pixels.size());
  for (auto& v : sum) v /= n;
  return sum;
}

SimilarityTransform pool_instance_transform(const TransformField& field,
                                            const InstanceRegion& region,
                                            const FieldCalibration& cal) {
  return calibrate(pool_raw(field, region), cal);
}

double wrap_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  theta = std::fmod(theta, two_pi);
  if (theta <= -std::numbers::pi) theta += two_pi;
  if (theta > std::numbers::pi) theta -= two_pi;
  return theta;
}

Point2 apply_to_point(const SimilarityTransform& t, Point2 p, Point2 c) {
  const double cs = std::cos(t.theta) * t.scale;
  const double sn = std::sin(t.theta) * t.scale;
  const double dx = p.x - c.x;
  const double dy = p.y - c.y;
  return {cs * dx - sn * dy + c.x + t.tx, sn * dx + cs * dy + c.y + t.ty};
}

InvertedTransform invert(const SimilarityTransform& t, Point2 c) {
  if (!(t.scale > 0.0)) throw std::invalid_argument("similarity scale must be positive");
  // f^-1(p) = A^-1 (p - c') + c' - t with c' = c + t.
  return {{-t.tx, -t.ty, wrap_angle(-t.theta), 1.0 / t.scale}, {c.x + t.tx, c.y + t.ty}};
}

SimilarityTransform compose(const SimilarityTransform& second, Point2 c2,
                            const SimilarityTransform& first, Point2 c1) {
  const Point2 moved = apply_to_point(second, {c1.x + first.tx, c1.y + first.ty}, c2);
  return {moved.x - c1.x, moved.y - c1.y, wrap_angle(first.theta + second.theta),
          first.scale * second.scale};
}

MaskWindow MaskWindow::from_region(const InstanceRegion& region) {
  if (region.pixels.empty()) throw std::invalid_argument("empty region");
  MaskWindow w{ProbabilityMask(region.col_max - region.col_min + 1,
                               region.row_max - region.row_min + 1, 0.0),
               region.row_min, region.col_min};
  for (const auto& p : region.pixels) w.values.at(p.row - w.row0, p.col - w.col0) = 1.0;
  return w;
}

namespace {

// Inverse map q = M (p - c - t) + c with M = R(-theta) / s, written so that
// the identity transform reproduces integer sample positions exactly.
struct InverseMap {
  double a, b;  // M = [[a, b], [-b, a]]
  SimilarityTransform t;
  Point2 c;

  InverseMap(const SimilarityTransform& tr, Point2 anchor) : t(tr), c(anchor) {
    if (!(tr.scale > 0.0)) throw std::invalid_argument("similarity scale must be positive");
    a = std::cos(tr.theta) / tr.scale;
    b = std::sin(tr.theta) / tr.scale;
  }

  Point2 operator()(double px, double py) const {
    const double ux = px - c.x, uy = py - c.y;
    return {px + (a - 1.0) * ux + b * uy - (a * t.tx + b * t.ty),
            py - b * ux + (a - 1.0) * uy - (-b * t.tx + a * t.ty)};
  }
};

struct Window {
  int r0, r1, c0, c1;  // inclusive; empty when r0 > r1 or c0 > c1
};

// Output pixels whose sample point can touch the mask window support.
Window reachable_window(const MaskWindow& mask, const SimilarityTransform& t, Point2 c,
                        int width, int height) {
  const double x0 = mask.col0 - 1.0, x1 = mask.col0 + mask.values.width();
  const double y0 = mask.row0 - 1.0, y1 = mask.row0 + mask.values.height();
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const Point2 corner : {Point2{x0, y0}, Point2{x1, y0}, Point2{x0, y1}, Point2{x1, y1}}) {
    const Point2 q = apply_to_point(t, corner, c);
    xmin = std::min(xmin, q.x);
    xmax = std::max(xmax, q.x);
    ymin = std::min(ymin, q.y);
    ymax = std::max(ymax, q.y);
  }
  auto clampi = [](double v, int lo, int hi) {
    if (!(v > lo)) return lo;  // also catches NaN
    if (v > hi) return hi;
    return static_cast<int>(v);
  };
  return {clampi(std::floor(ymin), 0, height), clampi(std::ceil(ymax), -1, height - 1),
          clampi(std::floor(xmin), 0, width), clampi(std::ceil(xmax), -1, width - 1)};
}

struct Sample {
  double value;
  double d_qx;
  double d_qy;
};

Sample bilinear(const MaskWindow& mask, double qx, double qy) {
  const double lx = qx - mask.col0;
  const double ly = qy - mask.row0;
  const double fx0 = std::floor(lx), fy0 = std::floor(ly);
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double fx = lx - fx0, fy = ly - fy0;
  const auto& v = mask.values;
  auto px = [&](int r, int col) { return v.contains(r, col) ? v.at(r, col) : 0.0; };
  const double m00 = px(y0, x0), m01 = px(y0, x0 + 1);
  const double m10 = px(y0 + 1, x0), m11 = px(y0 + 1, x0 + 1);
  const double top = m00 + fx * (m01 - m00);
  const double bot = m10 + fx * (m11 - m10);
  return {top + fy * (bot - top), (1.0 - fy) * (m01 - m00) + fy * (m11 - m10),
          (1.0 - fx) * (m10 - m00) + fx * (m11 - m01)};
}

}  // namespace

void warp_accumulate(const MaskWindow& mask, const SimilarityTransform& t, Point2 barycenter,
                     ProbabilityMask& frame) {
  const InverseMap inv(t, barycenter);
  const Window win = reachable_window(mask, t, barycenter, frame.width(), frame.height());
  for (int r = win.r0; r <= win.r1; ++r)
    for (int col = win.c0; col <= win.c1; ++col) {
      const Point2 q = inv(col, r);
      frame.at(r, col) += bilinear(mask, q.x, q.y).value;
    }
}

ProbabilityMask warp_instance(const ProbabilityMask& mask, const SimilarityTransform& t,
                              Point2 barycenter) {
  ProbabilityMask out(mask.width(), mask.height(), 0.0);
  warp_accumulate(MaskWindow::full(mask), t, barycenter, out);
  return out;
}

WarpGradient warp_backward(const MaskWindow& mask, const SimilarityTransform& t,
                           Point2 barycenter, const ProbabilityMask& upstream) {
  const InverseMap inv(t, barycenter);
  const Window win = reachable_window(mask, t, barycenter, upstream.width(), upstream.height());
  const double cs = std::cos(t.theta), sn = std::sin(t.theta), s = t.scale;
  WarpGradient g;
  for (int r = win.r0; r <= win.r1; ++r)
    for (int col = win.c0; col <= win.c1; ++col) {
      const double up = upstream.at(r, col);
      if (up == 0.0) continue;
      const Point2 q = inv(col, r);
      const Sample smp = bilinear(mask, q.x, q.y);
      if (smp.d_qx == 0.0 && smp.d_qy == 0.0) continue;
      const double gx = up * smp.d_qx, gy = up * smp.d_qy;
      const double rx = q.x - barycenter.x, ry = q.y - barycenter.y;
      g.d_tx += gx * (-cs / s) + gy * (sn / s);
      g.d_ty += gx * (-sn / s) + gy * (-cs / s);
      g.d_theta += gx * ry - gy * rx;
      g.d_scale += -(gx * rx + gy * ry) / s;
    }
  return g;
}

ProbabilityMask compose_unclamped(const std::vector<InstanceWarp>& instances, int width,
                                  int height) {
  ProbabilityMask sum(width, height, 0.0);
  for (const auto& inst : instances) warp_accumulate(inst.mask, inst.transform, inst.barycenter, sum);
  return sum;
}

ProbabilityMask compose_aligned_map(const std::vector<InstanceWarp>& instances, int width,
                                    int height) {
  ProbabilityMask out = compose_unclamped(instances, width, height);
  for (auto& v : out.values()) v = std::min(v, 1.0);
  return out;
}

ProbabilityMask compose_aligned_map(
    const std::vector<std::tuple<ProbabilityMask, SimilarityTransform, Point2>>& instances) {
  if (instances.empty()) throw std::invalid_argument("compose_aligned_map: no instances");
  const int w = std::get<0>(instances.front()).width();
  const int h = std::get<0>(instances.front()).height();
  std::vector<InstanceWarp> warps;
  warps.reserve(instances.size());
  for (const auto& [mask, t, c] : instances) {
    if (mask.width() != w || mask.height() != h)
      throw std::invalid_argument("compose_aligned_map: dimension mismatch");
    warps.push_back({MaskWindow::full(mask), t, c});
  }
  return compose_aligned_map(warps, w, h);
}

}  // namespace cadalign
