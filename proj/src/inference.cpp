#include "cadalign/inference.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <optional>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <thread>

namespace cadalign {

namespace {

std::vector<std::pair<int, Span>> axis_tiles(int extent, int patch, int border) {
  std::vector<int> origins;
  if (extent <= patch) {
    origins.push_back(0);
  } else {
    const int stride = patch - 2 * border;
    for (int o = 0; o + patch < extent; o += stride) origins.push_back(o);
    origins.push_back(extent - patch);
  }
  std::vector<std::pair<int, Span>> out;
  int begin = 0;
  for (std::size_t i = 0; i < origins.size(); ++i) {
    const bool last = i + 1 == origins.size();
    const int end = last ? extent : origins[i] + patch - border;
    out.push_back({origins[i], {begin, end}});
    begin = end;
  }
  return out;
}

}  // namespace

TilePlan plan_tiles(int height, int width, int patch_size, int border) {
  if (border < 0) throw std::invalid_argument("tile border must be >= 0");
  if (patch_size <= 2 * border)
    throw std::invalid_argument("patch_size " + std::to_string(patch_size) + " must exceed twice the border (" +
                                std::to_string(border) + ")");
  if (height <= 0 || width <= 0) throw std::invalid_argument("image dimensions must be positive");
  TilePlan plan;
  plan.height = height;
  plan.width = width;
  plan.patch_size = patch_size;
  plan.border = border;
  for (const auto& [r0, rs] : axis_tiles(height, patch_size, border))
    for (const auto& [c0, cs] : axis_tiles(width, patch_size, border)) plan.tiles.push_back({r0, c0, rs, cs});
  return plan;
}

namespace {

Point2 rotate(Point2 p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

double segment_distance(Point2 p, Point2 a, Point2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - a.x - t * dx, p.y - a.y - t * dy);
}

void douglas_peucker(const Ring& pts, std::size_t lo, std::size_t hi, double tol, std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double worst = -1.0;
  std::size_t at = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = segment_distance(pts[i], pts[lo], pts[hi % pts.size()]);
    if (d > worst) worst = d, at = i;
  }
  if (worst > tol) {
    keep[at] = true;
    douglas_peucker(pts, lo, at, tol, keep);
    douglas_peucker(pts, at, hi, tol, keep);
  }
}

Ring drop_collinear(const Ring& ring) {
  Ring out;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 prev = ring[(i + n - 1) % n], cur = ring[i], next = ring[(i + 1) % n];
    if (cur == prev) continue;
    const double cross = (cur.x - prev.x) * (next.y - cur.y) - (cur.y - prev.y) * (next.x - cur.x);
    if (std::abs(cross) > 1e-9) out.push_back(cur);
  }
  return out;
}

Ring simplify(const Ring& ring, double tol) {
  const std::size_t n = ring.size();
  std::size_t far = 0;
  double best = -1.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double d = std::hypot(ring[i].x - ring[0].x, ring[i].y - ring[0].y);
    if (d > best) best = d, far = i;
  }
  std::vector<bool> keep(n, false);
  keep[0] = keep[far] = true;
  douglas_peucker(ring, 0, far, tol, keep);
  douglas_peucker(ring, far, n, tol, keep);
  Ring out;
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) out.push_back(ring[i]);
  return drop_collinear(out);
}

// Area IoU of two rings, rasterized at 4x on their joint bounding box.
double ring_iou(const Ring& a, const Ring& b) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const Ring* r : {&a, &b})
    for (const auto& p : *r) x0 = std::min(x0, p.x), y0 = std::min(y0, p.y), x1 = std::max(x1, p.x), y1 = std::max(y1, p.y);
  constexpr double k = 4.0;
  const int w = static_cast<int>(std::ceil((x1 - x0) * k)) + 2;
  const int h = static_cast<int>(std::ceil((y1 - y0) * k)) + 2;
  auto scaled = [&](const Ring& r) {
    Ring s;
    for (const auto& p : r) s.push_back({(p.x - x0) * k + 1.0, (p.y - y0) * k + 1.0});
    return s;
  };
  return iou(rasterize_polygons({scaled(a)}, w, h), rasterize_polygons({scaled(b)}, w, h));
}

std::optional<Ring> orthogonal_snap(const Ring& ring) {
  const std::size_t n = ring.size();
  double sx = 0.0, sy = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a = ring[i], b = ring[(i + 1) % n];
    const double l = std::hypot(b.x - a.x, b.y - a.y);
    const double ang = std::atan2(b.y - a.y, b.x - a.x);
    sx += l * std::cos(4.0 * ang);
    sy += l * std::sin(4.0 * ang);
    total += l;
  }
  if (total <= 0.0) return std::nullopt;
  const double axis = std::atan2(sy, sx) / 4.0;
  const double quarter = std::numbers::pi / 2.0;
  double aligned = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a = ring[i], b = ring[(i + 1) % n];
    const double rel = std::atan2(b.y - a.y, b.x - a.x) - axis;
    const double off = std::abs(rel - quarter * std::round(rel / quarter));
    if (off <= std::numbers::pi / 12.0) aligned += std::hypot(b.x - a.x, b.y - a.y);
  }
  if (aligned < 0.8 * total) return std::nullopt;

  Ring r;
  for (const auto& p : ring) r.push_back(rotate(p, -axis));
  // Runs of consecutive edges with the same orientation; each run becomes
  // one axis-parallel line at the length-weighted mean of its midpoints.
  struct Run {
    bool horizontal;
    double weight = 0.0, sum = 0.0;
  };
  std::vector<bool> horiz(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a = r[i], b = r[(i + 1) % n];
    horiz[i] = std::abs(b.x - a.x) >= std::abs(b.y - a.y);
  }
  std::size_t start = n;
  for (std::size_t i = 0; i < n; ++i)
    if (horiz[i] != horiz[(i + n - 1) % n]) {
      start = i;
      break;
    }
  if (start == n) return std::nullopt;
  std::vector<Run> runs;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = (start + k) % n;
    if (runs.empty() || runs.back().horizontal != horiz[i]) runs.push_back({horiz[i]});
    const Point2 a = r[i], b = r[(i + 1) % n];
    const double l = std::hypot(b.x - a.x, b.y - a.y);
    runs.back().weight += l;
    runs.back().sum += l * (horiz[i] ? 0.5 * (a.y + b.y) : 0.5 * (a.x + b.x));
  }
  if (runs.size() < 4 || runs.size() % 2 != 0) return std::nullopt;
  Ring out;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const Run& a = runs[k];
    const Run& b = runs[(k + 1) % runs.size()];
    const double va = a.weight > 0.0 ? a.sum / a.weight : 0.0;
    const double vb = b.weight > 0.0 ? b.sum / b.weight : 0.0;
    out.push_back(rotate(a.horizontal ? Point2{vb, va} : Point2{va, vb}, axis));
  }
  out = drop_collinear(out);
  if (out.size() < 3) return std::nullopt;
  return out;
}

}  // namespace

Ring regularize_polygon(const Ring& polygon, double tolerance, bool orthogonalize) {
  if (polygon.size() < 3) throw std::invalid_argument("regularize_polygon: ring needs at least 3 vertices");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("regularize_polygon: tolerance must be >= 0");
  Ring simplified = simplify(polygon, tolerance);
  if (simplified.size() < 3) return polygon;
  if (!orthogonalize) return simplified;
  const auto snapped = orthogonal_snap(simplified);
  if (!snapped || ring_iou(*snapped, polygon) < 0.85) return simplified;
  return *snapped;
}

namespace {

void merge_missing(const BinaryMask& missing, const RepairThresholds& th, const Regularizer& regularizer,
                   RepairResult& result) {
  const InstanceMap imap = label_instances(missing);
  BinaryMask kept(missing.width(), missing.height());
  bool any = false;
  for (const auto& reg : all_regions(imap))
    if (reg.pixel_count() >= th.min_area) {
      for (const auto& p : reg.pixels) kept.at(p.row, p.col) = 1;
      any = true;
    }
  if (any)
    for (const Ring& ring : vectorize_mask(kept)) {
      Ring reg = regularizer ? regularizer(ring, th.regularize_tolerance)
                             : regularize_polygon(ring, th.regularize_tolerance, th.orthogonalize);
      result.missing_polygons.push_back(std::move(reg));
    }
  result.final_map = result.aligned_map;
  const BinaryMask raster = rasterize_polygons(result.missing_polygons, missing.width(), missing.height());
  for (std::size_t i = 0; i < raster.size(); ++i) result.final_map[i] |= raster[i];
}

double mean_over(const ProbabilityMask& m, const InstanceRegion& reg, int dr = 0, int dc = 0) {
  double s = 0.0;
  for (const auto& p : reg.pixels) s += m.at(p.row - dr, p.col - dc);
  return s / reg.pixel_count();
}

}  // namespace

RepairResult repair_from_output(const BinaryMask& noisy_mask, const ModelOutput& output,
                                const RepairThresholds& thresholds, const FieldCalibration& cal,
                                const Regularizer& regularizer) {
  const int w = noisy_mask.width(), h = noisy_mask.height();
  if (output.field.width() != w || output.field.height() != h || output.missing.width() != w ||
      output.missing.height() != h || !output.missing.same_shape(output.obsolete))
    throw std::invalid_argument("model output does not match the mask dimensions");
  RepairResult result;
  std::vector<InstanceWarp> warps;
  for (const auto& reg : all_regions(label_instances(noisy_mask))) {
    if (mean_over(output.obsolete, reg) > thresholds.tau_obs) {
      result.removed_labels.insert(reg.label);
      continue;
    }
    const SimilarityTransform t = pool_instance_transform(output.field, reg, cal);
    result.per_instance_transforms[reg.label] = t;
    warps.push_back({MaskWindow::from_region(reg), t, reg.barycenter});
  }
  result.aligned_map = to_binary(compose_aligned_map(warps, w, h), 0.5);
  merge_missing(to_binary(output.missing, thresholds.tau_miss), thresholds, regularizer, result);
  return result;
}

RepairResult repair_patch(const RepairModel& model, const IntensityImage& image, const BinaryMask& noisy_mask,
                          const RepairThresholds& thresholds, const FieldCalibration& cal) {
  if (image.width != noisy_mask.width() || image.height != noisy_mask.height())
    throw std::invalid_argument("image and mask dimensions differ");
  return repair_from_output(noisy_mask, model.predict(image, noisy_mask), thresholds, cal);
}

namespace {

struct Decision {
  int label = 0;
  bool removed = false;
  SimilarityTransform transform;
  std::string warning;
};

BinaryMask crop_mask(const BinaryMask& m, int row0, int col0, int size) {
  BinaryMask out(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      if (m.contains(row0 + r, col0 + c)) out.at(r, c) = m.at(row0 + r, col0 + c);
  return out;
}

}  // namespace

RepairResult repair_image(const RepairModel& model, const IntensityImage& image, const BinaryMask& noisy_mask,
                          const TilePlan& plan, const RepairImageOptions& options) {
  const int w = noisy_mask.width(), h = noisy_mask.height();
  if (image.width != w || image.height != h) throw std::invalid_argument("image and mask dimensions differ");
  if (plan.width != w || plan.height != h)
    throw std::invalid_argument("tile plan is for " + std::to_string(plan.width) + "x" +
                                std::to_string(plan.height) + " but the image is " + std::to_string(w) + "x" +
                                std::to_string(h));
  const std::vector<InstanceRegion> regions = all_regions(label_instances(noisy_mask));
  const std::size_t nt = plan.tiles.size();
  std::vector<std::vector<std::size_t>> owned(nt);
  std::vector<bool> has_owner(regions.size(), false);
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const int row = static_cast<int>(std::lround(regions[k].barycenter.y));
    const int col = static_cast<int>(std::lround(regions[k].barycenter.x));
    for (std::size_t t = 0; t < nt; ++t)
      if (plan.tiles[t].interior_rows.contains(row) && plan.tiles[t].interior_cols.contains(col)) {
        owned[t].push_back(k);
        has_owner[k] = true;
        break;
      }
  }
  for (std::size_t k = 0; k < regions.size(); ++k)
    if (!has_owner[k]) throw std::invalid_argument("tile plan does not cover instance " + std::to_string(regions[k].label));

  const int patch = plan.patch_size;
  const int interior = plan.stride();
  const RepairThresholds& th = options.thresholds;
  std::vector<std::vector<Decision>> decisions(nt);
  BinaryMask missing(w, h);

  auto run_tile = [&](std::size_t t) {
    const Tile& tile = plan.tiles[t];
    const ModelOutput out = model.predict(image.crop(tile.row0, tile.col0, patch, patch),
                                          crop_mask(noisy_mask, tile.row0, tile.col0, patch));
    for (std::size_t k : owned[t]) {
      const InstanceRegion& reg = regions[k];
      Decision d;
      d.label = reg.label;
      const int bw = reg.col_max - reg.col_min + 1, bh = reg.row_max - reg.row_min + 1;
      const bool inside = reg.row_min >= tile.row0 && reg.col_min >= tile.col0 && reg.row_max < tile.row0 + patch &&
                          reg.col_max < tile.col0 + patch;
      if (bw > interior || bh > interior || !inside) {
        d.warning = "instance " + std::to_string(reg.label) + " (" + std::to_string(bw) + "x" + std::to_string(bh) +
                    " px) does not fit its patch; passed through unchanged";
      } else if (mean_over(out.obsolete, reg, tile.row0, tile.col0) > th.tau_obs) {
        d.removed = true;
      } else {
        InstanceRegion local = reg;
        for (auto& p : local.pixels) p.row -= tile.row0, p.col -= tile.col0;
        d.transform = pool_instance_transform(out.field, local, options.calibration);
      }
      decisions[t].push_back(std::move(d));
    }
    for (int r = tile.interior_rows.begin; r < tile.interior_rows.end; ++r)
      for (int c = tile.interior_cols.begin; c < tile.interior_cols.end; ++c)
        missing.at(r, c) = out.missing.at(r - tile.row0, c - tile.col0) >= th.tau_miss ? 1 : 0;
  };

  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(nt)));
  if (workers == 1) {
    for (std::size_t t = 0; t < nt; ++t) run_tile(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i)
      pool.emplace_back([&] {
        for (std::size_t t; (t = next++) < nt;) {
          try {
            run_tile(t);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    for (auto& th_ : pool) th_.join();
    if (error) std::rethrow_exception(error);
  }

  // Reduce by label so the result does not depend on tile order.
  std::vector<std::pair<const Decision*, std::size_t>> by_label(regions.size(), {nullptr, 0});
  for (std::size_t t = 0; t < nt; ++t)
    for (const Decision& d : decisions[t]) by_label[d.label - 1] = {&d, t};
  RepairResult result;
  std::vector<InstanceWarp> warps;
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const auto& [d, tile] = by_label[k];
    if (options.on_decision) options.on_decision(d->label, tile);
    if (!d->warning.empty()) result.warnings.push_back(d->warning);
    if (d->removed) {
      result.removed_labels.insert(d->label);
      continue;
    }
    result.per_instance_transforms[d->label] = d->transform;
    warps.push_back({MaskWindow::from_region(regions[k]), d->transform, regions[k].barycenter});
  }
  result.aligned_map = to_binary(compose_aligned_map(warps, w, h), 0.5);
  merge_missing(missing, th, options.regularizer, result);
  return result;
}

}  // namespace cadalign
