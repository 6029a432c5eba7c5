#include "cadalign/noise.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cadalign/shapes.hpp"

namespace cadalign {

void CorruptionSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("corruption." + field + ": " + why);
  };
  if (!(p_remove >= 0.0 && p_remove <= 1.0)) fail("p_remove", "must lie in [0, 1]");
  if (!(p_inject >= 0.0 && p_inject <= 1.0)) fail("p_inject", "must lie in [0, 1]");
  if (!(scale_lo > 0.0)) fail("scale_lo", "must be > 0");
  if (!(scale_hi >= scale_lo)) fail("scale_hi", "must be >= scale_lo");
  if (!(max_disp >= 0.0)) fail("max_disp", "must be >= 0");
  if (!(max_rot >= 0.0)) fail("max_rot", "must be >= 0");
  if (!(global_max_disp >= 0.0)) fail("global_max_disp", "must be >= 0");
  if (!(global_max_rot >= 0.0)) fail("global_max_rot", "must be >= 0");
  if (inject_region < 1) fail("inject_region", "must be >= 1");
  if (inject_min_side < 1) fail("inject_min_side", "must be >= 1");
  if (inject_max_side < inject_min_side) fail("inject_max_side", "must be >= inject_min_side");
}

SimilarityTransform reanchor(const SimilarityTransform& t, Point2 from, Point2 to) {
  // A(q - from) + from + t = A(q - to) + to + [A(to - from) + from + t - to]
  const Point2 moved = apply_to_point(t, to, from);
  return {moved.x - to.x, moved.y - to.y, t.theta, t.scale};
}

SimilarityTransform CorruptionRecord::correction_for(int label, Point2 noisy_barycenter) const {
  const auto it = per_instance.find(label);
  if (it == per_instance.end()) throw std::out_of_range("no corruption recorded for label");
  const Point2 c = barycenters.at(label);
  const InvertedTransform g_inv = invert(global_transform, global_anchor);
  const InvertedTransform t_inv = invert(it->second, c);
  const SimilarityTransform both =
      compose(t_inv.transform, t_inv.barycenter, g_inv.transform, g_inv.barycenter);
  return reanchor(both, g_inv.barycenter, noisy_barycenter);
}

std::uint64_t CorruptionRecord::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix_seed(h ^ bits);
  };
  for (const auto& [label, t] : per_instance) {
    feed(label);
    feed(t.tx), feed(t.ty), feed(t.theta), feed(t.scale);
  }
  for (int l : removed_labels) feed(-l);
  for (const auto& ring : injected_shapes)
    for (const auto& p : ring) feed(p.x), feed(p.y);
  feed(global_transform.tx), feed(global_transform.ty), feed(global_transform.theta);
  return h;
}

BinaryMask warp_binary(const BinaryMask& mask, const SimilarityTransform& t, Point2 barycenter) {
  return to_binary(warp_instance(to_probability(mask), t, barycenter), 0.5);
}

namespace {

BinaryMask warp_binary_window(const InstanceRegion& region, const SimilarityTransform& t,
                              int width, int height) {
  ProbabilityMask frame(width, height, 0.0);
  warp_accumulate(MaskWindow::from_region(region), t, region.barycenter, frame);
  return to_binary(frame, 0.5);
}

void merge_into(BinaryMask& dst, const BinaryMask& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = dst[i] | src[i];
}

}  // namespace

TrainingSample corrupt_mask(const BinaryMask& gt_mask, const CorruptionSpec& spec) {
  spec.validate();
  const int w = gt_mask.width();
  const int h = gt_mask.height();
  Rng rng(spec.seed);

  TrainingSample s;
  s.gt_mask = gt_mask;
  s.noisy_mask = BinaryMask(w, h);
  s.missing_gt = BinaryMask(w, h);
  s.obsolete_gt = BinaryMask(w, h);
  auto& rec = s.record;

  const InstanceMap imap = label_instances(gt_mask);
  const auto regions = all_regions(imap);

  // Removal decisions come first so the draw sequence does not depend on
  // the transform bounds.
  for (const auto& reg : regions) {
    if (rng.bernoulli(spec.p_remove)) {
      rec.removed_labels.insert(reg.label);
      for (const auto& p : reg.pixels) s.missing_gt.at(p.row, p.col) = 1;
    }
  }

  // Injections avoid the GT footprints dilated by two pixels so that they stay
  // separate instances.
  BinaryMask forbidden = dilate(gt_mask, 2);
  const int cells_y = (h + spec.inject_region - 1) / spec.inject_region;
  const int cells_x = (w + spec.inject_region - 1) / spec.inject_region;
  BinaryMask injected(w, h);
  for (int cy = 0; cy < cells_y; ++cy)
    for (int cx = 0; cx < cells_x; ++cx) {
      if (!rng.bernoulli(spec.p_inject)) continue;
      for (int attempt = 0; attempt < 20; ++attempt) {
        const int side_hi = std::min({spec.inject_max_side, w, h});
        const int side_lo = std::min(spec.inject_min_side, side_hi);
        const Ring ring = random_footprint(rng, side_lo, side_hi,
                                           cy * spec.inject_region, cx * spec.inject_region,
                                           spec.inject_region, w, h);
        const BinaryMask shape = rasterize_polygons({ring}, w, h);
        bool clash = false;
        for (std::size_t i = 0; i < shape.size() && !clash; ++i)
          clash = shape[i] && forbidden[i];
        if (clash) continue;
        merge_into(injected, shape);
        merge_into(forbidden, dilate(shape, 2));
        rec.injected_shapes.push_back(ring);
        break;
      }
    }

  for (const auto& reg : regions) {
    if (rec.removed_labels.count(reg.label)) continue;
    const SimilarityTransform t{rng.uniform(-spec.max_disp, spec.max_disp),
                                rng.uniform(-spec.max_disp, spec.max_disp),
                                rng.uniform(-spec.max_rot, spec.max_rot),
                                rng.uniform(spec.scale_lo, spec.scale_hi)};
    rec.per_instance[reg.label] = t;
    rec.barycenters[reg.label] = reg.barycenter;
    merge_into(s.noisy_mask, warp_binary_window(reg, t, w, h));
  }
  merge_into(s.noisy_mask, injected);

  rec.global_anchor = {(w - 1) / 2.0, (h - 1) / 2.0};
  rec.global_transform = {rng.uniform(-spec.global_max_disp, spec.global_max_disp),
                          rng.uniform(-spec.global_max_disp, spec.global_max_disp),
                          rng.uniform(-spec.global_max_rot, spec.global_max_rot), 1.0};
  if (!(rec.global_transform == SimilarityTransform::identity())) {
    s.noisy_mask = warp_binary(s.noisy_mask, rec.global_transform, rec.global_anchor);
    injected = warp_binary(injected, rec.global_transform, rec.global_anchor);
  }
  for (std::size_t i = 0; i < injected.size(); ++i)
    s.obsolete_gt[i] = injected[i] && s.noisy_mask[i];
  return s;
}

TrainingSample corrupt(const IntensityImage& image, const BinaryMask& gt_mask,
                       const CorruptionSpec& spec) {
  if (image.width != gt_mask.width() || image.height != gt_mask.height())
    throw std::invalid_argument("corrupt: image and mask dimensions differ");
  TrainingSample s = corrupt_mask(gt_mask, spec);
  s.image = image;
  return s;
}

double displacement_iou_baseline(const BinaryMask& gt_mask, const CorruptionSpec& spec) {
  return iou(corrupt_mask(gt_mask, spec).noisy_mask, gt_mask);
}

BinaryMask corrupted_instance(const BinaryMask& gt_instance, int label,
                              const CorruptionRecord& record) {
  const BinaryMask local =
      warp_binary(gt_instance, record.per_instance.at(label), record.barycenters.at(label));
  if (record.global_transform == SimilarityTransform::identity()) return local;
  return warp_binary(local, record.global_transform, record.global_anchor);
}

}  // namespace cadalign
