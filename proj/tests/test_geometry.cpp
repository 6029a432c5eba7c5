#include <cmath>
#include <numbers>
#include <tuple>
#include <vector>

#include "cadalign/geometry.hpp"
#include "cadalign/noise.hpp"
#include "cadalign/rng.hpp"
#include "doctest.h"
#include "warp_fixtures.hpp"

using namespace cadalign;
using namespace cadalign::testing;

namespace {

BinaryMask rect(int w, int h, int r0, int c0, int rh, int cw) {
  BinaryMask m(w, h);
  for (int r = r0; r < r0 + rh; ++r)
    for (int c = c0; c < c0 + cw; ++c) m.at(r, c) = 1;
  return m;
}

InstanceRegion only_region(const BinaryMask& m) { return region_of(label_instances(m), 1); }

}  // namespace

TEST_CASE("pool_instance_transform: zero field is the identity") {
  const TransformField field(16, 16, 0.0);
  const InstanceRegion reg = only_region(rect(16, 16, 3, 3, 4, 5));
  const SimilarityTransform t = pool_instance_transform(field, reg, FieldCalibration{});
  CHECK(t == SimilarityTransform::identity());
}

TEST_CASE("pool_instance_transform: tx_raw 0.5 gives 32 px") {
  TransformField field(16, 16, 0.0);
  field.fill_channel(0, 0.5);
  const SimilarityTransform t =
      pool_instance_transform(field, only_region(rect(16, 16, 3, 3, 4, 5)), FieldCalibration{});
  CHECK(t.tx == 32.0);
  CHECK(t.ty == 0.0);
  CHECK(t.theta == 0.0);
  CHECK(t.scale == 1.0);
}

TEST_CASE("pool_instance_transform matches an explicit sum") {
  Rng rng(21);
  TransformField field(16, 16);
  for (auto& v : field.values()) v = rng.uniform(-1, 1);
  BinaryMask m(16, 16);
  const std::vector<Pixel> px{{2, 3}, {2, 4}, {3, 4}, {4, 5}, {5, 5}};
  for (const auto& p : px) m.at(p.row, p.col) = 1;
  const InstanceRegion reg = only_region(m);
  REQUIRE(reg.pixel_count() == 5);
  const RawTransform raw = pool_raw(field, reg);
  for (int ch = 0; ch < 4; ++ch) {
    double s = 0.0;
    for (const auto& p : px) s += field.at(ch, p.row, p.col);
    CHECK(std::abs(raw[ch] - s / 5.0) <= 1e-9);
  }
  const FieldCalibration cal;
  const SimilarityTransform t = pool_instance_transform(field, reg, cal);
  CHECK(std::abs(t.scale - std::exp(raw[3] * cal.max_log_scale)) < 1e-12);
}

TEST_CASE("pool of a constant field is shape independent") {
  Rng rng(4);
  TransformField field(20, 20);
  const RawTransform raw{0.3, -0.7, 0.25, -0.4};
  for (int ch = 0; ch < 4; ++ch) field.fill_channel(ch, raw[ch]);
  const FieldCalibration cal{17.0, 0.4, 0.1};
  const SimilarityTransform expect = calibrate(raw, cal);
  for (int trial = 0; trial < 10; ++trial) {
    BinaryMask m(20, 20);
    for (auto& v : m.values()) v = rng.bernoulli(0.3);
    const auto regs = all_regions(label_instances(m));
    for (const auto& reg : regs) {
      const SimilarityTransform t = pool_instance_transform(field, reg, cal);
      CHECK(std::abs(t.tx - expect.tx) < 1e-9);
      CHECK(std::abs(t.ty - expect.ty) < 1e-9);
      CHECK(std::abs(t.theta - expect.theta) < 1e-9);
      CHECK(std::abs(t.scale - expect.scale) < 1e-9);
    }
  }
}

TEST_CASE("pool_instance_transform errors") {
  const TransformField field(8, 8);
  InstanceRegion empty;
  CHECK_THROWS_AS(pool_raw(field, empty), std::invalid_argument);
  InstanceRegion outside;
  outside.pixels = {{9, 9}};
  CHECK_THROWS_AS(pool_raw(field, outside), std::out_of_range);
}

TEST_CASE("apply_to_point") {
  const Point2 c{5.0, 7.0};
  CHECK(apply_to_point({}, {3, 4}, c) == Point2{3, 4});
  const SimilarityTransform rs{0.0, 0.0, 1.1, 1.7};
  const Point2 fixed = apply_to_point(rs, c, c);
  CHECK(fixed.x == doctest::Approx(5.0));
  CHECK(fixed.y == doctest::Approx(7.0));
  const Point2 p = apply_to_point({0, 0, 0, 2.0}, {1, 1}, {0, 0});
  CHECK(p == Point2{2, 2});
}

TEST_CASE("invert") {
  const Point2 c{3, 4};
  const auto id = invert({}, c);
  CHECK(id.transform.tx == 0.0);
  CHECK(id.transform.scale == 1.0);
  CHECK(id.transform.theta == 0.0);
  const auto shift = invert({5, 0, 0, 1}, c);
  CHECK(shift.transform.tx == -5.0);

  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const SimilarityTransform t{rng.uniform(-64, 64), rng.uniform(-64, 64),
                                rng.uniform(-3, 3), rng.uniform(0.5, 2.0)};
    const Point2 b{rng.uniform(0, 100), rng.uniform(0, 100)};
    const auto inv = invert(t, b);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Point2 p{rng.uniform(-200, 200), rng.uniform(-200, 200)};
      const Point2 back = apply_to_point(inv.transform, apply_to_point(t, p, b), inv.barycenter);
      worst = std::max({worst, std::abs(back.x - p.x), std::abs(back.y - p.y)});
    }
    CHECK(worst < 1e-9);
  }
  CHECK_THROWS_AS(invert({0, 0, 0, 0.0}, c), std::invalid_argument);
}

TEST_CASE("compose of transforms matches sequential point application") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const SimilarityTransform a{rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-1, 1), rng.uniform(0.7, 1.4)};
    const SimilarityTransform b{rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-1, 1), rng.uniform(0.7, 1.4)};
    const Point2 ca{rng.uniform(0, 30), rng.uniform(0, 30)}, cb{rng.uniform(0, 30), rng.uniform(0, 30)};
    const SimilarityTransform ab = compose(b, cb, a, ca);
    const Point2 p{rng.uniform(-20, 50), rng.uniform(-20, 50)};
    const Point2 seq = apply_to_point(b, apply_to_point(a, p, ca), cb);
    const Point2 one = apply_to_point(ab, p, ca);
    CHECK(std::abs(seq.x - one.x) < 1e-9);
    CHECK(std::abs(seq.y - one.y) < 1e-9);
  }
}

TEST_CASE("warp_instance: identity is exact") {
  Rng rng(1);
  ProbabilityMask m(17, 13);
  for (auto& v : m.values()) v = rng.uniform();
  CHECK(warp_instance(m, {}, {6.37, 4.91}) == m);
}

TEST_CASE("warp_instance: integer translation matches shift oracle") {
  const BinaryMask sq = rect(16, 16, 4, 4, 5, 5);
  const InstanceRegion reg = only_region(sq);
  for (const auto& [dx, dy] : {std::pair{3, 0}, std::pair{-2, 5}, std::pair{0, -4}}) {
    const ProbabilityMask out =
        warp_instance(to_probability(sq), {double(dx), double(dy), 0, 1}, reg.barycenter);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        const double expect = sq.contains(r - dy, c - dx) ? sq.at(r - dy, c - dx) : 0.0;
        CHECK(out.at(r, c) == expect);
      }
  }
}

TEST_CASE("warp_instance: quarter turn of a centred square is the square") {
  const BinaryMask sq = rect(16, 16, 5, 5, 6, 6);
  const InstanceRegion reg = only_region(sq);
  const ProbabilityMask out =
      warp_instance(to_probability(sq), {0, 0, std::numbers::pi / 2, 1}, reg.barycenter);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - sq[i]) < 1e-6);
}

TEST_CASE("warp_instance: samples leaving the raster read zero") {
  const BinaryMask sq = rect(10, 10, 2, 2, 3, 3);
  const ProbabilityMask out = warp_instance(to_probability(sq), {20, 0, 0, 1}, {3, 3});
  for (double v : out.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(warp_instance(to_probability(sq), {0, 0, 0, -1}, {3, 3}), std::invalid_argument);
}

TEST_CASE("windowed warp equals full-frame warp") {
  const BinaryMask m = rect(40, 30, 7, 9, 8, 13);
  const InstanceRegion reg = only_region(m);
  const SimilarityTransform t{3.3, -2.1, 0.4, 1.12};
  ProbabilityMask windowed(40, 30, 0.0);
  warp_accumulate(MaskWindow::from_region(reg), t, reg.barycenter, windowed);
  const ProbabilityMask full = warp_instance(to_probability(m), t, reg.barycenter);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(std::abs(full[i] - windowed[i]) < 1e-12);
}

TEST_CASE("warp gradient matches central finite differences") {
  Rng rng(2024);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const ProbabilityMask m = smooth_blob(rng, 24);
    const ProbabilityMask target = smooth_blob(rng, 24);
    const Point2 c = weighted_center(m);
    const SimilarityTransform t{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.5, 0.5),
                                rng.uniform(0.85, 1.2)};
    const ProbabilityMask out = warp_instance(m, t, c);
    ProbabilityMask up(24, 24);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = 2.0 * (out[i] - target[i]);
    const WarpGradient g = warp_backward(MaskWindow::full(m), t, c, up);
    const std::array<double, 4> analytic{g.d_tx, g.d_ty, g.d_theta, g.d_scale};
    for (int k = 0; k < 4; ++k) {
      SimilarityTransform plus = t, minus = t;
      double* pp[] = {&plus.tx, &plus.ty, &plus.theta, &plus.scale};
      double* mm[] = {&minus.tx, &minus.ty, &minus.theta, &minus.scale};
      *pp[k] += h;
      *mm[k] -= h;
      const double fd = (sq_loss(m, plus, c, target) - sq_loss(m, minus, c, target)) / (2 * h);
      const double rel = std::abs(analytic[k] - fd) / std::max(std::abs(fd), 1e-6);
      CHECK_MESSAGE(rel < 1e-4, "param " << k << " analytic " << analytic[k] << " fd " << fd);
      ++checked;
    }
  }
  CHECK(checked == 48);
}

TEST_CASE("warp composition approximates the composed transform") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int rh = rng.uniform_int(10, 20), cw = rng.uniform_int(10, 20);
    const BinaryMask m = rect(64, 64, rng.uniform_int(18, 30), rng.uniform_int(18, 30), rh, cw);
    const InstanceRegion reg = only_region(m);
    const SimilarityTransform t1{rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-0.4, 0.4), rng.uniform(0.9, 1.1)};
    const SimilarityTransform t2{rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-0.4, 0.4), rng.uniform(0.9, 1.1)};
    const BinaryMask once = warp_binary(m, t1, reg.barycenter);
    const Point2 c2 = only_region(once).barycenter;
    const BinaryMask twice =
        to_binary(warp_instance(warp_instance(to_probability(m), t1, reg.barycenter), t2, c2));
    const BinaryMask direct = warp_binary(m, compose(t2, c2, t1, reg.barycenter), reg.barycenter);
    CHECK(iou(twice, direct) >= 0.95);
  }
}

TEST_CASE("warp round trip through invert recovers the instance") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int rh = rng.uniform_int(10, 24), cw = rng.uniform_int(10, 24);
    const BinaryMask m = rect(192, 192, 80, 80, rh, cw);
    const InstanceRegion reg = only_region(m);
    const SimilarityTransform t{rng.uniform(-64, 64), rng.uniform(-64, 64),
                                rng.uniform(-std::numbers::pi / 6, std::numbers::pi / 6),
                                rng.uniform(0.8, 1.25)};
    const BinaryMask moved = warp_binary(m, t, reg.barycenter);
    const auto inv = invert(t, reg.barycenter);
    const BinaryMask back = warp_binary(moved, inv.transform, inv.barycenter);
    CHECK(iou(back, m) >= 0.95);
  }
}

TEST_CASE("compose_aligned_map") {
  const BinaryMask a = rect(16, 16, 2, 2, 4, 4);
  const BinaryMask b = rect(16, 16, 9, 9, 4, 4);
  const Point2 ca = only_region(a).barycenter, cb = only_region(b).barycenter;

  const SimilarityTransform t{1.5, -0.5, 0.2, 1.1};
  const ProbabilityMask single = compose_aligned_map({{to_probability(a), t, ca}});
  CHECK(single == warp_instance(to_probability(a), t, ca));

  const ProbabilityMask both = compose_aligned_map({{to_probability(a), {}, ca}, {to_probability(b), {}, cb}});
  for (std::size_t i = 0; i < both.size(); ++i) CHECK(both[i] == double(a[i] | b[i]));

  // Move b onto a: overlap saturates at 1.
  const ProbabilityMask over = compose_aligned_map(
      {{to_probability(a), {}, ca}, {to_probability(b), {-7, -7, 0, 1}, cb}});
  for (int r = 2; r < 6; ++r)
    for (int c = 2; c < 6; ++c) CHECK(over.at(r, c) == 1.0);
  for (double v : over.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK_THROWS_AS(compose_aligned_map({{to_probability(a), {}, ca}, {ProbabilityMask(8, 8), {}, cb}}),
                  std::invalid_argument);
}

TEST_CASE("compose_aligned_map stays in [0,1] for random soft instances") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::tuple<ProbabilityMask, SimilarityTransform, Point2>> insts;
    for (int k = 0; k < 5; ++k) {
      ProbabilityMask m = smooth_blob(rng, 24);
      insts.emplace_back(m, SimilarityTransform{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-1, 1), rng.uniform(0.8, 1.25)},
                         weighted_center(m));
    }
    const ProbabilityMask out = compose_aligned_map(insts);
    for (double v : out.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}
