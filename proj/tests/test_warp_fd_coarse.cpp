// Finite differences at a coarse step (h = 1e-3). Bilinear sampling is only
// piecewise linear, so samples that cross a cell boundary inside [-h, h]
// bias the difference quotient; rotation and scale move far pixels enough
// for this to show. The tight-step check lives in test_geometry.
#include <array>

#include "doctest.h"
#include "warp_fixtures.hpp"

using namespace cadalign;
using namespace cadalign::testing;

TEST_CASE("warp gradient matches central differences at h = 1e-3") {
  Rng rng(2024);
  const double h = 1e-3;
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
      CHECK_MESSAGE(rel < 1e-2, "trial " << trial << " param " << k << " analytic "
                                         << analytic[k] << " fd " << fd);
    }
  }
}
