#include "cadalign/shapes.hpp"

#include <algorithm>

namespace cadalign {

Ring random_footprint(Rng& rng, int min_side, int max_side, int row0, int col0, int cell,
                      int width, int height) {
  const int w = rng.uniform_int(min_side, max_side);
  const int h = rng.uniform_int(min_side, max_side);
  int top = row0 + rng.uniform_int(0, std::max(0, cell - 1));
  int left = col0 + rng.uniform_int(0, std::max(0, cell - 1));
  top = std::clamp(top, 0, std::max(0, height - h));
  left = std::clamp(left, 0, std::max(0, width - w));
  const double x0 = left, y0 = top, x1 = left + w, y1 = top + h;

  if (!rng.bernoulli(0.5) || w < 6 || h < 6) return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};

  // L-shape: cut one corner of size in [side/3, side/2].
  const double cw = rng.uniform_int(w / 3, w / 2);
  const double ch = rng.uniform_int(h / 3, h / 2);
  switch (rng.uniform_int(0, 3)) {
    case 0:  // top-left
      return {{x0 + cw, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0 + ch}, {x0 + cw, y0 + ch}};
    case 1:  // top-right
      return {{x0, y0}, {x1 - cw, y0}, {x1 - cw, y0 + ch}, {x1, y0 + ch}, {x1, y1}, {x0, y1}};
    case 2:  // bottom-right
      return {{x0, y0}, {x1, y0}, {x1, y1 - ch}, {x1 - cw, y1 - ch}, {x1 - cw, y1}, {x0, y1}};
    default:  // bottom-left
      return {{x0, y0}, {x1, y0}, {x1, y1}, {x0 + cw, y1}, {x0 + cw, y1 - ch}, {x0, y1 - ch}};
  }
}

}  // namespace cadalign
