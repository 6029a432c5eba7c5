#pragma once

#include "cadalign/raster.hpp"
#include "cadalign/rng.hpp"

namespace cadalign {

// Random axis-aligned rectangle or L-shape with sides in [min_side, max_side],
// its top-left corner drawn inside the cell [row0, row0+cell) x [col0, col0+cell)
// and shifted back so the footprint fits inside a width x height raster.
Ring random_footprint(Rng& rng, int min_side, int max_side, int row0, int col0, int cell,
                      int width, int height);

}  // namespace cadalign
