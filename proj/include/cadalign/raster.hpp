#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cadalign {

// Row-major single-channel raster. Coordinates are (row, col); geometry code
// uses x = col, y = row.
template <typename T>
class Grid {
public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(checked_area(width, height)), fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int row, int col) { return data_[index(row, col)]; }
  const T& at(int row, int col) const { return data_[index(row, col)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool contains(int row, int col) const {
    return row >= 0 && col >= 0 && row < height_ && col < width_;
  }
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_shape(const Grid& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

private:
  static long checked_area(int width, int height) {
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("raster dimensions must be positive, got " +
                                  std::to_string(width) + "x" + std::to_string(height));
    return static_cast<long>(width) * height;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using BinaryMask = Grid<std::uint8_t>;
using ProbabilityMask = Grid<double>;

// Planar float image, values in [0,1].
struct IntensityImage {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> values;  // [channel][row][col]

  IntensityImage() = default;
  IntensityImage(int w, int h, int c = 3, float fill = 0.0f);

  float& at(int c, int row, int col) {
    return values[(static_cast<std::size_t>(c) * height + row) * width + col];
  }
  float at(int c, int row, int col) const {
    return values[(static_cast<std::size_t>(c) * height + row) * width + col];
  }

  // Copies the window [row0, row0+h) x [col0, col0+w); out-of-range pixels read 0.
  IntensityImage crop(int row0, int col0, int w, int h) const;

  friend bool operator==(const IntensityImage&, const IntensityImage&) = default;
};

// An image with its ground-truth footprint mask.
struct LabeledTile {
  IntensityImage image;
  BinaryMask gt;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

// A closed ring in pixel coordinates (x = col, y = row); the closing vertex
// is implicit.
using Ring = std::vector<Point2>;

enum class Connectivity { Four = 4, Eight = 8 };

struct InstanceMap {
  Grid<std::int32_t> labels;
  int instance_count = 0;

  int width() const { return labels.width(); }
  int height() const { return labels.height(); }
};

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct InstanceRegion {
  int label = 0;
  std::vector<Pixel> pixels;  // raster-scan order
  Point2 barycenter;          // x = mean col, y = mean row
  int row_min = 0, row_max = 0, col_min = 0, col_max = 0;

  int pixel_count() const { return static_cast<int>(pixels.size()); }
};

BinaryMask to_binary(const ProbabilityMask& prob, double threshold = 0.5);
ProbabilityMask to_probability(const BinaryMask& mask);
std::size_t count_foreground(const BinaryMask& mask);

// Labels components 1..M in raster-scan order of each component's first pixel.
InstanceMap label_instances(const BinaryMask& mask,
                            Connectivity conn = Connectivity::Eight);

// Throws std::out_of_range("no such instance") for labels outside 1..M.
InstanceRegion region_of(const InstanceMap& imap, int label);

// All regions in one pass, indexed by label - 1.
std::vector<InstanceRegion> all_regions(const InstanceMap& imap);

BinaryMask instance_mask(const InstanceMap& imap, int label);

struct RasterizeStats {
  int skipped_degenerate = 0;
};

// Even-odd fill sampled at pixel centers (col + 0.5, row + 0.5).
BinaryMask rasterize_polygons(const std::vector<Ring>& polygons, int width, int height,
                              RasterizeStats* stats = nullptr);

// One outer boundary ring per 8-connected component, traced along pixel
// edges. Holes are filled.
std::vector<Ring> vectorize_mask(const BinaryMask& mask);

// Square structuring element of half-width `radius`.
BinaryMask dilate(const BinaryMask& mask, int radius);

double iou(const BinaryMask& a, const BinaryMask& b);
double pixel_accuracy(const BinaryMask& a, const BinaryMask& b);

double ring_area(const Ring& ring);  // signed, shoelace

}  // namespace cadalign
