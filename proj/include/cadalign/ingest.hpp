#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadalign/raster.hpp"

namespace cadalign {

// Raster I/O. Masks are written as 8-bit gray 0/255 and read back with any
// nonzero value as foreground. PNG and TIFF are chosen by extension.
IntensityImage read_image(const std::string& path);
BinaryMask read_mask(const std::string& path);
void write_image_png(const IntensityImage& image, const std::string& path);
void write_mask_png(const BinaryMask& mask, const std::string& path);

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Pixel (col, row) -> geo (x, y):
//   x = x0 + dx_col*col + dx_row*row,  y = y0 + dy_col*col + dy_row*row
struct GeoTransform {
  double x0 = 0.0, dx_col = 1.0, dx_row = 0.0;
  double y0 = 0.0, dy_col = 0.0, dy_row = 1.0;

  double determinant() const { return dx_col * dy_row - dx_row * dy_col; }
  void validate() const;  // throws on a singular linear part
  Point2 to_geo(Point2 pixel) const;
  Point2 to_pixel(Point2 geo) const;
};

struct PixelPolygons {
  std::vector<Ring> polygons;
  std::vector<bool> clipped;  // parallel to polygons
  int dropped = 0;            // entirely outside the raster
};

// Polygons are given as geo rings (x = lon/easting, y = lat/northing).
PixelPolygons geo_to_pixel(const std::vector<Ring>& polygons, const GeoTransform& gt, int width,
                           int height);
std::vector<Ring> pixel_to_geo(const std::vector<Ring>& polygons, const GeoTransform& gt);

// GeoJSON FeatureCollection of Polygons; only outer rings are read.
std::vector<Ring> read_geojson(const std::string& path);
std::vector<Ring> parse_geojson(const std::string& text);
std::string to_geojson(const std::vector<Ring>& polygons);
void write_geojson(const std::vector<Ring>& polygons, const std::string& path);

struct DatasetEntry {
  std::string image_path;
  std::string gt_mask_path;
  std::string tile_name;
};

enum class Split { Train, Val, Test };

struct SplitSpec {
  std::set<std::string> val_tiles;
  std::set<std::string> test_tiles;
};

struct DatasetIndex {
  Split split = Split::Train;
  std::vector<DatasetEntry> entries;
};

// root/images/<stem>.{tif,tiff,png} paired with root/gt/<stem>.{tif,tiff,png}.
DatasetIndex load_inria_index(const std::string& root, const SplitSpec& split_spec, Split split);

struct BBox {
  double south = 0.0, west = 0.0, north = 0.0, east = 0.0;
  void validate() const;
};

struct HttpResponse {
  long status = 0;
  std::string body;
  std::string error;  // transport failure, empty on success
};

using HttpTransport = std::function<HttpResponse(const std::string& url, const std::string& post_body)>;

class OsmError : public std::runtime_error {
public:
  OsmError(const std::string& what, bool retriable, long status = 0)
      : std::runtime_error(what), retriable_(retriable), status_(status) {}
  bool retriable() const { return retriable_; }
  long status() const { return status_; }

private:
  bool retriable_;
  long status_;
};

struct OsmClientOptions {
  std::string endpoint = "https://overpass-api.de/api/interpreter";
  std::string cache_dir = "cache/osm";
  // Reads this GeoJSON instead of querying when set.
  std::optional<std::string> offline_geojson;
  HttpTransport transport;  // default: libcurl POST
  double min_interval_seconds = 1.0;
};

// Overpass QL for closed ways and relations tagged building=* inside bbox.
std::string overpass_query(const BBox& bbox);

// Parses an Overpass "out geom" JSON response into outer rings (lon, lat).
std::vector<Ring> parse_overpass(const std::string& body);

class OsmClient {
public:
  explicit OsmClient(OsmClientOptions options);

  std::vector<Ring> fetch(const BBox& bbox);
  std::string cache_path(const BBox& bbox) const;
  int request_count() const { return requests_; }

private:
  OsmClientOptions options_;
  int requests_ = 0;
  double last_request_ = -1e300;
};

// Endpoint from CADALIGN_OVERPASS_URL when set, else the default.
std::string default_overpass_endpoint();

// 3-8 non-overlapping rectangles or L-shapes with sides in [10, 40] px,
// each filled with its own noisy color over a noisy background.
std::vector<LabeledTile> generate_shapes_dataset(int n_samples, int size, std::uint64_t seed);

}  // namespace cadalign
