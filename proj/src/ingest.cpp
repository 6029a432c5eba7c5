#include "cadalign/ingest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <curl/curl.h>
#include <png.h>
#include <tiffio.h>

#include "json.hpp"

#include "cadalign/rng.hpp"
#include "cadalign/shapes.hpp"

namespace cadalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower_ext(const std::string& path) {
  std::string e = fs::path(path).extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

bool is_tiff(const std::string& path) {
  const std::string e = lower_ext(path);
  return e == ".tif" || e == ".tiff";
}

// Returns RGB or gray bytes; channels set to 3 or 1.
std::vector<std::uint8_t> read_pixels(const std::string& path, int& w, int& h, int channels) {
  if (!fs::exists(path)) throw IoError("no such file: " + path);
  std::vector<std::uint8_t> out;
  if (is_tiff(path)) {
    TIFFSetWarningHandler(nullptr);
    TIFF* tif = TIFFOpen(path.c_str(), "r");
    if (!tif) throw IoError("cannot open TIFF " + path);
    std::uint32_t tw = 0, th = 0;
    TIFFGetField(tif, TIFFTAG_IMAGEWIDTH, &tw);
    TIFFGetField(tif, TIFFTAG_IMAGELENGTH, &th);
    std::vector<std::uint32_t> rgba(static_cast<std::size_t>(tw) * th);
    const int ok = TIFFReadRGBAImageOriented(tif, tw, th, rgba.data(), ORIENTATION_TOPLEFT, 0);
    TIFFClose(tif);
    if (!ok) throw IoError("cannot decode TIFF " + path);
    w = static_cast<int>(tw);
    h = static_cast<int>(th);
    out.resize(rgba.size() * channels);
    for (std::size_t i = 0; i < rgba.size(); ++i) {
      const std::uint8_t r = TIFFGetR(rgba[i]), g = TIFFGetG(rgba[i]), b = TIFFGetB(rgba[i]);
      if (channels == 3) {
        out[3 * i] = r, out[3 * i + 1] = g, out[3 * i + 2] = b;
      } else {
        out[i] = std::max({r, g, b});
      }
    }
    return out;
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw IoError("cannot read PNG " + path + ": " + img.message);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  out.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path + ": " + img.message);
  }
  w = static_cast<int>(img.width);
  h = static_cast<int>(img.height);
  return out;
}

void write_png(const std::string& path, const std::vector<std::uint8_t>& bytes, int w, int h, bool rgb) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path + ": " + img.message);
}

}  // namespace

IntensityImage read_image(const std::string& path) {
  int w = 0, h = 0;
  const auto px = read_pixels(path, w, h, 3);
  IntensityImage img(w, h, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, r, c) = px[(static_cast<std::size_t>(r) * w + c) * 3 + ch] / 255.0f;
  return img;
}

BinaryMask read_mask(const std::string& path) {
  int w = 0, h = 0;
  const auto px = read_pixels(path, w, h, 1);
  BinaryMask m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = px[i] != 0;
  return m;
}

void write_image_png(const IntensityImage& image, const std::string& path) {
  if (image.channels != 3 && image.channels != 1)
    throw IoError("write_image_png supports 1 or 3 channels, got " + std::to_string(image.channels));
  const int nc = image.channels;
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(image.width) * image.height * nc);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c)
      for (int ch = 0; ch < nc; ++ch)
        bytes[(static_cast<std::size_t>(r) * image.width + c) * nc + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(image.at(ch, r, c), 0.0f, 1.0f) * 255.0f));
  write_png(path, bytes, image.width, image.height, nc == 3);
}

void write_mask_png(const BinaryMask& mask, const std::string& path) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  write_png(path, bytes, mask.width(), mask.height(), false);
}

void GeoTransform::validate() const {
  if (std::abs(determinant()) < 1e-300 || !std::isfinite(determinant()))
    throw std::invalid_argument("geotransform is singular");
}

Point2 GeoTransform::to_geo(Point2 p) const {
  return {x0 + dx_col * p.x + dx_row * p.y, y0 + dy_col * p.x + dy_row * p.y};
}

Point2 GeoTransform::to_pixel(Point2 g) const {
  const double det = determinant();
  const double u = g.x - x0, v = g.y - y0;
  return {(dy_row * u - dx_row * v) / det, (-dy_col * u + dx_col * v) / det};
}

namespace {

// Sutherland-Hodgman against the rectangle [0,w] x [0,h].
Ring clip_to_rect(const Ring& ring, double w, double h) {
  Ring out = ring;
  auto clip = [&](auto inside, auto cross) {
    Ring in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point2 a = in[i], b = in[(i + 1) % in.size()];
      const bool ia = inside(a), ib = inside(b);
      if (ia) out.push_back(a);
      if (ia != ib) out.push_back(cross(a, b));
    }
  };
  auto at_x = [](Point2 a, Point2 b, double x) { return Point2{x, a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x)}; };
  auto at_y = [](Point2 a, Point2 b, double y) { return Point2{a.x + (b.x - a.x) * (y - a.y) / (b.y - a.y), y}; };
  clip([](Point2 p) { return p.x >= 0.0; }, [&](Point2 a, Point2 b) { return at_x(a, b, 0.0); });
  clip([&](Point2 p) { return p.x <= w; }, [&](Point2 a, Point2 b) { return at_x(a, b, w); });
  clip([](Point2 p) { return p.y >= 0.0; }, [&](Point2 a, Point2 b) { return at_y(a, b, 0.0); });
  clip([&](Point2 p) { return p.y <= h; }, [&](Point2 a, Point2 b) { return at_y(a, b, h); });
  return out;
}

}  // namespace

PixelPolygons geo_to_pixel(const std::vector<Ring>& polygons, const GeoTransform& gt, int width, int height) {
  gt.validate();
  PixelPolygons out;
  for (const Ring& geo : polygons) {
    Ring px;
    bool outside = false;
    for (const auto& g : geo) {
      px.push_back(gt.to_pixel(g));
      const Point2& p = px.back();
      outside |= p.x < 0.0 || p.y < 0.0 || p.x > width || p.y > height;
    }
    if (outside) {
      px = clip_to_rect(px, width, height);
      if (px.size() < 3 || std::abs(ring_area(px)) < 1e-12) {
        ++out.dropped;
        continue;
      }
    }
    out.polygons.push_back(std::move(px));
    out.clipped.push_back(outside);
  }
  return out;
}

std::vector<Ring> pixel_to_geo(const std::vector<Ring>& polygons, const GeoTransform& gt) {
  gt.validate();
  std::vector<Ring> out;
  for (const Ring& r : polygons) {
    Ring g;
    for (const auto& p : r) g.push_back(gt.to_geo(p));
    out.push_back(std::move(g));
  }
  return out;
}

namespace {

Ring ring_from_coords(const json& coords) {
  Ring r;
  for (const auto& c : coords) r.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  if (r.size() > 1 && r.front() == r.back()) r.pop_back();
  return r;
}

void collect_geometry(const json& geom, std::vector<Ring>& out) {
  const std::string type = geom.at("type").get<std::string>();
  if (type == "Polygon") {
    if (!geom.at("coordinates").empty()) out.push_back(ring_from_coords(geom.at("coordinates").at(0)));
  } else if (type == "MultiPolygon") {
    for (const auto& poly : geom.at("coordinates"))
      if (!poly.empty()) out.push_back(ring_from_coords(poly.at(0)));
  } else if (type == "GeometryCollection") {
    for (const auto& g : geom.at("geometries")) collect_geometry(g, out);
  }
}

json parse_or_throw(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("malformed " + what + " at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

}  // namespace

std::vector<Ring> parse_geojson(const std::string& text) {
  const json doc = parse_or_throw(text, "GeoJSON");
  std::vector<Ring> out;
  try {
    const std::string type = doc.at("type").get<std::string>();
    if (type == "FeatureCollection") {
      for (const auto& f : doc.at("features"))
        if (!f.at("geometry").is_null()) collect_geometry(f.at("geometry"), out);
    } else if (type == "Feature") {
      collect_geometry(doc.at("geometry"), out);
    } else {
      collect_geometry(doc, out);
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("invalid GeoJSON structure: ") + e.what());
  }
  return out;
}

std::vector<Ring> read_geojson(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_geojson(ss.str());
}

std::string to_geojson(const std::vector<Ring>& polygons) {
  json features = json::array();
  for (const Ring& r : polygons) {
    json ring = json::array();
    for (const auto& p : r) ring.push_back({p.x, p.y});
    if (!r.empty()) ring.push_back({r.front().x, r.front().y});
    features.push_back({{"type", "Feature"},
                        {"properties", json::object()},
                        {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}}});
  }
  return json{{"type", "FeatureCollection"}, {"features", features}}.dump();
}

void write_geojson(const std::vector<Ring>& polygons, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << to_geojson(polygons) << '\n';
}

namespace {

std::map<std::string, std::string> stems_in(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = lower_ext(e.path().string());
    if (ext == ".tif" || ext == ".tiff" || ext == ".png") out[e.path().stem().string()] = e.path().string();
  }
  return out;
}

}  // namespace

DatasetIndex load_inria_index(const std::string& root, const SplitSpec& split_spec, Split split) {
  const fs::path base(root);
  if (!fs::is_directory(base / "images") || !fs::is_directory(base / "gt"))
    throw IoError("dataset root " + root + " must contain images/ and gt/");
  const auto images = stems_in(base / "images");
  const auto gts = stems_in(base / "gt");
  std::vector<std::string> orphans;
  for (const auto& [stem, path] : images)
    if (!gts.count(stem)) orphans.push_back(path + " (no gt/" + stem + ")");
  for (const auto& [stem, path] : gts)
    if (!images.count(stem)) orphans.push_back(path + " (no images/" + stem + ")");
  if (!orphans.empty()) {
    std::string msg = "unpaired dataset files:";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw IoError(msg);
  }
  DatasetIndex index;
  index.split = split;
  for (const auto& [stem, path] : images) {
    const Split s = split_spec.test_tiles.count(stem) ? Split::Test
                    : split_spec.val_tiles.count(stem) ? Split::Val
                                                       : Split::Train;
    if (s == split) index.entries.push_back({path, gts.at(stem), stem});
  }
  return index;
}

void BBox::validate() const {
  if (!(south < north)) throw std::invalid_argument("bbox: south must be < north");
  if (!(west < east)) throw std::invalid_argument("bbox: west must be < east");
  if (south < -90.0 || north > 90.0) throw std::invalid_argument("bbox: latitude outside [-90, 90]");
  if (west < -180.0 || east > 180.0) throw std::invalid_argument("bbox: longitude outside [-180, 180]");
}

std::string overpass_query(const BBox& b) {
  char box[160];
  std::snprintf(box, sizeof box, "(%.7f,%.7f,%.7f,%.7f)", b.south, b.west, b.north, b.east);
  return std::string("[out:json][timeout:90];(way[\"building\"]") + box + ";relation[\"building\"]" + box +
         ";);out geom;";
}

std::vector<Ring> parse_overpass(const std::string& body) {
  const json doc = parse_or_throw(body, "Overpass response");
  std::vector<Ring> out;
  auto ring_of = [](const json& geometry) {
    Ring r;
    for (const auto& p : geometry) r.push_back({p.at("lon").get<double>(), p.at("lat").get<double>()});
    const bool closed = r.size() >= 4 && r.front() == r.back();
    if (closed) r.pop_back();
    return closed ? r : Ring{};
  };
  try {
    for (const auto& el : doc.at("elements")) {
      const std::string type = el.value("type", "");
      if (type == "way" && el.contains("geometry")) {
        Ring r = ring_of(el.at("geometry"));
        if (r.size() >= 3) out.push_back(std::move(r));
      } else if (type == "relation" && el.contains("members")) {
        for (const auto& m : el.at("members"))
          if (m.value("role", "") == "outer" && m.contains("geometry")) {
            Ring r = ring_of(m.at("geometry"));
            if (r.size() >= 3) out.push_back(std::move(r));
          }
      }
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("unexpected Overpass response structure: ") + e.what());
  }
  return out;
}

namespace {

std::size_t write_body(char* data, std::size_t size, std::size_t n, void* user) {
  static_cast<std::string*>(user)->append(data, size * n);
  return size * n;
}

HttpResponse curl_post(const std::string& url, const std::string& body) {
  HttpResponse r;
  CURL* curl = curl_easy_init();
  if (!curl) {
    r.error = "curl initialization failed";
    return r;
  }
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_POSTFIELDS, body.c_str());
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, write_body);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, &r.body);
  curl_easy_setopt(curl, CURLOPT_TIMEOUT, 120L);
  curl_easy_setopt(curl, CURLOPT_USERAGENT, "cadalign/1.0");
  const CURLcode code = curl_easy_perform(curl);
  if (code != CURLE_OK) r.error = curl_easy_strerror(code);
  curl_easy_getinfo(curl, CURLINFO_RESPONSE_CODE, &r.status);
  curl_easy_cleanup(curl);
  return r;
}

std::string url_encode(const std::string& s) {
  std::string out;
  char buf[4];
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      std::snprintf(buf, sizeof buf, "%%%02X", c);
      out += buf;
    }
  }
  return out;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

}  // namespace

std::string default_overpass_endpoint() {
  if (const char* env = std::getenv("CADALIGN_OVERPASS_URL"); env && *env) return env;
  return OsmClientOptions{}.endpoint;
}

OsmClient::OsmClient(OsmClientOptions options) : options_(std::move(options)) {
  if (!options_.transport) options_.transport = curl_post;
}

std::string OsmClient::cache_path(const BBox& b) const {
  char key[160];
  std::snprintf(key, sizeof key, "%.7f,%.7f,%.7f,%.7f", b.south, b.west, b.north, b.east);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* p = key; *p; ++p) h = (h ^ static_cast<unsigned char>(*p)) * 0x100000001b3ULL;
  char name[32];
  std::snprintf(name, sizeof name, "%016llx.geojson", static_cast<unsigned long long>(h));
  return (fs::path(options_.cache_dir) / name).string();
}

std::vector<Ring> OsmClient::fetch(const BBox& bbox) {
  bbox.validate();
  if (options_.offline_geojson) return read_geojson(*options_.offline_geojson);
  const std::string cached = cache_path(bbox);
  if (fs::exists(cached)) return read_geojson(cached);

  const double wait = last_request_ + options_.min_interval_seconds - now_seconds();
  if (wait > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(wait));
  ++requests_;
  const HttpResponse resp = options_.transport(options_.endpoint, "data=" + url_encode(overpass_query(bbox)));
  last_request_ = now_seconds();
  if (!resp.error.empty())
    throw OsmError("request to " + options_.endpoint + " failed: " + resp.error, true, resp.status);
  if (resp.status != 200)
    throw OsmError("endpoint " + options_.endpoint + " returned HTTP " + std::to_string(resp.status),
                   resp.status == 429 || resp.status >= 500, resp.status);
  const std::vector<Ring> polygons = parse_overpass(resp.body);
  fs::create_directories(options_.cache_dir);
  const std::string tmp = cached + ".tmp";
  write_geojson(polygons, tmp);
  fs::rename(tmp, cached);
  return polygons;
}

std::vector<LabeledTile> generate_shapes_dataset(int n_samples, int size, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("shapes dataset: n_samples must be >= 1");
  if (size < 64 || size % 16 != 0)
    throw std::invalid_argument("shapes dataset: size " + std::to_string(size) + " must be a multiple of 16 and >= 64");
  constexpr int kMinSide = 10, kMaxSide = 40;
  std::vector<LabeledTile> out;
  out.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    LabeledTile t{IntensityImage(size, size, 3), BinaryMask(size, size)};
    float bg[3];
    for (float& v : bg) v = static_cast<float>(rng.uniform(0.2, 0.8));
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) t.image.at(ch, r, c) = bg[ch] + static_cast<float>(rng.normal(0.0, 0.08));

    const int wanted = rng.uniform_int(3, 8);
    BinaryMask blocked(size, size);
    for (int placed = 0, tries = 0; placed < wanted && tries < 200; ++tries) {
      const Ring ring = random_footprint(rng, kMinSide, kMaxSide, 0, 0, size - kMaxSide + 1, size, size);
      const BinaryMask shape = rasterize_polygons({ring}, size, size);
      bool clash = false;
      for (std::size_t k = 0; k < shape.size() && !clash; ++k) clash = shape[k] && blocked[k];
      if (clash) continue;
      // Fill color far enough from the background in gray level and per channel.
      float col[3];
      do {
        for (float& v : col) v = static_cast<float>(rng.uniform(0.0, 1.0));
      } while (std::abs((col[0] + col[1] + col[2]) - (bg[0] + bg[1] + bg[2])) / 3.0f < 0.2f ||
               (std::abs(col[0] - bg[0]) + std::abs(col[1] - bg[1]) + std::abs(col[2] - bg[2])) / 3.0f < 0.25f);
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
          if (shape.at(r, c)) {
            t.gt.at(r, c) = 1;
            for (int ch = 0; ch < 3; ++ch) t.image.at(ch, r, c) = col[ch] + static_cast<float>(rng.normal(0.0, 0.08));
          }
      const BinaryMask grown = dilate(shape, 2);
      for (std::size_t k = 0; k < grown.size(); ++k) blocked[k] |= grown[k];
      ++placed;
    }
    for (float& v : t.image.values) v = std::clamp(v, 0.0f, 1.0f);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace cadalign
