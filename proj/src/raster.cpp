#include "cadalign/raster.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <utility>

namespace cadalign {

IntensityImage::IntensityImage(int w, int h, int c, float fill)
    : width(w), height(h), channels(c) {
  if (w <= 0 || h <= 0 || c <= 0)
    throw std::invalid_argument("image dimensions must be positive");
  values.assign(static_cast<std::size_t>(w) * h * c, fill);
}

IntensityImage IntensityImage::crop(int row0, int col0, int w, int h) const {
  IntensityImage out(w, h, channels, 0.0f);
  for (int c = 0; c < channels; ++c)
    for (int r = 0; r < h; ++r) {
      const int sr = row0 + r;
      if (sr < 0 || sr >= height) continue;
      for (int k = 0; k < w; ++k) {
        const int sc = col0 + k;
        if (sc < 0 || sc >= width) continue;
        out.at(c, r, k) = at(c, sr, sc);
      }
    }
  return out;
}

BinaryMask to_binary(const ProbabilityMask& prob, double threshold) {
  BinaryMask out(prob.width(), prob.height());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? 1 : 0;
  return out;
}

ProbabilityMask to_probability(const BinaryMask& mask) {
  ProbabilityMask out(mask.width(), mask.height());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 1.0 : 0.0;
  return out;
}

std::size_t count_foreground(const BinaryMask& mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.values().begin(), mask.values().end(), [](auto v) { return v != 0; }));
}

namespace {

// Union-find over provisional labels.
class DisjointSet {
public:
  int make() {
    parent_.push_back(static_cast<int>(parent_.size()));
    return parent_.back();
  }
  int find(int x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[a] = b;  // smaller provisional label wins
  }

private:
  std::vector<int> parent_;
};

}  // namespace

InstanceMap label_instances(const BinaryMask& mask, Connectivity conn) {
  const int w = mask.width();
  const int h = mask.height();
  InstanceMap out;
  out.labels = Grid<std::int32_t>(w, h, 0);
  if (mask.empty()) return out;

  DisjointSet sets;
  sets.make();  // provisional 0 = background
  auto& lab = out.labels;
  const bool eight = conn == Connectivity::Eight;

  // Two-pass labeling; provisional labels are issued in raster order so the
  // root of each set is the label of its first pixel.
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      std::array<int, 4> nb{};
      int n = 0;
      auto take = [&](int rr, int cc) {
        if (rr >= 0 && cc >= 0 && cc < w && lab.at(rr, cc) > 0) nb[n++] = lab.at(rr, cc);
      };
      take(r, c - 1);
      take(r - 1, c);
      if (eight) {
        take(r - 1, c - 1);
        take(r - 1, c + 1);
      }
      if (n == 0) {
        lab.at(r, c) = sets.make();
      } else {
        int m = *std::min_element(nb.begin(), nb.begin() + n);
        lab.at(r, c) = m;
        for (int i = 0; i < n; ++i) sets.unite(m, nb[i]);
      }
    }
  }

  std::map<int, int> final_label;
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab[i] == 0) continue;
    const int root = sets.find(lab[i]);
    auto [it, inserted] = final_label.try_emplace(root, 0);
    if (inserted) it->second = ++out.instance_count;
    lab[i] = it->second;
  }
  return out;
}

namespace {

void finalize_region(InstanceRegion& reg) {
  double sx = 0.0, sy = 0.0;
  reg.row_min = reg.col_min = std::numeric_limits<int>::max();
  reg.row_max = reg.col_max = std::numeric_limits<int>::min();
  for (const auto& p : reg.pixels) {
    sx += p.col;
    sy += p.row;
    reg.row_min = std::min(reg.row_min, p.row);
    reg.row_max = std::max(reg.row_max, p.row);
    reg.col_min = std::min(reg.col_min, p.col);
    reg.col_max = std::max(reg.col_max, p.col);
  }
  const double n = static_cast<double>(reg.pixels.size());
  reg.barycenter = {sx / n, sy / n};
}

}  // namespace

InstanceRegion region_of(const InstanceMap& imap, int label) {
  if (label < 1 || label > imap.instance_count) throw std::out_of_range("no such instance");
  InstanceRegion reg;
  reg.label = label;
  for (int r = 0; r < imap.height(); ++r)
    for (int c = 0; c < imap.width(); ++c)
      if (imap.labels.at(r, c) == label) reg.pixels.push_back({r, c});
  finalize_region(reg);
  return reg;
}

std::vector<InstanceRegion> all_regions(const InstanceMap& imap) {
  std::vector<InstanceRegion> regs(static_cast<std::size_t>(imap.instance_count));
  for (int i = 0; i < imap.instance_count; ++i) regs[i].label = i + 1;
  for (int r = 0; r < imap.height(); ++r)
    for (int c = 0; c < imap.width(); ++c) {
      const int l = imap.labels.at(r, c);
      if (l > 0) regs[l - 1].pixels.push_back({r, c});
    }
  for (auto& reg : regs) finalize_region(reg);
  return regs;
}

BinaryMask instance_mask(const InstanceMap& imap, int label) {
  BinaryMask out(imap.width(), imap.height());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = imap.labels[i] == label ? 1 : 0;
  return out;
}

double ring_area(const Ring& ring) {
  double a = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = ring[i];
    const auto& q = ring[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

namespace {

std::size_t distinct_vertices(const Ring& ring) {
  std::vector<std::pair<double, double>> v;
  v.reserve(ring.size());
  for (const auto& p : ring) v.emplace_back(p.x, p.y);
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

void fill_ring(const Ring& ring, BinaryMask& out) {
  const std::size_t n = ring.size();
  double ymin = ring[0].y, ymax = ring[0].y;
  for (const auto& p : ring) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int r0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int r1 = std::min(out.height() - 1, static_cast<int>(std::ceil(ymax - 0.5)));
  std::vector<double> xs;
  for (int r = r0; r <= r1; ++r) {
    const double y = r + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = ring[i];
      const auto& b = ring[(i + 1) % n];
      if ((a.y <= y) != (b.y <= y)) xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // centers c + 0.5 in [xs[k], xs[k+1])
      const int c0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int c1 = std::min(out.width() - 1, static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1);
      for (int c = c0; c <= c1; ++c) out.at(r, c) = 1;
    }
  }
}

}  // namespace

BinaryMask rasterize_polygons(const std::vector<Ring>& polygons, int width, int height,
                              RasterizeStats* stats) {
  BinaryMask out(width, height);
  for (const auto& ring : polygons) {
    if (ring.size() < 3 || distinct_vertices(ring) < 3) {
      if (stats) ++stats->skipped_degenerate;
      continue;
    }
    fill_ring(ring, out);
  }
  return out;
}

namespace {

struct Vertex {
  int x, y;
  friend auto operator<=>(const Vertex&, const Vertex&) = default;
};

// Direction index: 0 = +x, 1 = +y, 2 = -x, 3 = -y (screen coordinates).
int direction_of(Vertex a, Vertex b) {
  if (b.x > a.x) return 0;
  if (b.y > a.y) return 1;
  if (b.x < a.x) return 2;
  return 3;
}

Ring trace_outer_ring(const BinaryMask& filled, int row_min, int col_min) {
  const int h = filled.height();
  const int w = filled.width();
  // Directed boundary edges with the foreground on the right (clockwise on screen).
  std::map<Vertex, std::vector<Vertex>> out_edges;
  auto bg = [&](int r, int c) { return !filled.contains(r, c) || !filled.at(r, c); };
  Vertex start{-1, -1};
  std::size_t edge_count = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!filled.at(r, c)) continue;
      const Vertex tl{c, r}, tr{c + 1, r}, br{c + 1, r + 1}, bl{c, r + 1};
      if (bg(r - 1, c)) out_edges[tl].push_back(tr), ++edge_count;
      if (bg(r, c + 1)) out_edges[tr].push_back(br), ++edge_count;
      if (bg(r + 1, c)) out_edges[br].push_back(bl), ++edge_count;
      if (bg(r, c - 1)) out_edges[bl].push_back(tl), ++edge_count;
      if (start.x < 0) start = tl;  // top-left corner of the first raster pixel
    }

  std::vector<Vertex> path;
  Vertex cur = start;
  int dir = 0;
  for (std::size_t step = 0; step < edge_count; ++step) {
    auto& outs = out_edges[cur];
    if (outs.empty()) break;
    // At pinch vertices prefer the left-most turn so diagonal neighbours stay
    // in one ring.
    std::size_t best = 0;
    int best_rank = 99;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      const int d = direction_of(cur, outs[k]);
      const int turn = (d - dir + 4) % 4;  // 0 straight, 1 right, 3 left
      const int rank = turn == 3 ? 0 : turn == 0 ? 1 : turn == 1 ? 2 : 3;
      if (rank < best_rank) best_rank = rank, best = k;
    }
    const Vertex next = outs[best];
    outs.erase(outs.begin() + static_cast<long>(best));
    path.push_back(cur);
    dir = direction_of(cur, next);
    cur = next;
    if (cur == start && out_edges[cur].empty()) break;
  }

  // Drop collinear vertices.
  Ring ring;
  const std::size_t n = path.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vertex& prev = path[(i + n - 1) % n];
    const Vertex& v = path[i];
    const Vertex& next = path[(i + 1) % n];
    if (direction_of(prev, v) == direction_of(v, next)) continue;
    ring.push_back({static_cast<double>(v.x + col_min), static_cast<double>(v.y + row_min)});
  }
  return ring;
}

}  // namespace

std::vector<Ring> vectorize_mask(const BinaryMask& mask) {
  const InstanceMap imap = label_instances(mask, Connectivity::Eight);
  std::vector<Ring> rings;
  for (const auto& reg : all_regions(imap)) {
    // Local window with a one-pixel background margin; holes are the
    // background pixels not 4-reachable from the margin.
    const int h = reg.row_max - reg.row_min + 3;
    const int w = reg.col_max - reg.col_min + 3;
    BinaryMask local(w, h);
    for (const auto& p : reg.pixels) local.at(p.row - reg.row_min + 1, p.col - reg.col_min + 1) = 1;
    Grid<std::uint8_t> outside(w, h, 0);
    std::vector<Pixel> stack{{0, 0}};
    outside.at(0, 0) = 1;
    while (!stack.empty()) {
      const Pixel p = stack.back();
      stack.pop_back();
      const std::array<Pixel, 4> nbs{{{p.row - 1, p.col}, {p.row + 1, p.col}, {p.row, p.col - 1}, {p.row, p.col + 1}}};
      for (const auto& q : nbs) {
        if (!local.contains(q.row, q.col) || local.at(q.row, q.col) || outside.at(q.row, q.col)) continue;
        outside.at(q.row, q.col) = 1;
        stack.push_back(q);
      }
    }
    for (std::size_t i = 0; i < local.size(); ++i) local[i] = outside[i] ? 0 : 1;
    rings.push_back(trace_outer_ring(local, reg.row_min - 1, reg.col_min - 1));
  }
  return rings;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  // Separable max filter: rows then columns.
  const int w = mask.width(), h = mask.height();
  BinaryMask tmp(w, h), out(w, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      for (int k = std::max(0, c - radius); k <= std::min(w - 1, c + radius); ++k) tmp.at(r, k) = 1;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!tmp.at(r, c)) continue;
      for (int k = std::max(0, r - radius); k <= std::min(h - 1, r + radius); ++k) out.at(k, c) = 1;
    }
  return out;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("iou: dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double pixel_accuracy(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("pixel_accuracy: dimension mismatch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += ((a[i] != 0) == (b[i] != 0));
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace cadalign
