#include "cadalign/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cadalign {

std::string to_string(EvalMode mode) {
  return mode == EvalMode::Alignment ? "alignment" : "align_and_detect";
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "alignment") return EvalMode::Alignment;
  if (text == "align_and_detect") return EvalMode::AlignAndDetect;
  throw std::invalid_argument("unknown eval mode '" + text + "' (expected alignment or align_and_detect)");
}

BinaryMask matched_ground_truth(const BinaryMask& gt_mask, const BinaryMask& input_mask) {
  if (!gt_mask.same_shape(input_mask)) throw std::invalid_argument("evaluate: gt and input dimensions differ");
  const InstanceMap gt = label_instances(gt_mask);
  const InstanceMap in = label_instances(input_mask);
  std::vector<long> gt_area(gt.instance_count + 1, 0), in_area(in.instance_count + 1, 0);
  std::map<std::pair<int, int>, long> overlap;
  for (std::size_t i = 0; i < gt_mask.size(); ++i) {
    const int g = gt.labels[i], n = in.labels[i];
    ++gt_area[g];
    ++in_area[n];
    if (g && n) ++overlap[{n, g}];
  }
  std::vector<int> best(in.instance_count + 1, 0);
  std::vector<double> best_iou(in.instance_count + 1, 0.0);
  for (const auto& [key, inter] : overlap) {
    const auto [n, g] = key;
    const double v = static_cast<double>(inter) / (in_area[n] + gt_area[g] - inter);
    if (v > best_iou[n]) best_iou[n] = v, best[n] = g;
  }
  std::vector<bool> keep(gt.instance_count + 1, false);
  for (int n = 1; n <= in.instance_count; ++n) keep[best[n]] = best[n] != 0;
  BinaryMask out(gt_mask.width(), gt_mask.height());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[gt.labels[i]] ? 1 : 0;
  return out;
}

EvalReport evaluate(const RepairResult& pred, const BinaryMask& gt_mask, const BinaryMask& input_mask,
                    EvalMode mode) {
  const BinaryMask& scored = mode == EvalMode::Alignment ? pred.aligned_map : pred.final_map;
  if (!scored.same_shape(gt_mask) || !input_mask.same_shape(gt_mask))
    throw std::invalid_argument("evaluate: prediction, gt and input dimensions differ");
  EvalReport r;
  r.mode = mode;
  if (mode == EvalMode::Alignment) {
    const BinaryMask target = matched_ground_truth(gt_mask, input_mask);
    r.iou = iou(scored, target);
    r.accuracy = pixel_accuracy(scored, target);
  } else {
    r.iou = iou(scored, gt_mask);
    r.accuracy = pixel_accuracy(scored, gt_mask);
  }
  r.instance_count = label_instances(input_mask).instance_count;
  r.removed = static_cast<int>(pred.removed_labels.size());
  r.added = static_cast<int>(pred.missing_polygons.size());
  return r;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["iou"] = r.iou;
  j["accuracy"] = r.accuracy;
  j["instances"] = {{"count", r.instance_count}, {"removed", r.removed}, {"added", r.added}};
  j["provenance"] = {{"checkpoint", r.provenance.checkpoint},
                     {"dataset", r.provenance.dataset},
                     {"seed", r.provenance.seed}};
  return j.dump(2);
}

std::vector<SweepRow> displacement_sweep(const RepairModel& model, const std::vector<LabeledTile>& dataset,
                                         const SweepOptions& options) {
  if (dataset.empty()) throw std::invalid_argument("displacement_sweep: empty dataset");
  if (options.trials < 1) throw std::invalid_argument("displacement_sweep: trials must be >= 1");
  std::vector<SweepRow> rows;
  for (double d : options.displacements) {
    if (!(d >= 0.0)) throw std::invalid_argument("displacement_sweep: displacements must be >= 0");
    CorruptionSpec spec = options.corruption;
    spec.max_disp = d;
    if (d == 0.0) {
      spec.max_rot = 0.0;
      spec.scale_lo = spec.scale_hi = 1.0;
      spec.p_remove = spec.p_inject = 0.0;
      spec.global_max_disp = spec.global_max_rot = 0.0;
    }
    spec.validate();
    double corrupted = 0.0, corrected = 0.0;
    for (int t = 0; t < options.trials; ++t)
      for (std::size_t i = 0; i < dataset.size(); ++i) {
        spec.seed = derive_seed(options.seed, static_cast<std::uint64_t>(t), i);
        const TrainingSample s = corrupt(dataset[i].image, dataset[i].gt, spec);
        const RepairResult r = repair_patch(model, s.image, s.noisy_mask, options.thresholds, options.calibration);
        corrupted += iou(s.noisy_mask, s.gt_mask);
        corrected += iou(r.final_map, s.gt_mask);
      }
    const double n = static_cast<double>(dataset.size()) * options.trials;
    rows.push_back({d, corrupted / n, corrected / n, options.seed});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "max_disp,iou_corrupted,iou_corrected,seed\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%llu\n", r.max_disp, r.iou_corrupted, r.iou_corrected,
                  static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "max_disp,iou_corrupted,iou_corrected,seed")
    throw std::invalid_argument("sweep CSV: missing or unexpected header");
  std::vector<SweepRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    SweepRow r;
    unsigned long long seed = 0;
    int consumed = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%llu%n", &r.max_disp, &r.iou_corrupted, &r.iou_corrected, &seed,
                    &consumed) != 4 ||
        consumed != static_cast<int>(line.size()))
      throw std::invalid_argument("sweep CSV: malformed line " + std::to_string(lineno));
    r.seed = seed;
    rows.push_back(r);
  }
  return rows;
}

std::string sweep_svg(const std::vector<SweepRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("emit_plot: no rows");
  constexpr double W = 640, H = 400, L = 64, R = 24, T = 24, B = 56;
  double xmin = rows.front().max_disp, xmax = xmin;
  for (const auto& r : rows) xmin = std::min(xmin, r.max_disp), xmax = std::max(xmax, r.max_disp);
  if (xmax == xmin) xmin -= 1.0, xmax += 1.0;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - y * (H - T - B); };
  std::string s;
  char buf[256];
  auto add = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    s += buf;
  };
  add("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", W, H,
      W, H);
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
  add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, T, L, H - B);
  for (const auto& r : rows) {
    add("<line class=\"xtick\" x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
        px(r.max_disp), H - B, px(r.max_disp), H - B + 5);
    add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\">%g</text>\n", px(r.max_disp),
        H - B + 20, r.max_disp);
  }
  for (int k = 0; k <= 5; ++k) {
    const double v = k / 5.0;
    add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L - 5, py(v), L, py(v));
    add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"end\">%.1f</text>\n", L - 8, py(v) + 4, v);
  }
  add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"13\" text-anchor=\"middle\">Maximum displacement (px)</text>\n",
      (L + W - R) / 2, H - 12);
  add("<text x=\"16\" y=\"%.2f\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 %.2f)\">"
      "Intersection over Union</text>\n",
      (T + H - B) / 2, (T + H - B) / 2);
  const struct {
    const char* name;
    const char* color;
    double SweepRow::*field;
  } series[] = {{"corrupted", "#d62728", &SweepRow::iou_corrupted}, {"corrected", "#1f77b4", &SweepRow::iou_corrected}};
  int k = 0;
  for (const auto& sr : series) {
    s += std::string("<polyline class=\"") + sr.name + "\" fill=\"none\" stroke=\"" + sr.color +
         "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      add("%s%.2f,%.2f", i ? " " : "", px(rows[i].max_disp), py(rows[i].*sr.field));
    }
    s += "\"/>\n";
    for (const auto& r : rows)
      add("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(r.max_disp), py(r.*sr.field), sr.color);
    add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" fill=\"%s\">%s</text>\n", W - R - 90, T + 16 + 16.0 * k,
        sr.color, sr.name);
    ++k;
  }
  s += "</svg>\n";
  return s;
}

void emit_plot(const std::vector<SweepRow>& rows, const std::string& out_path) {
  const std::string svg = sweep_svg(rows);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << svg;
}

}  // namespace cadalign
