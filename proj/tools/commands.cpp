#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cadalign/ingest.hpp"
#include "cadalign/rng.hpp"
#include "json.hpp"

namespace cadalign::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string fmt(double v, const char* f = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool has_extension(const std::string& path, std::initializer_list<const char*> exts) {
  std::string ext = fs::path(path).extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (const char* e : exts)
    if (ext == e) return true;
  return false;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

ordered_json transform_json(const SimilarityTransform& t) {
  return {{"tx", t.tx}, {"ty", t.ty}, {"theta", t.theta}, {"scale", t.scale}};
}

std::vector<LabeledTile> load_tiles(const DatasetIndex& index) {
  std::vector<LabeledTile> tiles;
  for (const auto& e : index.entries) {
    LabeledTile t{read_image(e.image_path), read_mask(e.gt_mask_path)};
    if (t.image.width != t.gt.width() || t.image.height != t.gt.height())
      throw IoError("image and gt sizes differ for tile " + e.tile_name);
    tiles.push_back(std::move(t));
  }
  return tiles;
}

BinaryMask outline(const BinaryMask& m) {
  BinaryMask out(m.width(), m.height());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      if (!m.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.height() - 1 || c == m.width() - 1 || !m.at(r - 1, c) ||
                        !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
      out.at(r, c) = edge ? 1 : 0;
    }
  return out;
}

}  // namespace

std::unique_ptr<RepairModel> load_model(const std::string& checkpoint) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (checkpoint == "identity") return std::make_unique<IdentityModel>();
  if (!fs::is_regular_file(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
  return std::make_unique<Generator>(Generator::load(checkpoint));
}

std::pair<std::vector<LabeledTile>, std::vector<LabeledTile>> load_datasets(const RunConfig& config) {
  const auto& d = config.data;
  if (d.source == "shapes")
    return {generate_shapes_dataset(d.samples, d.size, derive_seed(config.seed, 0x5a1)),
            generate_shapes_dataset(d.val_samples, d.size, derive_seed(config.seed, 0x5a2))};
  const SplitSpec split{d.val_tiles, d.test_tiles};
  return {load_tiles(load_inria_index(d.root, split, Split::Train)),
          load_tiles(load_inria_index(d.root, split, Split::Val))};
}

void print_table(std::ostream& out, const std::string& title,
                 const std::vector<std::pair<std::string, std::string>>& rows) {
  char buf[256];
  out << "== " << title << " ==\n";
  std::snprintf(buf, sizeof buf, "%-28s %16s\n", "metric", "value");
  out << buf << std::string(28, '-') << ' ' << std::string(16, '-') << '\n';
  for (const auto& [k, v] : rows) {
    std::snprintf(buf, sizeof buf, "%-28s %16s\n", k.c_str(), v.c_str());
    out << buf;
  }
}

void print_sweep_table(std::ostream& out, const std::vector<SweepRow>& rows) {
  char buf[128];
  out << "== sweep ==\n";
  std::snprintf(buf, sizeof buf, "%10s %15s %15s\n", "max_disp", "iou_corrupted", "iou_corrected");
  out << buf << std::string(10, '-') << ' ' << std::string(15, '-') << ' ' << std::string(15, '-') << '\n';
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%10g %15.4f %15.4f\n", r.max_disp, r.iou_corrupted, r.iou_corrected);
    out << buf;
  }
}

IntensityImage overlay(const IntensityImage& image, const BinaryMask& input, const RepairResult& result) {
  const int w = image.width, h = image.height;
  IntensityImage out(w, h, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      float gray = 0.0f;
      for (int ch = 0; ch < image.channels; ++ch) gray += image.at(ch, r, c);
      gray = 0.6f * gray / static_cast<float>(image.channels);
      for (int ch = 0; ch < 3; ++ch) out.at(ch, r, c) = gray;
    }
  auto paint = [&](const BinaryMask& m, float red, float green, float blue) {
    const BinaryMask edge = outline(m);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if (edge.at(r, c)) out.at(0, r, c) = red, out.at(1, r, c) = green, out.at(2, r, c) = blue;
  };
  const InstanceMap labels = label_instances(input);
  BinaryMask removed(w, h);
  for (std::size_t i = 0; i < removed.size(); ++i)
    removed[i] = result.removed_labels.count(labels.labels[i]) ? 1 : 0;
  paint(input, 1.0f, 0.0f, 0.0f);
  paint(removed, 1.0f, 1.0f, 0.0f);
  paint(result.aligned_map, 0.0f, 1.0f, 1.0f);
  paint(rasterize_polygons(result.missing_polygons, w, h), 1.0f, 105.0f / 255.0f, 180.0f / 255.0f);
  return out;
}

int cmd_synth(const RunConfig& config, const SynthArgs& args, std::ostream& out) {
  const auto tiles = load_datasets(config).first;
  fs::create_directories(args.out);
  double sum_iou = 0.0;
  int removed = 0, injected = 0;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    CorruptionSpec spec = config.corruption;
    spec.seed = derive_seed(config.seed, i, 0x5e7);
    const TrainingSample s = corrupt(tiles[i].image, tiles[i].gt, spec);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    const std::string base = (fs::path(args.out) / stem).string();
    write_image_png(s.image, base + "_image.png");
    write_mask_png(s.noisy_mask, base + "_noisy.png");
    write_mask_png(s.gt_mask, base + "_gt.png");
    write_mask_png(s.missing_gt, base + "_missing_gt.png");
    write_mask_png(s.obsolete_gt, base + "_obsolete_gt.png");

    ordered_json rec;
    rec["seed"] = spec.seed;
    ordered_json inst = ordered_json::array();
    for (const auto& [label, t] : s.record.per_instance) {
      const Point2 b = s.record.barycenters.at(label);
      inst.push_back({{"label", label}, {"transform", transform_json(t)}, {"barycenter", {b.x, b.y}}});
    }
    rec["instances"] = inst;
    rec["removed_labels"] = s.record.removed_labels;
    ordered_json shapes = ordered_json::array();
    for (const auto& ring : s.record.injected_shapes) {
      ordered_json pts = ordered_json::array();
      for (const auto& p : ring) pts.push_back({p.x, p.y});
      shapes.push_back(pts);
    }
    rec["injected_shapes"] = shapes;
    rec["global_transform"] = transform_json(s.record.global_transform);
    rec["global_anchor"] = {s.record.global_anchor.x, s.record.global_anchor.y};
    rec["digest"] = s.record.digest();
    write_text(base + "_record.json", rec.dump(2) + "\n");

    sum_iou += iou(s.noisy_mask, s.gt_mask);
    removed += static_cast<int>(s.record.removed_labels.size());
    injected += static_cast<int>(s.record.injected_shapes.size());
  }
  print_table(out, "synth", {{"samples", std::to_string(tiles.size())},
                             {"mean_iou_corrupted", fmt(sum_iou / static_cast<double>(tiles.size()))},
                             {"removed_instances", std::to_string(removed)},
                             {"injected_shapes", std::to_string(injected)},
                             {"out", args.out}});
  return 0;
}

int cmd_train(const RunConfig& config, const TrainArgs& args, std::ostream& out) {
  TrainConfig tc = config.train_config();
  if (!args.out.empty()) tc.checkpoint_dir = args.out;
  const auto [train, val] = load_datasets(config);
  out << "training on " << train.size() << " tiles, validating on " << val.size() << '\n';
  const FitResult r = fit(train, val, tc, [&](const EpochMetrics& m, long it, double cpu) {
    out << "epoch " << m.epoch << "  iter " << it << "  cpu " << fmt(cpu, "%.1f") << "s  loss "
        << fmt(m.loss.total) << "  val iou " << fmt(m.val_iou_corrupted) << " -> " << fmt(m.val_iou_corrected)
        << std::endl;
  });
  const EpochMetrics& last = r.history.back();
  print_table(out, "train", {{"epochs", std::to_string(r.history.size())},
                             {"iterations", std::to_string(r.iterations)},
                             {"cpu_seconds", fmt(r.cpu_seconds, "%.1f")},
                             {"val_iou_corrupted", fmt(last.val_iou_corrupted)},
                             {"val_iou_corrected", fmt(last.val_iou_corrected)},
                             {"val_acc_missing", fmt(last.val_acc_missing)},
                             {"val_acc_obsolete", fmt(last.val_acc_obsolete)}});
  out << "best checkpoint: " << r.best_checkpoint << '\n';
  return 0;
}

int cmd_repair(const RunConfig& config, const RepairArgs& args, std::ostream& out) {
  const auto model = load_model(args.checkpoint);
  const IntensityImage image = read_image(args.image);
  BinaryMask input;
  int polygon_count = -1;
  GeoTransform gt;
  const bool geojson = has_extension(args.annotations, {".geojson", ".json"});
  if (!args.geotransform.empty()) {
    if (!geojson) throw UsageError("--geotransform only applies to GeoJSON annotations");
    if (args.geotransform.size() != 6) throw UsageError("--geotransform takes 6 values");
    gt = {args.geotransform[0], args.geotransform[1], args.geotransform[2],
          args.geotransform[3], args.geotransform[4], args.geotransform[5]};
    try {
      gt.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (geojson) {
    const auto polys = geo_to_pixel(read_geojson(args.annotations), gt, image.width, image.height);
    polygon_count = static_cast<int>(polys.polygons.size());
    input = rasterize_polygons(polys.polygons, image.width, image.height);
  } else {
    input = read_mask(args.annotations);
  }
  if (input.width() != image.width || input.height() != image.height)
    throw UsageError("annotation raster is " + std::to_string(input.width()) + "x" + std::to_string(input.height()) +
                     " but the image is " + std::to_string(image.width) + "x" + std::to_string(image.height));

  RepairImageOptions opt;
  opt.thresholds = config.inference.thresholds;
  opt.calibration = config.training.calibration;
  opt.workers = config.workers;
  const TilePlan plan = plan_tiles(image.height, image.width, config.inference.patch_size, config.inference.border);
  const RepairResult r = repair_image(*model, image, input, plan, opt);

  fs::create_directories(args.out);
  const fs::path dir(args.out);
  write_mask_png(r.final_map, (dir / "final.png").string());
  write_mask_png(r.aligned_map, (dir / "aligned.png").string());
  write_image_png(overlay(image, input, r), (dir / "overlay.png").string());
  write_geojson(pixel_to_geo(vectorize_mask(r.final_map), gt), (dir / "corrected.geojson").string());

  ordered_json rep;
  rep["image"] = args.image;
  rep["annotations"] = args.annotations;
  rep["checkpoint"] = args.checkpoint;
  if (polygon_count >= 0) rep["input_polygons"] = polygon_count;
  rep["instances"] = label_instances(input).instance_count;
  rep["removed_labels"] = r.removed_labels;
  rep["added_polygons"] = r.missing_polygons.size();
  ordered_json tr = ordered_json::array();
  for (const auto& [label, t] : r.per_instance_transforms) {
    ordered_json e = transform_json(t);
    e["label"] = label;
    tr.push_back(e);
  }
  rep["transforms"] = tr;
  rep["warnings"] = r.warnings;
  write_text((dir / "report.json").string(), rep.dump(2) + "\n");

  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
  std::vector<std::pair<std::string, std::string>> rows;
  if (polygon_count >= 0) rows.emplace_back("input_polygons", std::to_string(polygon_count));
  rows.emplace_back("instances", std::to_string(rep["instances"].get<int>()));
  rows.emplace_back("removed", std::to_string(r.removed_labels.size()));
  rows.emplace_back("added", std::to_string(r.missing_polygons.size()));
  rows.emplace_back("iou_input_vs_final", fmt(iou(input, r.final_map)));
  rows.emplace_back("out", args.out);
  print_table(out, "repair", rows);
  return 0;
}

int cmd_eval(const RunConfig& config, const EvalArgs& args, std::ostream& out) {
  const BinaryMask gt = read_mask(args.gt);
  RepairResult pred;
  BinaryMask input;
  std::string checkpoint = "none";
  if (!args.pred.empty()) {
    if (!args.checkpoint.empty()) throw UsageError("give either --pred or --checkpoint, not both");
    pred.aligned_map = pred.final_map = read_mask(args.pred);
    input = args.input.empty() ? pred.aligned_map : read_mask(args.input);
  } else {
    if (args.image.empty() || args.input.empty())
      throw UsageError("without --pred, eval needs --image, --input and --checkpoint");
    const auto model = load_model(args.checkpoint);
    checkpoint = args.checkpoint;
    input = read_mask(args.input);
    RepairImageOptions opt;
    opt.thresholds = config.inference.thresholds;
    opt.calibration = config.training.calibration;
    opt.workers = config.workers;
    const IntensityImage image = read_image(args.image);
    pred = repair_image(*model, image, input,
                        plan_tiles(image.height, image.width, config.inference.patch_size, config.inference.border),
                        opt);
  }
  if (!gt.same_shape(pred.final_map) || !gt.same_shape(input)) throw UsageError("eval: mask dimensions differ");
  EvalReport rep = evaluate(pred, gt, input, config.eval.mode);
  rep.provenance = {checkpoint, args.gt, config.seed};
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    write_text((fs::path(args.out) / "eval.json").string(), report_json(rep) + "\n");
  }
  print_table(out, "eval", {{"mode", to_string(rep.mode)},
                            {"iou", fmt(rep.iou)},
                            {"accuracy", fmt(rep.accuracy)},
                            {"instances", std::to_string(rep.instance_count)},
                            {"removed", std::to_string(rep.removed)},
                            {"added", std::to_string(rep.added)}});
  return 0;
}

int cmd_sweep(const RunConfig& config, const SweepArgs& args, std::ostream& out) {
  const auto model = load_model(args.checkpoint);
  const auto val = load_datasets(config).second;
  SweepOptions opt;
  opt.displacements = config.eval.displacements;
  opt.corruption = config.corruption;
  opt.trials = config.eval.trials;
  opt.seed = config.seed;
  opt.thresholds = config.inference.thresholds;
  opt.calibration = config.training.calibration;
  const auto rows = displacement_sweep(*model, val, opt);
  fs::create_directories(args.out);
  write_text((fs::path(args.out) / "sweep.csv").string(), sweep_csv(rows));
  emit_plot(rows, (fs::path(args.out) / "sweep.svg").string());
  print_sweep_table(out, rows);
  return 0;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Align building annotations to aerial imagery", "cadalign"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int workers = 0;
  SynthArgs synth;
  TrainArgs train;
  RepairArgs repair;
  EvalArgs eval;
  SweepArgs sweep;

  auto common = [&](CLI::App* sub, std::string* out_dir, const std::string& out_help) {
    sub->add_option("--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override one key, e.g. --set training.epochs=3");
    sub->add_option("--seed", seed, "Run seed (overrides the config)");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", *out_dir, out_help);
  };

  auto* s_synth = app.add_subcommand("synth", "Write corrupted training samples and their records");
  common(s_synth, &synth.out, "Output directory");
  auto* s_train = app.add_subcommand("train", "Train a generator and write checkpoints");
  common(s_train, &train.out, "Checkpoint directory");
  auto* s_repair = app.add_subcommand("repair", "Repair the annotations of one image");
  common(s_repair, &repair.out, "Output directory");
  s_repair->add_option("image", repair.image, "Aerial image (PNG or TIFF)")->required()->check(CLI::ExistingFile);
  s_repair->add_option("annotations", repair.annotations, "Mask raster or GeoJSON")->required()->check(
      CLI::ExistingFile);
  s_repair->add_option("--checkpoint", repair.checkpoint, "Checkpoint path or 'identity'")->required();
  s_repair->add_option("--geotransform", repair.geotransform, "x0 dx_col dx_row y0 dy_col dy_row")->expected(6);
  auto* s_eval = app.add_subcommand("eval", "Score a prediction against ground truth");
  common(s_eval, &eval.out, "Directory for eval.json");
  s_eval->add_option("--gt", eval.gt, "Ground-truth mask")->required()->check(CLI::ExistingFile);
  s_eval->add_option("--pred", eval.pred, "Predicted mask")->check(CLI::ExistingFile);
  s_eval->add_option("--input", eval.input, "Input annotation mask")->check(CLI::ExistingFile);
  s_eval->add_option("--image", eval.image, "Image, when repairing with --checkpoint")->check(CLI::ExistingFile);
  s_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint path or 'identity'");
  auto* s_sweep = app.add_subcommand("sweep", "Displacement sweep on the held-out tiles");
  common(s_sweep, &sweep.out, "Output directory");
  s_sweep->add_option("--checkpoint", sweep.checkpoint, "Checkpoint path or 'identity'")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  RunConfig config;
  try {
    if (!config_path.empty()) apply_config_file(config, config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      set_config_value(config, o.substr(0, eq), o.substr(eq + 1));
    }
    for (auto* sub : app.get_subcommands()) {
      if (sub->count("--seed")) config.seed = seed;
      if (sub->count("--workers")) config.workers = workers;
    }
    config.validate();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (s_synth->parsed()) return cmd_synth(config, synth, out);
    if (s_train->parsed()) return cmd_train(config, train, out);
    if (s_repair->parsed()) return cmd_repair(config, repair, out);
    if (s_eval->parsed()) return cmd_eval(config, eval, out);
    return cmd_sweep(config, sweep, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace cadalign::cli
