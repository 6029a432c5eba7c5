#include "cadalign/eval.hpp"
#include "cadalign/ingest.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cadalign;

namespace {

void fill_rect(BinaryMask& m, int r0, int c0, int h, int w) {
  for (int r = r0; r < r0 + h; ++r)
    for (int c = c0; c < c0 + w; ++c) m.at(r, c) = 1;
}

int count(const std::string& s, const std::string& needle) {
  int n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

std::vector<SweepRow> eight_rows() {
  std::vector<SweepRow> rows;
  for (int i = 1; i <= 8; ++i) rows.push_back({8.0 * i, 0.9 - 0.08 * i, 0.95 - 0.03 * i, 42});
  return rows;
}

}  // namespace

TEST_CASE("perfect prediction scores one in both modes") {
  BinaryMask gt(64, 48);
  fill_rect(gt, 5, 5, 12, 20);
  fill_rect(gt, 30, 30, 10, 10);
  RepairResult pred;
  pred.aligned_map = pred.final_map = gt;
  for (EvalMode mode : {EvalMode::Alignment, EvalMode::AlignAndDetect}) {
    const EvalReport r = evaluate(pred, gt, gt, mode);
    CHECK(r.iou == 1.0);
    CHECK(r.accuracy == 1.0);
    CHECK(r.instance_count == 2);
    CHECK(r.mode == mode);
  }
}

TEST_CASE("alignment mode ignores buildings the input never had") {
  BinaryMask gt(64, 64), input(64, 64);
  fill_rect(gt, 4, 4, 10, 10);
  fill_rect(gt, 40, 40, 12, 12);  // missing from the input
  fill_rect(input, 6, 7, 10, 10);
  CHECK(count_foreground(matched_ground_truth(gt, input)) == 100);

  RepairResult pred;
  pred.aligned_map = pred.final_map = input;
  const EvalReport align = evaluate(pred, gt, input, EvalMode::Alignment);
  const EvalReport detect = evaluate(pred, gt, input, EvalMode::AlignAndDetect);
  CHECK(align.iou == doctest::Approx(56.0 / 144.0));
  CHECK(detect.iou == doctest::Approx(56.0 / 288.0));
  CHECK(align.iou > detect.iou);

  BinaryMask wrong(32, 32);
  CHECK_THROWS_AS(evaluate(pred, wrong, input, EvalMode::Alignment), std::invalid_argument);
}

TEST_CASE("identity pipeline scores the input itself") {
  const auto tiles = generate_shapes_dataset(6, 128, 3);
  CorruptionSpec spec;
  spec.max_disp = 16;
  const IdentityModel identity;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    spec.seed = 100 + i;
    const TrainingSample s = corrupt(tiles[i].image, tiles[i].gt, spec);
    const RepairResult r = repair_patch(identity, s.image, s.noisy_mask, {}, {});
    const EvalReport rep = evaluate(r, s.gt_mask, s.noisy_mask, EvalMode::AlignAndDetect);
    CHECK(rep.iou == iou(s.noisy_mask, s.gt_mask));
    CHECK(rep.accuracy == pixel_accuracy(s.noisy_mask, s.gt_mask));
    CHECK(rep.removed == 0);
    CHECK(rep.added == 0);
  }
}

TEST_CASE("report JSON mirrors the report") {
  EvalReport r;
  r.mode = EvalMode::AlignAndDetect;
  r.iou = 0.625;
  r.accuracy = 0.875;
  r.instance_count = 7;
  r.removed = 1;
  r.added = 2;
  r.provenance = {"best.ckpt", "shapes-500", 42};
  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["mode"] == "align_and_detect");
  CHECK(j["iou"] == 0.625);
  CHECK(j["accuracy"] == 0.875);
  CHECK(j["instances"]["count"] == 7);
  CHECK(j["instances"]["removed"] == 1);
  CHECK(j["instances"]["added"] == 2);
  CHECK(j["provenance"]["checkpoint"] == "best.ckpt");
  CHECK(j["provenance"]["seed"] == 42);
  CHECK(parse_eval_mode("alignment") == EvalMode::Alignment);
  CHECK_THROWS_AS(parse_eval_mode("detect"), std::invalid_argument);
}

TEST_CASE("sweep CSV round trips") {
  auto rows = eight_rows();
  rows[3].iou_corrected = 0.1 + 0.2;  // not exactly representable in short decimal
  const std::string csv = sweep_csv(rows);
  CHECK(csv.rfind("max_disp,iou_corrupted,iou_corrected,seed\n", 0) == 0);
  CHECK(count(csv, "\n") == 9);
  CHECK(parse_sweep_csv(csv) == rows);
  CHECK(parse_sweep_csv(sweep_csv({})).empty());
  CHECK_THROWS_AS(parse_sweep_csv("a,b\n"), std::invalid_argument);
  CHECK_THROWS_WITH(parse_sweep_csv("max_disp,iou_corrupted,iou_corrected,seed\n8,0.5,x,1\n"),
                    doctest::Contains("line 2"));
}

TEST_CASE("sweep SVG structure and determinism") {
  const auto rows = eight_rows();
  const std::string svg = sweep_svg(rows);
  CHECK(svg == sweep_svg(rows));
  CHECK(count(svg, "<polyline") == 2);
  CHECK(count(svg, "class=\"corrupted\"") == 1);
  CHECK(count(svg, "class=\"corrected\"") == 1);
  CHECK(count(svg, "class=\"xtick\"") == 8);
  CHECK(svg.find("Intersection over Union") != std::string::npos);
  CHECK(svg.find("Maximum displacement") != std::string::npos);

  const std::string one = sweep_svg({{16, 0.4, 0.7, 1}});
  CHECK(count(one, "<circle") == 2);
  CHECK(count(one, "class=\"xtick\"") == 1);
  CHECK(one.find("nan") == std::string::npos);
  CHECK_THROWS_AS(sweep_svg({}), std::invalid_argument);
}

TEST_CASE("displacement sweep on shapes") {
  const auto tiles = generate_shapes_dataset(12, 128, 21);
  const IdentityModel identity;
  SweepOptions opt;
  opt.displacements = {0, 8, 16, 24, 32};
  opt.seed = 5;
  const auto rows = displacement_sweep(identity, tiles, opt);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].iou_corrupted == 1.0);
  CHECK(rows[0].iou_corrected == 1.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].max_disp == opt.displacements[i]);
    CHECK(rows[i].seed == 5);
    CHECK(rows[i].iou_corrupted >= 0.0);
    CHECK(rows[i].iou_corrupted <= 1.0);
    // The identity model leaves the corrupted map untouched.
    CHECK(rows[i].iou_corrected == rows[i].iou_corrupted);
    if (i > 0) CHECK(rows[i].iou_corrupted <= rows[i - 1].iou_corrupted);
  }
  CHECK(displacement_sweep(identity, tiles, opt) == rows);

  opt.displacements = {-1};
  CHECK_THROWS_AS(displacement_sweep(identity, tiles, opt), std::invalid_argument);
  CHECK_THROWS_AS(displacement_sweep(identity, {}, SweepOptions{}), std::invalid_argument);
}
