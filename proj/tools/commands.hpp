#pragma once

#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"

namespace cadalign::cli {

// Bad invocation (exit code 2) as opposed to a failure while running (1).
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// "identity" selects the zero-field stub; anything else is a checkpoint path.
std::unique_ptr<RepairModel> load_model(const std::string& checkpoint);

// Train and held-out tiles for the configured data source.
std::pair<std::vector<LabeledTile>, std::vector<LabeledTile>> load_datasets(const RunConfig& config);

// "metric / value" table, 28 + 1 + 16 columns.
void print_table(std::ostream& out, const std::string& title,
                 const std::vector<std::pair<std::string, std::string>>& rows);
void print_sweep_table(std::ostream& out, const std::vector<SweepRow>& rows);

// Input red, corrected cyan, removed yellow, added pink, drawn as outlines
// over the dimmed gray image.
IntensityImage overlay(const IntensityImage& image, const BinaryMask& input, const RepairResult& result);

struct SynthArgs {
  std::string out = "synth";
};
struct TrainArgs {
  std::string out;  // overrides training.checkpoint_dir when set
};
struct RepairArgs {
  std::string image;
  std::string annotations;  // mask raster or GeoJSON
  std::string checkpoint;
  std::vector<double> geotransform;  // 6 values, GeoJSON input only
  std::string out = "repair_out";
};
struct EvalArgs {
  std::string gt;
  std::string pred;
  std::string input;
  std::string image;
  std::string checkpoint;
  std::string out;
};
struct SweepArgs {
  std::string checkpoint;
  std::string out = "sweep_out";
};

int cmd_synth(const RunConfig& config, const SynthArgs& args, std::ostream& out);
int cmd_train(const RunConfig& config, const TrainArgs& args, std::ostream& out);
int cmd_repair(const RunConfig& config, const RepairArgs& args, std::ostream& out);
int cmd_eval(const RunConfig& config, const EvalArgs& args, std::ostream& out);
int cmd_sweep(const RunConfig& config, const SweepArgs& args, std::ostream& out);

// Full command line including argv[0]; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cadalign::cli
