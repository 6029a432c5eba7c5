#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadalign/eval.hpp"
#include "cadalign/inference.hpp"
#include "cadalign/training.hpp"

namespace cadalign::cli {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string source = "shapes";  // shapes | inria
  std::string root;               // inria layout root
  int samples = 500;
  int val_samples = 50;
  int size = 128;
  std::set<std::string> val_tiles;
  std::set<std::string> test_tiles;
};

struct InferenceConfig {
  RepairThresholds thresholds;
  int patch_size = 448;
  int border = 64;
};

struct EvalConfig {
  EvalMode mode = EvalMode::AlignAndDetect;
  std::vector<double> displacements{8, 16, 24, 32, 40, 48, 56, 64};
  int trials = 1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  DataConfig data;
  CorruptionSpec corruption;
  TrainConfig training;  // its corruption and seed are filled from the fields above
  InferenceConfig inference;
  EvalConfig eval;

  // Module-level checks; throws ConfigError naming the field.
  void validate() const;
  TrainConfig train_config() const;
};

// Applies one "section.key" assignment. Throws ConfigError on unknown keys
// and unparsable values.
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);

// INI text: [section] headers, key = value lines, '#' or ';' comments.
// Keys before the first header belong to the run itself (seed, workers).
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config");
void apply_config_file(RunConfig& config, const std::string& path);

std::vector<std::string> config_keys();

}  // namespace cadalign::cli
