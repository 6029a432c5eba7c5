#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadalign/geometry.hpp"
#include "cadalign/nn/tensor.hpp"
#include "cadalign/raster.hpp"

namespace cadalign {

struct GeneratorConfig {
  int depth = 4;
  int base_channels = 16;
  int recurrence_steps = 2;
  int input_channels = 4;
  std::uint64_t parameter_seed = 0;

  void validate() const;
  // Throws std::invalid_argument with the nearest valid size when width or
  // height is not a multiple of 2^depth.
  void check_input_size(int width, int height) const;
  int size_multiple() const { return 1 << depth; }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct ModelOutput {
  TransformField field;     // tanh range
  ProbabilityMask missing;  // sigmoid range
  ProbabilityMask obsolete;
};

// Anything that maps (image, noisy mask) to the three outputs.
class RepairModel {
public:
  virtual ~RepairModel() = default;
  virtual ModelOutput predict(const IntensityImage& image, const BinaryMask& noisy_mask) const = 0;
  virtual int size_multiple() const { return 1; }
};

// Predicts the zero field and empty detection masks.
class IdentityModel final : public RepairModel {
public:
  ModelOutput predict(const IntensityImage& image, const BinaryMask& noisy_mask) const override;
};

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct NamedParameter {
  std::string name;
  nn::Var var;
};

// Recurrent-residual U-Net with a shared decoder and a 6-channel 1x1 head:
// channels 0-3 tanh (transform field), 4 sigmoid (missing), 5 sigmoid (obsolete).
class Generator final : public RepairModel {
public:
  static constexpr std::uint32_t kCheckpointVersion = 2;
  static constexpr int kOutputChannels = 6;

  explicit Generator(const GeneratorConfig& config);

  const GeneratorConfig& config() const { return config_; }
  int size_multiple() const override { return config_.size_multiple(); }

  // Activated heads, shape (N, 6, H, W).
  nn::Var forward(nn::Graph& graph, const nn::Var& input) const;

  ModelOutput predict(const IntensityImage& image, const BinaryMask& noisy_mask) const override;

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  void save(const std::string& path) const;
  static Generator load(const std::string& path);

private:
  struct Conv {
    nn::Var weight, bias;
    int kernel = 3;
  };
  struct Recurrent {
    Conv conv;
    nn::Var gamma, beta;  // instance-norm affine, shared across steps
  };
  struct Rrcnn {
    Conv entry;  // 1x1
    Recurrent first, second;
  };

  Conv make_conv(const std::string& name, int cin, int cout, int kernel, bool transpose = false);
  Recurrent make_recurrent(const std::string& name, int channels);
  Rrcnn make_rrcnn(const std::string& name, int cin, int cout);
  nn::Var apply(nn::Graph& g, const Conv& c, const nn::Var& x) const;
  nn::Var apply(nn::Graph& g, const Recurrent& r, const nn::Var& x) const;
  nn::Var apply(nn::Graph& g, const Rrcnn& b, const nn::Var& x) const;

  GeneratorConfig config_;
  std::vector<Rrcnn> encoder_;  // depth + 1 levels, last is the bottleneck
  std::vector<Conv> up_;        // transposed 2x2, level i+1 -> i
  std::vector<Rrcnn> decoder_;
  Conv head_;
  std::vector<NamedParameter> params_;
  std::uint64_t init_state_ = 0;
};

// (1, 4, H, W): image channels followed by the mask.
nn::Tensor make_input(const IntensityImage& image, const BinaryMask& noisy_mask);

// Splits a (1, 6, H, W) activated head tensor into the output types.
ModelOutput split_heads(const nn::Tensor& heads);

}  // namespace cadalign
