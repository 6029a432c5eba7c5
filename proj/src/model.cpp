#include "cadalign/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cadalign/rng.hpp"

namespace cadalign {

using nn::Graph;
using nn::Tensor;
using nn::Var;

void GeneratorConfig::validate() const {
  if (depth < 2) throw std::invalid_argument("generator.depth must be >= 2, got " + std::to_string(depth));
  if (depth > 8) throw std::invalid_argument("generator.depth must be <= 8, got " + std::to_string(depth));
  if (base_channels < 4)
    throw std::invalid_argument("generator.base_channels must be >= 4, got " + std::to_string(base_channels));
  if (recurrence_steps < 1)
    throw std::invalid_argument("generator.recurrence_steps must be >= 1, got " +
                                std::to_string(recurrence_steps));
  if (input_channels != 4)
    throw std::invalid_argument("generator.input_channels must be 4, got " + std::to_string(input_channels));
}

void GeneratorConfig::check_input_size(int width, int height) const {
  const int m = size_multiple();
  if (width % m == 0 && height % m == 0 && width > 0 && height > 0) return;
  auto up = [m](int v) { return std::max(m, (v + m - 1) / m * m); };
  throw std::invalid_argument("input " + std::to_string(width) + "x" + std::to_string(height) +
                              " is not divisible by " + std::to_string(m) + " (depth " +
                              std::to_string(depth) + "); pad to " + std::to_string(up(width)) + "x" +
                              std::to_string(up(height)));
}

ModelOutput IdentityModel::predict(const IntensityImage& image, const BinaryMask& noisy_mask) const {
  if (image.width != noisy_mask.width() || image.height != noisy_mask.height())
    throw std::invalid_argument("image and mask dimensions differ");
  const int w = noisy_mask.width(), h = noisy_mask.height();
  return {TransformField(w, h, 0.0), ProbabilityMask(w, h, 0.0), ProbabilityMask(w, h, 0.0)};
}

Tensor make_input(const IntensityImage& image, const BinaryMask& noisy_mask) {
  if (image.width != noisy_mask.width() || image.height != noisy_mask.height())
    throw std::invalid_argument("image " + std::to_string(image.width) + "x" +
                                std::to_string(image.height) + " and mask " +
                                std::to_string(noisy_mask.width()) + "x" +
                                std::to_string(noisy_mask.height()) + " differ");
  if (image.channels != 3)
    throw std::invalid_argument("expected a 3-channel image, got " + std::to_string(image.channels));
  Tensor t(1, 4, image.height, image.width);
  std::copy(image.values.begin(), image.values.end(), t.data.begin());
  float* m = t.data.data() + 3 * t.plane();
  for (std::size_t i = 0; i < noisy_mask.size(); ++i) m[i] = noisy_mask[i] ? 1.0f : 0.0f;
  return t;
}

ModelOutput split_heads(const Tensor& heads) {
  if (heads.n != 1 || heads.c != Generator::kOutputChannels)
    throw std::invalid_argument("split_heads expects (1,6,H,W), got " + heads.shape_string());
  const int w = heads.w, h = heads.h;
  ModelOutput out{TransformField(w, h), ProbabilityMask(w, h), ProbabilityMask(w, h)};
  const std::size_t plane = heads.plane();
  for (std::size_t i = 0; i < 4 * plane; ++i) out.field.values()[i] = heads.data[i];
  for (std::size_t i = 0; i < plane; ++i) {
    out.missing[i] = heads.data[4 * plane + i];
    out.obsolete[i] = heads.data[5 * plane + i];
  }
  return out;
}

Generator::Conv Generator::make_conv(const std::string& name, int cin, int cout, int kernel,
                                     bool transpose) {
  Rng rng(derive_seed(config_.parameter_seed, ++init_state_));
  // He scaling where a ReLU follows, LeCun scaling for the linear maps.
  const int fan_in = transpose ? cin : cin * kernel * kernel;
  const bool relu_follows = !transpose && kernel == 3;
  const double bound = std::sqrt((relu_follows ? 6.0 : 3.0) / fan_in);
  Tensor w = transpose ? Tensor(cin, cout, kernel, kernel) : Tensor(cout, cin, kernel, kernel);
  for (auto& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
  Conv c{nn::make_var(std::move(w), true), nn::make_var(Tensor(1, cout, 1, 1), true), kernel};
  params_.push_back({name + ".weight", c.weight});
  params_.push_back({name + ".bias", c.bias});
  return c;
}

Generator::Recurrent Generator::make_recurrent(const std::string& name, int channels) {
  Recurrent r;
  r.conv = make_conv(name, channels, channels, 3);
  Tensor ones(1, channels, 1, 1);
  std::fill(ones.data.begin(), ones.data.end(), 1.0f);
  r.gamma = nn::make_var(std::move(ones), true);
  r.beta = nn::make_var(Tensor(1, channels, 1, 1), true);
  params_.push_back({name + ".norm.gamma", r.gamma});
  params_.push_back({name + ".norm.beta", r.beta});
  return r;
}

Generator::Rrcnn Generator::make_rrcnn(const std::string& name, int cin, int cout) {
  Rrcnn b;
  b.entry = make_conv(name + ".entry", cin, cout, 1);
  b.first = make_recurrent(name + ".rec1", cout);
  b.second = make_recurrent(name + ".rec2", cout);
  return b;
}

Generator::Generator(const GeneratorConfig& config) : config_(config) {
  config_.validate();
  std::vector<int> ch(config_.depth + 1);
  for (int i = 0; i <= config_.depth; ++i) ch[i] = config_.base_channels << i;
  for (int i = 0; i <= config_.depth; ++i)
    encoder_.push_back(make_rrcnn("enc" + std::to_string(i), i == 0 ? config_.input_channels : ch[i - 1], ch[i]));
  for (int i = 0; i < config_.depth; ++i)
    up_.push_back(make_conv("up" + std::to_string(i), ch[i + 1], ch[i], 2, true));
  for (int i = 0; i < config_.depth; ++i)
    decoder_.push_back(make_rrcnn("dec" + std::to_string(i), 2 * ch[i], ch[i]));
  head_ = make_conv("head", ch[0], kOutputChannels, 1);
  // Start the field near identity so tanh is not saturated on step one.
  Tensor& hw = head_.weight->value;
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < hw.c; ++i) hw.at(o, i, 0, 0) *= 0.01f;
}

Var Generator::apply(Graph& g, const Conv& c, const Var& x) const {
  return nn::conv2d(g, x, c.weight, c.bias, c.kernel);
}

// x1 = f(x); then x1 = f(x + x1) for each recurrence step, f = relu(norm(conv)).
Var Generator::apply(Graph& g, const Recurrent& r, const Var& x) const {
  auto f = [&](const Var& in) { return nn::relu(g, nn::instance_norm(g, apply(g, r.conv, in), r.gamma, r.beta)); };
  Var x1 = f(x);
  for (int k = 0; k < config_.recurrence_steps; ++k) x1 = f(nn::add(g, x, x1));
  return x1;
}

Var Generator::apply(Graph& g, const Rrcnn& b, const Var& x) const {
  Var x0 = apply(g, b.entry, x);
  return nn::add(g, x0, apply(g, b.second, apply(g, b.first, x0)));
}

Var Generator::forward(Graph& g, const Var& input) const {
  const Tensor& in = input->value;
  if (in.c != config_.input_channels)
    throw std::invalid_argument("generator input has " + std::to_string(in.c) + " channels, expected " +
                                std::to_string(config_.input_channels));
  config_.check_input_size(in.w, in.h);
  std::vector<Var> skips;
  Var x = input;
  for (int i = 0; i < config_.depth; ++i) {
    x = apply(g, encoder_[i], x);
    skips.push_back(x);
    x = nn::max_pool2x2(g, x);
  }
  x = apply(g, encoder_[config_.depth], x);
  for (int i = config_.depth - 1; i >= 0; --i) {
    x = nn::conv_transpose2x2(g, x, up_[i].weight, up_[i].bias);
    x = apply(g, decoder_[i], nn::concat_channels(g, skips[i], x));
  }
  Var raw = apply(g, head_, x);
  return nn::concat_channels(g, nn::tanh_act(g, nn::slice_channels(g, raw, 0, 4)),
                             nn::sigmoid_act(g, nn::slice_channels(g, raw, 4, 6)));
}

ModelOutput Generator::predict(const IntensityImage& image, const BinaryMask& noisy_mask) const {
  Graph g(false);
  Var heads = forward(g, nn::make_var(make_input(image, noisy_mask)));
  return split_heads(heads->value);
}

std::size_t Generator::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.size();
  return n;
}

void Generator::zero_grad() {
  for (auto& p : params_)
    if (p.var->grad.size()) std::fill(p.var->grad.data.begin(), p.var->grad.data.end(), 0.0f);
}

namespace {

constexpr char kMagic[8] = {'C', 'A', 'D', 'A', 'L', 'G', 'N', '\0'};

std::uint64_t fnv1a(const std::string& bytes, std::size_t begin) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = begin; i < bytes.size(); ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void get_floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("corrupt checkpoint: truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

void Generator::save(const std::string& path) const {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::int32_t>(out, config_.depth);
  put<std::int32_t>(out, config_.base_channels);
  put<std::int32_t>(out, config_.recurrence_steps);
  put<std::int32_t>(out, config_.input_channels);
  put<std::uint64_t>(out, config_.parameter_seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Tensor& t = p.var->value;
    for (int d : {t.n, t.c, t.h, t.w}) put<std::int32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.size() * sizeof(float));
  }
  put<std::uint64_t>(out, fnv1a(out, sizeof kMagic));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing " + path);
}

Generator Generator::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(path + " is not a checkpoint file");
  Reader head(bytes, bytes.size());
  head.seek(sizeof kMagic);
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) +
                          " does not match supported version " + std::to_string(kCheckpointVersion));
  if (bytes.size() < sizeof kMagic + sizeof(std::uint64_t))
    throw CheckpointError("corrupt checkpoint: truncated");
  const std::size_t body_end = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body_end, sizeof stored);

  Reader r(bytes, body_end);
  r.seek(head.pos());
  GeneratorConfig cfg;
  cfg.depth = r.get<std::int32_t>();
  cfg.base_channels = r.get<std::int32_t>();
  cfg.recurrence_steps = r.get<std::int32_t>();
  cfg.input_channels = r.get<std::int32_t>();
  cfg.parameter_seed = r.get<std::uint64_t>();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  Generator g(cfg);
  const auto count = r.get<std::uint32_t>();
  if (count != g.params_.size())
    throw CheckpointError("corrupt checkpoint: " + std::to_string(count) + " tensors, expected " +
                          std::to_string(g.params_.size()));
  for (auto& p : g.params_) {
    const auto len = r.get<std::uint32_t>();
    if (len > 256) throw CheckpointError("corrupt checkpoint: bad tensor name length");
    const std::string name = r.get_string(len);
    if (name != p.name) throw CheckpointError("corrupt checkpoint: unexpected tensor " + name);
    Tensor& t = p.var->value;
    for (int d : {t.n, t.c, t.h, t.w})
      if (r.get<std::int32_t>() != d) throw CheckpointError("corrupt checkpoint: shape mismatch for " + name);
    r.get_floats(t.data.data(), t.size());
  }
  if (r.pos() != body_end) throw CheckpointError("corrupt checkpoint: trailing bytes");
  if (fnv1a(bytes.substr(0, body_end), sizeof kMagic) != stored)
    throw CheckpointError("corrupt checkpoint: checksum mismatch");
  return g;
}

}  // namespace cadalign
