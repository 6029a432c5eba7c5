#include "config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

namespace cadalign::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty())
    throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

constexpr double kDeg = std::numbers::pi / 180.0;

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

#define NUMERIC(expr, type)                                                             \
  [](RunConfig& c, const std::string& k, const std::string& v) { (expr) = parse_number<type>(k, v); }

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", NUMERIC(c.seed, std::uint64_t)},
      {"workers", NUMERIC(c.workers, int)},

      {"data.source", [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "shapes" && v != "inria") throw ConfigError(k + ": expected shapes or inria, got '" + v + "'");
         c.data.source = v;
       }},
      {"data.root", [](RunConfig& c, const std::string&, const std::string& v) { c.data.root = v; }},
      {"data.samples", NUMERIC(c.data.samples, int)},
      {"data.val_samples", NUMERIC(c.data.val_samples, int)},
      {"data.size", NUMERIC(c.data.size, int)},
      {"data.val_tiles", [](RunConfig& c, const std::string&, const std::string& v) {
         const auto items = split_list(v);
         c.data.val_tiles = {items.begin(), items.end()};
       }},
      {"data.test_tiles", [](RunConfig& c, const std::string&, const std::string& v) {
         const auto items = split_list(v);
         c.data.test_tiles = {items.begin(), items.end()};
       }},

      {"corruption.max_disp", NUMERIC(c.corruption.max_disp, double)},
      {"corruption.max_rot_deg", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.corruption.max_rot = parse_number<double>(k, v) * kDeg;
       }},
      {"corruption.scale_lo", NUMERIC(c.corruption.scale_lo, double)},
      {"corruption.scale_hi", NUMERIC(c.corruption.scale_hi, double)},
      {"corruption.p_remove", NUMERIC(c.corruption.p_remove, double)},
      {"corruption.p_inject", NUMERIC(c.corruption.p_inject, double)},
      {"corruption.global_max_disp", NUMERIC(c.corruption.global_max_disp, double)},
      {"corruption.global_max_rot_deg", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.corruption.global_max_rot = parse_number<double>(k, v) * kDeg;
       }},
      {"corruption.inject_region", NUMERIC(c.corruption.inject_region, int)},
      {"corruption.inject_min_side", NUMERIC(c.corruption.inject_min_side, int)},
      {"corruption.inject_max_side", NUMERIC(c.corruption.inject_max_side, int)},

      {"model.depth", NUMERIC(c.training.generator.depth, int)},
      {"model.base_channels", NUMERIC(c.training.generator.base_channels, int)},
      {"model.recurrence_steps", NUMERIC(c.training.generator.recurrence_steps, int)},

      {"training.epochs", NUMERIC(c.training.epochs, int)},
      {"training.batch_size", NUMERIC(c.training.batch_size, int)},
      {"training.learning_rate", NUMERIC(c.training.learning_rate, double)},
      {"training.patch_size", NUMERIC(c.training.patch_size, int)},
      {"training.w_mse", NUMERIC(c.training.weights.w_mse, double)},
      {"training.w_mae", NUMERIC(c.training.weights.w_mae, double)},
      {"training.w_missing", NUMERIC(c.training.weights.w_missing, double)},
      {"training.w_obsolete", NUMERIC(c.training.weights.w_obsolete, double)},
      {"training.w_smooth", NUMERIC(c.training.weights.w_smooth, double)},
      {"training.smooth_sigmas", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.training.weights.smooth_sigmas.clear();
         for (const auto& item : split_list(v)) c.training.weights.smooth_sigmas.push_back(parse_number<double>(k, item));
       }},
      {"training.max_iterations", NUMERIC(c.training.max_iterations, long)},
      {"training.max_cpu_minutes", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.training.max_cpu_seconds = parse_number<double>(k, v) * 60.0;
       }},
      {"training.disp_ramp_iterations", NUMERIC(c.training.disp_ramp_iterations, long)},
      {"training.ramp_start_disp", NUMERIC(c.training.ramp_start_disp, double)},
      {"training.checkpoint_dir", [](RunConfig& c, const std::string&, const std::string& v) {
         c.training.checkpoint_dir = v;
       }},
      {"training.max_translation", NUMERIC(c.training.calibration.max_translation, double)},
      {"training.max_rotation_deg", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.training.calibration.max_rotation = parse_number<double>(k, v) * kDeg;
       }},
      {"training.max_scale", [](RunConfig& c, const std::string& k, const std::string& v) {
         const double s = parse_number<double>(k, v);
         if (!(s > 1.0)) throw ConfigError(k + " must be > 1");
         c.training.calibration.max_log_scale = std::log(s);
       }},

      {"inference.tau_obs", NUMERIC(c.inference.thresholds.tau_obs, double)},
      {"inference.tau_miss", NUMERIC(c.inference.thresholds.tau_miss, double)},
      {"inference.min_area", NUMERIC(c.inference.thresholds.min_area, int)},
      {"inference.regularize_tolerance", NUMERIC(c.inference.thresholds.regularize_tolerance, double)},
      {"inference.orthogonalize", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.inference.thresholds.orthogonalize = parse_bool(k, v);
       }},
      {"inference.patch_size", NUMERIC(c.inference.patch_size, int)},
      {"inference.border", NUMERIC(c.inference.border, int)},

      {"eval.mode", [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.eval.mode = parse_eval_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(k + ": " + e.what());
         }
       }},
      {"eval.displacements", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.eval.displacements.clear();
         for (const auto& item : split_list(v)) c.eval.displacements.push_back(parse_number<double>(k, item));
       }},
      {"eval.trials", NUMERIC(c.eval.trials, int)},
  };
  return table;
}

#undef NUMERIC

}  // namespace

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  const auto& table = setters();
  const auto it = table.find(dotted_key);
  if (it == table.end()) throw ConfigError("unknown key '" + dotted_key + "'");
  it->second(config, dotted_key, value);
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    line = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    try {
      set_config_value(config, section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str(), path);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = training;
  t.corruption = corruption;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(workers >= 1, "workers must be >= 1");
  check(data.samples >= 1, "data.samples must be >= 1");
  check(data.val_samples >= 1, "data.val_samples must be >= 1");
  check(data.source != "inria" || !data.root.empty(), "data.root is required when data.source = inria");
  const auto& th = inference.thresholds;
  check(th.tau_obs >= 0.0 && th.tau_obs <= 1.0, "inference.tau_obs must be in [0, 1]");
  check(th.tau_miss >= 0.0 && th.tau_miss <= 1.0, "inference.tau_miss must be in [0, 1]");
  check(th.min_area >= 0, "inference.min_area must be >= 0");
  check(th.regularize_tolerance >= 0.0, "inference.regularize_tolerance must be >= 0");
  check(inference.border >= 0 && inference.patch_size > 2 * inference.border,
        "inference.patch_size must exceed 2 * inference.border");
  check(!eval.displacements.empty(), "eval.displacements must not be empty");
  for (double d : eval.displacements) check(d >= 0.0, "eval.displacements must be >= 0");
  check(eval.trials >= 1, "eval.trials must be >= 1");
  try {
    corruption.validate();
    train_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace cadalign::cli
