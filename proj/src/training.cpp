#include "cadalign/training.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cadalign/inference.hpp"
#include "cadalign/rng.hpp"

namespace cadalign {

void LossWeights::validate() const {
  for (const auto& [name, v] : {std::pair{"w_mse", w_mse}, std::pair{"w_mae", w_mae},
                                std::pair{"w_missing", w_missing}, std::pair{"w_obsolete", w_obsolete},
                                std::pair{"w_smooth", w_smooth}})
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument(std::string("loss.") + name + " must be a finite value >= 0");
  if (w_mse + w_mae + w_missing + w_obsolete + w_smooth <= 0.0)
    throw std::invalid_argument("loss: at least one weight must be > 0");
  for (double s : smooth_sigmas)
    if (!(s > 0.0)) throw std::invalid_argument("loss.smooth_sigmas must be > 0");
}

namespace {

void require_same(const ProbabilityMask& a, const BinaryMask& b, const char* what) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument(std::string(what) + ": dimension mismatch " + std::to_string(a.width()) +
                                "x" + std::to_string(a.height()) + " vs " + std::to_string(b.width()) +
                                "x" + std::to_string(b.height()));
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Zero-padded separable Gaussian; symmetric, so it is its own adjoint.
ProbabilityMask gaussian_blur(const ProbabilityMask& in, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  const int w = in.width(), h = in.height();
  ProbabilityMask tmp(w, h, 0.0), out(w, h, 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int i = std::max(-radius, -c); i <= std::min(radius, w - 1 - c); ++i) s += k[i + radius] * in.at(r, c + i);
      tmp.at(r, c) = s;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int i = std::max(-radius, -r); i <= std::min(radius, h - 1 - r); ++i) s += k[i + radius] * tmp.at(r + i, c);
      out.at(r, c) = s;
    }
  return out;
}

}  // namespace

double alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w) {
  return alignment_loss(pred, gt, w, nullptr);
}

double alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w,
                      ProbabilityMask* grad) {
  require_same(pred, gt, "alignment_loss");
  const double n = static_cast<double>(pred.size());
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - (gt[i] ? 1.0 : 0.0);
    se += d * d;
    ae += std::abs(d);
    if (grad) (*grad)[i] += (2.0 * w.w_mse * d + w.w_mae * sign(d)) / n;
  }
  return w.w_mse * se / n + w.w_mae * ae / n;
}

double segmentation_loss(const ProbabilityMask& prob, const BinaryMask& gt) {
  return segmentation_loss(prob, gt, nullptr);
}

double segmentation_loss(const ProbabilityMask& prob, const BinaryMask& gt, ProbabilityMask* grad) {
  require_same(prob, gt, "segmentation_loss");
  const double n = static_cast<double>(prob.size());
  double total = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double raw = prob[i];
    const double p = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
    const bool g = gt[i] != 0;
    total += g ? -std::log(p) : -std::log(1.0 - p);
    if (grad && raw > kBceEpsilon && raw < 1.0 - kBceEpsilon)
      (*grad)[i] += (g ? -1.0 / p : 1.0 / (1.0 - p)) / n;
  }
  return total / n;
}

double smooth_alignment_loss(const ProbabilityMask& pred, const BinaryMask& gt, const LossWeights& w,
                             ProbabilityMask* grad) {
  if (w.w_smooth == 0.0 || w.smooth_sigmas.empty()) return 0.0;
  require_same(pred, gt, "smooth_alignment_loss");
  const double n = static_cast<double>(pred.size());
  const ProbabilityMask gtp = to_probability(gt);
  double total = 0.0;
  for (double sigma : w.smooth_sigmas) {
    const ProbabilityMask sp = gaussian_blur(pred, sigma);
    const ProbabilityMask sg = gaussian_blur(gtp, sigma);
    ProbabilityMask dsp(pred.width(), pred.height(), 0.0);
    for (std::size_t i = 0; i < sp.size(); ++i) {
      const double d = sp[i] - sg[i];
      total += (d * d + std::abs(d)) / n;
      dsp[i] = w.w_smooth * (2.0 * d + sign(d)) / n;
    }
    if (grad) {
      const ProbabilityMask back = gaussian_blur(dsp, sigma);
      for (std::size_t i = 0; i < back.size(); ++i) (*grad)[i] += back[i];
    }
  }
  return w.w_smooth * total;
}

std::vector<InstanceRegion> alignment_instances(const TrainingSample& sample) {
  std::vector<InstanceRegion> keep;
  for (auto& reg : all_regions(label_instances(sample.noisy_mask))) {
    int obsolete = 0;
    for (const auto& p : reg.pixels) obsolete += sample.obsolete_gt.at(p.row, p.col) != 0;
    if (2 * obsolete <= reg.pixel_count()) keep.push_back(std::move(reg));
  }
  return keep;
}

ProbabilityMask compose_from_field(const std::vector<InstanceRegion>& instances,
                                   const TransformField& field, const FieldCalibration& cal,
                                   int width, int height) {
  std::vector<InstanceWarp> warps;
  warps.reserve(instances.size());
  for (const auto& reg : instances)
    warps.push_back({MaskWindow::from_region(reg), pool_instance_transform(field, reg, cal), reg.barycenter});
  return compose_aligned_map(warps, width, height);
}

LossBreakdown total_loss(const TrainingSample& sample, const ModelOutput& output,
                         const LossWeights& weights, const FieldCalibration& cal,
                         OutputGradient* grad) {
  const int w = sample.gt_mask.width(), h = sample.gt_mask.height();
  if (output.field.width() != w || output.field.height() != h || !output.missing.same_shape(output.obsolete) ||
      output.missing.width() != w || output.missing.height() != h || sample.noisy_mask.width() != w ||
      sample.noisy_mask.height() != h)
    throw std::invalid_argument("total_loss: sample and model output dimensions differ");

  const std::vector<InstanceRegion> instances = alignment_instances(sample);
  std::vector<MaskWindow> windows;
  std::vector<RawTransform> raws;
  std::vector<SimilarityTransform> transforms;
  ProbabilityMask sum(w, h, 0.0);
  for (const auto& reg : instances) {
    windows.push_back(MaskWindow::from_region(reg));
    raws.push_back(pool_raw(output.field, reg));
    for (double v : raws.back())
      if (!std::isfinite(v)) throw TrainingError("non-finite transform field on instance " + std::to_string(reg.label));
    transforms.push_back(calibrate(raws.back(), cal));
    warp_accumulate(windows.back(), transforms.back(), reg.barycenter, sum);
  }
  ProbabilityMask composed = sum;
  for (auto& v : composed.values()) v = std::min(v, 1.0);

  LossBreakdown lb;
  ProbabilityMask dcomposed(w, h, 0.0);
  ProbabilityMask* dc = grad ? &dcomposed : nullptr;
  {
    LossWeights only_mse = weights;
    only_mse.w_mae = 0.0;
    LossWeights only_mae = weights;
    only_mae.w_mse = 0.0;
    lb.mse = alignment_loss(composed, sample.gt_mask, only_mse, dc);
    lb.mae = alignment_loss(composed, sample.gt_mask, only_mae, dc);
  }
  lb.smooth = smooth_alignment_loss(composed, sample.gt_mask, weights, dc);

  if (grad) {
    grad->field = TransformField(w, h, 0.0);
    grad->missing = ProbabilityMask(w, h, 0.0);
    grad->obsolete = ProbabilityMask(w, h, 0.0);
  }
  const double seg_m = segmentation_loss(output.missing, sample.missing_gt, grad ? &grad->missing : nullptr);
  const double seg_o = segmentation_loss(output.obsolete, sample.obsolete_gt, grad ? &grad->obsolete : nullptr);
  lb.missing = weights.w_missing * seg_m;
  lb.obsolete = weights.w_obsolete * seg_o;
  if (grad) {
    for (auto& v : grad->missing.values()) v *= weights.w_missing;
    for (auto& v : grad->obsolete.values()) v *= weights.w_obsolete;
    // Clamp passes gradient strictly below the cap.
    for (std::size_t i = 0; i < sum.size(); ++i)
      if (!(sum[i] < 1.0)) dcomposed[i] = 0.0;
    for (std::size_t k = 0; k < instances.size(); ++k) {
      const WarpGradient wg = warp_backward(windows[k], transforms[k], instances[k].barycenter, dcomposed);
      const RawTransform jac = calibrate_jacobian(raws[k], cal);
      const std::array<double, 4> phys{wg.d_tx, wg.d_ty, wg.d_theta, wg.d_scale};
      const double inv_n = 1.0 / instances[k].pixel_count();
      for (int ch = 0; ch < 4; ++ch) {
        const double d = phys[ch] * jac[ch] * inv_n;
        if (d == 0.0) continue;
        for (const auto& p : instances[k].pixels) grad->field.at(ch, p.row, p.col) += d;
      }
    }
  }
  lb.total = lb.mse + lb.mae + lb.smooth + lb.missing + lb.obsolete;
  return lb;
}

TransformField field_from_record(const TrainingSample& sample, const FieldCalibration& cal) {
  const int w = sample.gt_mask.width(), h = sample.gt_mask.height();
  TransformField field(w, h, 0.0);
  const InstanceMap gt_map = label_instances(sample.gt_mask);
  // Corrupted footprint of each surviving GT instance, to match against
  // the noisy components.
  std::vector<std::pair<int, BinaryMask>> corrupted;
  for (const auto& [label, t] : sample.record.per_instance)
    corrupted.emplace_back(label, corrupted_instance(instance_mask(gt_map, label), label, sample.record));
  for (const auto& reg : alignment_instances(sample)) {
    int best = -1;
    int best_overlap = 0;
    for (const auto& [label, m] : corrupted) {
      int overlap = 0;
      for (const auto& p : reg.pixels) overlap += m.at(p.row, p.col) != 0;
      if (overlap > best_overlap) best_overlap = overlap, best = label;
    }
    if (best < 0) continue;
    RawTransform raw = decalibrate(sample.record.correction_for(best, reg.barycenter), cal);
    for (auto& v : raw) v = std::clamp(v, -1.0, 1.0);
    for (const auto& p : reg.pixels)
      for (int ch = 0; ch < 4; ++ch) field.at(ch, p.row, p.col) = raw[ch];
  }
  return field;
}

Adam::Adam(std::vector<NamedParameter> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.var->value.size(), 0.0f);
    v_.emplace_back(p.var->value.size(), 0.0f);
  }
}

void Adam::step(double grad_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const float step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
  const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const float eps = static_cast<float>(eps_ * std::sqrt(c2));
  const float gs = static_cast<float>(grad_scale);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Node& node = *params_[k].var;
    if (node.grad.size() != node.value.size()) continue;
    float* w = node.value.data.data();
    const float* g = node.grad.data.data();
    float* m = m_[k].data();
    float* v = v_[k].data();
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      const float gi = g[i] * gs;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      w[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
    }
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be > 0");
  generator.validate();
  if (patch_size < 1 || patch_size % generator.size_multiple() != 0)
    throw std::invalid_argument("train.patch_size " + std::to_string(patch_size) + " must be a multiple of " +
                                std::to_string(generator.size_multiple()));
  if (max_iterations < 0) throw std::invalid_argument("train.max_iterations must be >= 0");
  if (!(max_cpu_seconds >= 0.0)) throw std::invalid_argument("train.max_cpu_seconds must be >= 0");
  if (disp_ramp_iterations < 0) throw std::invalid_argument("train.disp_ramp_iterations must be >= 0");
  corruption.validate();
  weights.validate();
  calibration.validate();
}

LossBreakdown train_step(Generator& model, const TrainingSample& sample, const LossWeights& weights,
                         const FieldCalibration& cal) {
  nn::Graph graph(true);
  const nn::Var heads = model.forward(graph, nn::make_var(make_input(sample.image, sample.noisy_mask)));
  const ModelOutput out = split_heads(heads->value);
  OutputGradient grad;
  const LossBreakdown lb = total_loss(sample, out, weights, cal, &grad);
  for (const auto& [name, v] : {std::pair{"loss_mse", lb.mse}, std::pair{"loss_mae", lb.mae},
                                std::pair{"loss_smooth", lb.smooth}, std::pair{"loss_missing", lb.missing},
                                std::pair{"loss_obsolete", lb.obsolete}})
    if (!std::isfinite(v)) throw TrainingError(std::string("non-finite ") + name + " (" + std::to_string(v) + ")");
  nn::Tensor seed(1, Generator::kOutputChannels, heads->value.h, heads->value.w);
  const std::size_t plane = seed.plane();
  for (std::size_t i = 0; i < 4 * plane; ++i) seed.data[i] = static_cast<float>(grad.field.values()[i]);
  for (std::size_t i = 0; i < plane; ++i) {
    seed.data[4 * plane + i] = static_cast<float>(grad.missing[i]);
    seed.data[5 * plane + i] = static_cast<float>(grad.obsolete[i]);
  }
  graph.backward(heads, seed);
  return lb;
}

ValidationResult validate_model(const RepairModel& model, const std::vector<LabeledTile>& tiles,
                                const CorruptionSpec& spec, const FieldCalibration& cal) {
  ValidationResult r;
  if (tiles.empty()) return r;
  RepairThresholds thresholds;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    const TrainingSample sample = corrupt(tiles[i].image, tiles[i].gt, s);
    const ModelOutput out = model.predict(sample.image, sample.noisy_mask);
    const RepairResult rep = repair_from_output(sample.noisy_mask, out, thresholds, cal);
    r.iou_corrupted += iou(sample.noisy_mask, sample.gt_mask);
    r.iou_corrected += iou(rep.aligned_map, sample.gt_mask);
    r.acc_missing += pixel_accuracy(to_binary(out.missing, thresholds.tau_miss), sample.missing_gt);
    r.acc_obsolete += pixel_accuracy(to_binary(out.obsolete, 0.5), sample.obsolete_gt);
  }
  const double n = static_cast<double>(tiles.size());
  r.iou_corrupted /= n;
  r.iou_corrected /= n;
  r.acc_missing /= n;
  r.acc_obsolete /= n;
  return r;
}

std::string metrics_json_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss_total"] = m.loss.total;
  j["loss_mse"] = m.loss.mse;
  j["loss_mae"] = m.loss.mae;
  j["loss_missing"] = m.loss.missing;
  j["loss_obsolete"] = m.loss.obsolete;
  j["loss_smooth"] = m.loss.smooth;
  j["val_iou_corrupted"] = m.val_iou_corrupted;
  j["val_iou_corrected"] = m.val_iou_corrected;
  j["val_acc_missing"] = m.val_acc_missing;
  j["val_acc_obsolete"] = m.val_acc_obsolete;
  return j.dump();
}

std::uint64_t training_corruption_seed(std::uint64_t seed, int epoch, std::size_t index) {
  return derive_seed(seed, static_cast<std::uint64_t>(epoch), index);
}

namespace {

LabeledTile crop_tile(const LabeledTile& t, int size, Rng& rng) {
  if (t.gt.width() < size || t.gt.height() < size)
    throw std::invalid_argument("training tile " + std::to_string(t.gt.width()) + "x" +
                                std::to_string(t.gt.height()) + " is smaller than patch_size " +
                                std::to_string(size));
  if (t.gt.width() == size && t.gt.height() == size) return t;
  const int r0 = rng.uniform_int(0, t.gt.height() - size);
  const int c0 = rng.uniform_int(0, t.gt.width() - size);
  LabeledTile out{t.image.crop(r0, c0, size, size), BinaryMask(size, size)};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) out.gt.at(r, c) = t.gt.at(r0 + r, c0 + c);
  return out;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

}  // namespace

FitResult fit(const std::vector<LabeledTile>& train, const std::vector<LabeledTile>& val,
              const TrainConfig& config, const ProgressFn& progress) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  namespace fs = std::filesystem;
  fs::create_directories(config.checkpoint_dir);
  FitResult result;
  result.metrics_path = (fs::path(config.checkpoint_dir) / "metrics.jsonl").string();
  result.best_checkpoint = (fs::path(config.checkpoint_dir) / "best.ckpt").string();
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + result.metrics_path);

  Generator model(config.generator);
  Adam opt(model.parameters(), config.learning_rate);
  Rng order_rng(derive_seed(config.seed, 0x0dde5));
  CorruptionSpec val_spec = config.corruption;
  val_spec.seed = derive_seed(config.seed, 0x7a1);

  const double t0 = cpu_seconds();
  double best = -1.0;
  long iteration = 0;
  bool stop = false;
  for (int epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<int>(i - 1)))]);

    LossBreakdown sum;
    int seen = 0, pending = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t idx = order[k];
      const LabeledTile tile = crop_tile(train[idx], config.patch_size, order_rng);
      CorruptionSpec spec = config.corruption;
      spec.seed = training_corruption_seed(config.seed, epoch, idx);
      if (config.disp_ramp_iterations > 0 && iteration < config.disp_ramp_iterations) {
        const double f = static_cast<double>(iteration) / config.disp_ramp_iterations;
        spec.max_disp = std::min(config.corruption.max_disp,
                                 config.ramp_start_disp + f * (config.corruption.max_disp - config.ramp_start_disp));
      }
      const TrainingSample sample = corrupt(tile.image, tile.gt, spec);
      LossBreakdown lb;
      try {
        lb = train_step(model, sample, config.weights, config.calibration);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", sample " +
                            std::to_string(idx));
      }
      sum.total += lb.total, sum.mse += lb.mse, sum.mae += lb.mae, sum.smooth += lb.smooth;
      sum.missing += lb.missing, sum.obsolete += lb.obsolete;
      ++seen;
      ++iteration;
      const bool budget_hit = (config.max_iterations > 0 && iteration >= config.max_iterations) ||
                              (config.max_cpu_seconds > 0.0 && cpu_seconds() - t0 >= config.max_cpu_seconds);
      if (++pending == config.batch_size || k + 1 == order.size() || budget_hit) {
        opt.step(1.0 / pending);
        model.zero_grad();
        pending = 0;
      }
      if (budget_hit) {
        stop = true;
        break;
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss.total = sum.total / seen, m.loss.mse = sum.mse / seen, m.loss.mae = sum.mae / seen;
    m.loss.smooth = sum.smooth / seen, m.loss.missing = sum.missing / seen, m.loss.obsolete = sum.obsolete / seen;
    const ValidationResult v = validate_model(model, val, val_spec, config.calibration);
    m.val_iou_corrupted = v.iou_corrupted;
    m.val_iou_corrected = v.iou_corrected;
    m.val_acc_missing = v.acc_missing;
    m.val_acc_obsolete = v.acc_obsolete;
    metrics << metrics_json_line(m) << '\n' << std::flush;
    result.history.push_back(m);
    if (m.val_iou_corrected > best) {
      best = m.val_iou_corrected;
      model.save(result.best_checkpoint);
    }
    if (progress) progress(m, iteration, cpu_seconds() - t0);
  }
  model.save((fs::path(config.checkpoint_dir) / "last.ckpt").string());
  result.iterations = iteration;
  result.cpu_seconds = cpu_seconds() - t0;
  return result;
}

}  // namespace cadalign
