#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rgbt/checkpoint.hpp"
#include "rgbt/dataset.hpp"
#include "rgbt/fusion.hpp"
#include "rgbt/mcf.hpp"
#include "rgbt/metrics.hpp"
#include "rgbt/optim.hpp"

namespace rgbt {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 16;
  int img_size = 640;
  uint64_t seed = 0;
  LossWeights weights;
  std::string preset = "sgd-init";
  int64_t max_iters = -1;  // optional hard cap on optimization steps; -1 = none
  bool augment_flip = false;
  double conf_eval = 0.001;
  double nms_iou = 0.60;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (img_size % 32 != 0) throw std::invalid_argument("img_size must be divisible by 32");
  }
};

// Uniform access to the trainable graph variants (plain/fused detector, MCF).
struct ModelHandle {
  Module* module = nullptr;
  ModelSpec spec;
  bool needs_ir = false;
  std::function<ForwardResult(const Var&, const Var&)> forward;
  CheckpointManifest manifest;
};

inline ModelHandle make_handle(FusedDetector& model) {
  ModelHandle h;
  h.module = &model;
  h.spec = model.spec();
  h.needs_ir = model.spec().fusion != FusionMode::Single;
  h.forward = [&model](const Var& rgb, const Var& ir) { return model.forward(rgb, ir); };
  h.manifest.fusion_mode = fusion_mode_name(model.spec().fusion);
  h.manifest.scale = std::string(1, model.spec().scale);
  h.manifest.num_classes = model.spec().num_classes;
  h.manifest.in_channels = model.spec().in_channels;
  h.manifest.ir_channels = model.spec().ir_channels;
  return h;
}

inline ModelHandle make_handle(McfModel& model, int aux_channels) {
  ModelHandle h;
  h.module = &model;
  h.spec = model.spec();
  h.needs_ir = true;
  h.forward = [&model](const Var& rgb, const Var& ir) { return model.forward(rgb, ir); };
  h.manifest.fusion_mode = "mcf";
  h.manifest.scale = std::string(1, model.spec().scale);
  h.manifest.num_classes = model.spec().num_classes;
  h.manifest.in_channels = model.spec().in_channels;
  h.manifest.ir_channels = aux_channels;
  return h;
}

namespace detail {

inline Tensor stack_images(const std::vector<const Image*>& imgs) {
  int c = imgs[0]->c, h = imgs[0]->h, w = imgs[0]->w;
  Tensor t({static_cast<int>(imgs.size()), c, h, w});
  for (size_t n = 0; n < imgs.size(); ++n) {
    if (imgs[n]->c != c || imgs[n]->h != h || imgs[n]->w != w)
      throw std::invalid_argument("batch images must share one shape");
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at4(static_cast<int>(n), ch, y, x) = imgs[n]->at(x, y, ch) / 255.0;
  }
  return t;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

}  // namespace detail

// Dataset-level evaluation: decode each image at the eval confidence, run NMS
// (Score mode merges the two detector outputs), compare against ground truth.
inline MetricsReport validate(const ModelHandle& model, const std::vector<PairedSample>& samples,
                              const TrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("validate: empty dataset");
  model.module->set_training(false);
  std::vector<TaggedDetection> dets;
  std::vector<std::vector<PixelBox>> gts;
  for (size_t i = 0; i < samples.size(); ++i) {
    const PairedSample& s = samples[i];
    Var primary = make_var(image_to_tensor(s.rgb.w ? s.rgb : s.ir));
    Var ir = (s.rgb.w && s.ir.w) ? make_var(image_to_tensor(s.ir)) : nullptr;
    ForwardResult r = model.forward(primary, ir);
    std::vector<Detection> d;
    if (!r.heads_secondary.empty()) {
      auto d1 = nms(decode(r.heads, model.spec.reg_max, cfg.conf_eval), cfg.nms_iou);
      auto d2 = nms(decode(r.heads_secondary, model.spec.reg_max, cfg.conf_eval), cfg.nms_iou);
      d = merge_scores(d1, d2, 0.65, cfg.nms_iou);
    } else {
      d = nms(decode(r.heads, model.spec.reg_max, cfg.conf_eval), cfg.nms_iou);
    }
    for (const auto& det : d) dets.push_back({static_cast<int>(i), det});
    gts.push_back(boxes_to_pixels(s.boxes, s.rgb.w ? s.rgb.w : s.ir.w));
  }
  return evaluate_detections(dets, gts, model.spec.num_classes);
}

struct TrainResult {
  std::vector<double> losses;  // total loss per iteration
  std::string log;             // deterministic text log
  Checkpoint last, best;
  double best_map50 = -1.0;
  int64_t iterations = 0;
};

// Deterministic training loop: seeded shuffling, linear warmup + decay
// schedule, per-iteration loss lines and per-epoch metric lines in the log,
// best/last checkpoints captured in memory.
inline TrainResult train(const ModelHandle& model, const std::vector<PairedSample>& train_set,
                         const std::vector<PairedSample>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& s : train_set) {
    const Image& im = s.rgb.w ? s.rgb : s.ir;
    if (im.w != cfg.img_size || im.h != cfg.img_size)
      throw std::invalid_argument("train: sample '" + s.image_id + "' is not letterboxed to " +
                                  std::to_string(cfg.img_size));
  }

  OptimizerPreset preset = optimizer_preset(cfg.preset);
  auto params = trainable_params(*model.module);
  auto opt = make_optimizer(params, preset);

  int64_t iters_per_epoch =
      (static_cast<int64_t>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_iters = iters_per_epoch * cfg.epochs;
  int64_t warmup_iters = std::max<int64_t>(1, static_cast<int64_t>(std::lround(preset.warmup_epochs * static_cast<double>(iters_per_epoch))));

  TrainResult result;
  std::ostringstream log;
  Rng shuffle_rng(cfg.seed);
  int64_t iter = 0;
  AugmentConfig aug;
  aug.flip_prob = cfg.augment_flip ? 0.5 : 0.0;

  auto snapshot = [&]() { return checkpoint_from_model(*model.module, model.manifest); };
  result.best = snapshot();  // 0-step fallback

  for (int epoch = 0; epoch < cfg.epochs && (cfg.max_iters < 0 || iter < cfg.max_iters); ++epoch) {
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng erng = shuffle_rng.fork(static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(erng.uniform_int(0, static_cast<int>(i) - 1))]);

    model.module->set_training(true);
    for (size_t b0 = 0; b0 < order.size() && (cfg.max_iters < 0 || iter < cfg.max_iters);
         b0 += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const Image*> rgbs, irs;
      std::vector<std::vector<PixelBox>> gts;
      std::vector<PairedSample> augmented;  // keeps storage alive for the batch
      for (size_t k = b0; k < std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size)); ++k) {
        const PairedSample* s = &train_set[order[k]];
        if (cfg.augment_flip) {
          augmented.push_back(augment(*s, aug, cfg.seed ^ (static_cast<uint64_t>(iter) << 20) ^ order[k]));
          s = &augmented.back();
        }
        if (s->rgb.w) rgbs.push_back(&s->rgb);
        if (s->ir.w) irs.push_back(&s->ir);
        gts.push_back(boxes_to_pixels(s->boxes, cfg.img_size));
      }
      Var rgb = make_var(detail::stack_images(rgbs.empty() ? irs : rgbs));
      Var ir = (!irs.empty() && !rgbs.empty()) ? make_var(detail::stack_images(irs)) : nullptr;
      if (model.needs_ir && !ir)
        throw std::invalid_argument("train: fused model requires both modalities in the dataset");

      ForwardResult r = model.forward(rgb, ir);
      LossOutput loss = compute_detection_loss(r.heads, gts, model.spec, cfg.weights);
      if (!std::isfinite(loss.dfl)) throw std::runtime_error("non-finite loss component: dfl");
      if (!std::isfinite(loss.cls)) throw std::runtime_error("non-finite loss component: cls");
      if (!std::isfinite(loss.loc)) throw std::runtime_error("non-finite loss component: loc");

      ScheduleState sch = schedule_at(iter, warmup_iters, total_iters, preset);
      opt->zero_grad();
      backward(loss.total);
      opt->step(sch);

      log << "iter " << iter << " lr " << detail::fmt(sch.lr_weights) << " momentum "
          << detail::fmt(sch.momentum) << " dfl " << detail::fmt(loss.dfl) << " cls "
          << detail::fmt(loss.cls) << " loc " << detail::fmt(loss.loc) << " all "
          << detail::fmt(loss.all) << "\n";
      result.losses.push_back(loss.all);
      ++iter;
    }

    if (!val_set.empty()) {
      MetricsReport rep = validate(model, val_set, cfg);
      log << "epoch " << epoch << " map50 " << detail::fmt(rep.map50) << " map "
          << detail::fmt(rep.map) << "\n";
      if (rep.map50 > result.best_map50) {
        result.best_map50 = rep.map50;
        result.best = snapshot();
      }
    }
  }

  model.module->set_training(false);
  result.last = snapshot();
  if (result.best_map50 < 0) result.best = result.last;
  result.iterations = iter;
  result.log = log.str();
  return result;
}

}  // namespace rgbt
