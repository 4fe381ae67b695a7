#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "rgbt/config.hpp"
#include "rgbt/trainer.hpp"
#include "rgbt/transfer.hpp"

namespace fs = std::filesystem;
using namespace rgbt;

namespace {

struct CliError : std::runtime_error {
  std::string category;
  CliError(std::string cat, const std::string& msg) : std::runtime_error(msg), category(std::move(cat)) {}
};

std::string classify(const std::string& msg) {
  if (msg.rfind("config error", 0) == 0 || msg.find("unknown fusion mode") != std::string::npos ||
      msg.find("must be") != std::string::npos)
    return "config";
  if (msg.find("checkpoint") != std::string::npos) return "checkpoint";
  if (msg.find("label parse") != std::string::npos || msg.find("dataset") != std::string::npos ||
      msg.find("image") != std::string::npos || msg.find("png") != std::string::npos)
    return "data";
  return "internal";
}

RunConfig effective_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig{};
  return load_run_config(config_path);
}

void apply_manifest(RunConfig& cfg) {
  if (!cfg.manifest.empty()) {
    DatasetManifest m = load_dataset_manifest(cfg.manifest);
    cfg.num_classes = m.num_classes;
  }
}

ModalityPolicy policy_for(const RunConfig& cfg) {
  if (fusion_mode_from_name(cfg.fusion) != FusionMode::Single) return ModalityPolicy::Both;
  return cfg.primary == "ir" ? ModalityPolicy::Ir : ModalityPolicy::Rgb;
}

std::vector<PairedSample> load_split(const RunConfig& cfg, const std::string& split) {
  if (cfg.dataset_root.empty()) throw CliError("config", "config error: dataset_root is required");
  auto [samples, report] = load_paired_dataset(cfg.dataset_root, split, policy_for(cfg));
  for (const auto& s : report.excluded)
    std::cerr << "warning: excluded unpaired stem '" << s << "'\n";
  AlignmentReport align = verify_alignment(samples);
  for (const auto& v : align.violations) std::cerr << "warning: misaligned pair " << v << "\n";
  std::vector<PairedSample> boxed;
  for (const auto& s : samples) boxed.push_back(letterbox(s, cfg.img_size).first);
  return boxed;
}

void ensure_out(const RunConfig& cfg) { fs::create_directories(cfg.out_dir); }

std::unique_ptr<FusedDetector> model_from_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg) {
  ModelSpec spec;
  spec.scale = ckpt.manifest.scale.empty() ? 'n' : ckpt.manifest.scale[0];
  spec.num_classes = ckpt.manifest.num_classes;
  spec.in_channels = ckpt.manifest.in_channels;
  spec.ir_channels = ckpt.manifest.ir_channels;
  spec.fusion = fusion_mode_from_name(ckpt.manifest.fusion_mode);
  auto model = std::make_unique<FusedDetector>(spec, cfg.seed);
  load_checkpoint_into(*model, ckpt);
  return model;
}

void write_metrics_report(const std::string& path, const MetricsReport& rep) {
  std::ofstream os(path);
  os.precision(12);
  os << "available " << (rep.available ? 1 : 0) << "\n";
  os << "map50 " << rep.map50 << "\nmap " << rep.map << "\n";
  for (const auto& c : rep.per_class) {
    os << "class " << c.class_id << " has_gt " << (c.has_gt ? 1 : 0) << " precision " << c.precision
       << " recall " << c.recall << " ap50 " << c.ap50 << " ap " << c.ap << "\n";
  }
}

std::vector<Detection> run_inference(FusedDetector& model, const PairedSample& s, double conf,
                                     double iou) {
  if (conf >= 1.0) return {};  // nothing can clear the bar; valid boundary request
  model.set_training(false);
  Var primary = make_var(image_to_tensor(s.rgb.w ? s.rgb : s.ir));
  Var ir = (s.rgb.w && s.ir.w) ? make_var(image_to_tensor(s.ir)) : nullptr;
  ForwardResult r = model.forward(primary, ir);
  if (!r.heads_secondary.empty()) {
    auto d1 = nms(decode(r.heads, model.spec().reg_max, conf), iou);
    auto d2 = nms(decode(r.heads_secondary, model.spec().reg_max, conf), iou);
    return merge_scores(d1, d2, 0.65, iou);
  }
  return nms(decode(r.heads, model.spec().reg_max, conf), iou);
}

int cmd_info(const RunConfig& cfg) {
  FusedDetector model(cfg.model_spec(), cfg.seed);
  std::cout << "fusion " << cfg.fusion << "\nscale " << cfg.scale << "\nparameters "
            << model.parameter_count() << "\n";
  for (const auto& row : model.junction_table()) std::cout << "junction " << row << "\n";
  return 0;
}

int cmd_train(RunConfig cfg) {
  apply_manifest(cfg);
  ensure_out(cfg);
  auto train_set = load_split(cfg, "train");
  std::vector<PairedSample> val_set;
  try {
    val_set = load_split(cfg, "val");
  } catch (const std::exception&) {
    val_set = train_set;  // no val split: monitor the training set
  }
  FusedDetector model(cfg.model_spec(), cfg.seed);
  ModelHandle h = make_handle(model);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.img_size = cfg.img_size;
  tc.seed = cfg.seed;
  tc.weights = cfg.loss_weights();
  tc.preset = cfg.preset;
  tc.max_iters = cfg.max_iters;
  tc.augment_flip = cfg.augment_flip;
  TrainResult r = train(h, train_set, val_set, tc);
  save_checkpoint((fs::path(cfg.out_dir) / "last.ckpt").string(), r.last);
  save_checkpoint((fs::path(cfg.out_dir) / "best.ckpt").string(), r.best);
  std::ofstream((fs::path(cfg.out_dir) / "train.log")) << r.log;
  save_run_config((fs::path(cfg.out_dir) / "config.json").string(), cfg);
  std::cout << "iterations " << r.iterations << "\nbest_map50 " << r.best_map50 << "\n";
  return 0;
}

int cmd_val(RunConfig cfg, const std::string& weights) {
  apply_manifest(cfg);
  ensure_out(cfg);
  Checkpoint ckpt = load_checkpoint(weights);
  auto model = model_from_checkpoint(ckpt, cfg);
  cfg.fusion = ckpt.manifest.fusion_mode;
  auto val_set = load_split(cfg, "val");
  ModelHandle h = make_handle(*model);
  TrainConfig tc;
  tc.img_size = cfg.img_size;
  tc.nms_iou = cfg.iou;
  MetricsReport rep = validate(h, val_set, tc);
  write_metrics_report((fs::path(cfg.out_dir) / "metrics.txt").string(), rep);
  std::cout << "map50 " << rep.map50 << "\nmap " << rep.map << "\n";
  return 0;
}

int cmd_predict(RunConfig cfg, const std::string& weights) {
  apply_manifest(cfg);
  ensure_out(cfg);
  Checkpoint ckpt = load_checkpoint(weights);
  auto model = model_from_checkpoint(ckpt, cfg);
  cfg.fusion = ckpt.manifest.fusion_mode;
  auto samples = load_split(cfg, "val");
  for (const auto& s : samples) {
    auto dets = run_inference(*model, s, cfg.conf, cfg.iou);
    std::ofstream os((fs::path(cfg.out_dir) / (s.image_id + ".txt")));
    os.precision(9);
    Image annotated = to_rgb(s.rgb.w ? s.rgb : s.ir);
    for (const auto& d : dets) {
      os << d.class_id << " " << d.score << " " << d.x1 << " " << d.y1 << " " << d.x2 << " "
         << d.y2 << "\n";
      draw_rect(annotated, static_cast<int>(std::lround(d.x1)), static_cast<int>(std::lround(d.y1)),
                static_cast<int>(std::lround(d.x2)), static_cast<int>(std::lround(d.y2)), 255, 40, 40);
    }
    save_png((fs::path(cfg.out_dir) / (s.image_id + "_pred.png")).string(), annotated);
  }
  std::cout << "predicted " << samples.size() << " images\n";
  return 0;
}

int cmd_finetune_mcf(RunConfig cfg, const std::string& weights) {
  apply_manifest(cfg);
  ensure_out(cfg);
  Checkpoint base_ckpt = load_checkpoint(weights);
  if (base_ckpt.manifest.fusion_mode != "single")
    throw CliError("checkpoint", "finetune-mcf requires a single-modality base checkpoint, got '" +
                                     base_ckpt.manifest.fusion_mode + "'");
  RunConfig base_cfg = cfg;
  base_cfg.fusion = "single";
  auto base = std::shared_ptr<FusedDetector>(model_from_checkpoint(base_ckpt, base_cfg).release());
  int aux_channels = cfg.primary == "ir" ? cfg.in_channels : cfg.ir_channels;
  McfModel mcf(base, aux_channels, cfg.seed);

  FreezeReport frep = mcf.freeze_report();
  {
    std::ofstream os(fs::path(cfg.out_dir) / "freeze_report.txt");
    os << "frozen_tensors " << frep.frozen_names.size() << " frozen_scalars " << frep.frozen_count
       << "\ntrainable_tensors " << frep.trainable_names.size() << " trainable_scalars "
       << frep.trainable_count << "\n";
    for (const auto& n : frep.frozen_names) os << "frozen " << n << "\n";
    for (const auto& n : frep.trainable_names) os << "trainable " << n << "\n";
  }

  cfg.fusion = "mid";  // the graft consumes both modalities
  auto train_set = load_split(cfg, "train");
  ModelHandle h = make_handle(mcf, aux_channels);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.img_size = cfg.img_size;
  tc.seed = cfg.seed;
  tc.weights = cfg.loss_weights();
  tc.preset = cfg.preset;
  tc.max_iters = cfg.max_iters;
  TrainResult r = train(h, train_set, {}, tc);
  save_checkpoint((fs::path(cfg.out_dir) / "mcf.ckpt").string(), r.last);
  std::ofstream((fs::path(cfg.out_dir) / "train.log")) << r.log;
  std::cout << "iterations " << r.iterations << "\ntrainable_scalars " << frep.trainable_count
            << "\n";
  return 0;
}

int cmd_transfer(RunConfig cfg, const std::string& weights, const std::string& strategy,
                 const std::string& out_path) {
  Checkpoint src = load_checkpoint(weights);
  cfg.num_classes = src.manifest.num_classes;  // head widths must line up with the source
  cfg.in_channels = src.manifest.in_channels;
  ModelSpec target = cfg.model_spec();
  auto [out, rep] = transfer_checkpoint(src, target, channel_adapt_from_name(strategy), cfg.seed);
  save_checkpoint(out_path, out);
  std::ofstream os(out_path + ".report.txt");
  auto dump = [&](const char* tag, const std::vector<std::string>& names) {
    for (const auto& n : names) os << tag << " " << n << "\n";
  };
  dump("copied", rep.copied);
  dump("channel_adapted", rep.channel_adapted);
  dump("duplicated", rep.duplicated);
  dump("unmatched", rep.unmatched);
  std::cout << "copied " << rep.copied.size() << "\nchannel_adapted " << rep.channel_adapted.size()
            << "\nduplicated " << rep.duplicated.size() << "\nunmatched " << rep.unmatched.size()
            << "\n";
  return 0;
}

int cmd_features(RunConfig cfg, const std::string& weights, const std::string& stage) {
  apply_manifest(cfg);
  ensure_out(cfg);
  Checkpoint ckpt = load_checkpoint(weights);
  auto model = model_from_checkpoint(ckpt, cfg);
  cfg.fusion = ckpt.manifest.fusion_mode;
  auto samples = load_split(cfg, "val");
  model->set_training(false);
  for (const auto& s : samples) {
    Var primary = make_var(image_to_tensor(s.rgb.w ? s.rgb : s.ir));
    Var ir = (s.rgb.w && s.ir.w) ? make_var(image_to_tensor(s.ir)) : nullptr;
    ForwardResult r = model->forward(primary, ir);
    const Tensor* feat = nullptr;
    if (stage == "P2") feat = &r.pyramid.p2;
    else if (stage == "P3") feat = &r.pyramid.p3;
    else if (stage == "P4") feat = &r.pyramid.p4;
    else if (stage == "P5") feat = &r.pyramid.p5;
    else throw CliError("config", "config error: stage must be one of P2, P3, P4, P5");
    GrayImage g = feature_to_gray(*feat);
    Image img(g.w, g.h, 1);
    img.pix = g.pix;
    save_png((fs::path(cfg.out_dir) / (s.image_id + "_" + stage + ".png")).string(), img);
  }
  std::cout << "exported " << samples.size() << " " << stage << " maps\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multispectral (rgb+ir) detection toolkit"};
  app.require_subcommand(1);

  std::string config_path, weights, stage = "P3", strategy = "copy_scaled", out_override;
  std::string fusion_override, scale_override, preset_override, primary_override;
  double conf_override = -1, iou_override = -1;
  int64_t seed_override = -1;
  bool deterministic = false;

  app.add_option("--config", config_path, "run config (json)");
  app.add_option("--weights", weights, "checkpoint path");
  app.add_option("--fusion", fusion_override,
                 "fusion mode: single|early|mid|midp3|midtolate|late|score|shareweight");
  app.add_option("--scale", scale_override, "model scale: n|s|m");
  app.add_option("--preset", preset_override, "optimizer preset: sgd-init|sgd|adam");
  app.add_option("--primary", primary_override, "primary modality: rgb|ir");
  app.add_option("--conf", conf_override, "confidence threshold");
  app.add_option("--iou", iou_override, "nms iou threshold");
  app.add_option("--stage", stage, "feature stage: P2|P3|P4|P5");
  app.add_option("--strategy", strategy, "channel adaptation: copy_scaled|average");
  app.add_option("--seed", seed_override, "rng seed");
  app.add_flag("--deterministic", deterministic, "bitwise-reproducible mode");
  app.add_option("--out", out_override, "output directory (or file for transfer)");

  auto* c_train = app.add_subcommand("train", "train a detector");
  auto* c_val = app.add_subcommand("val", "evaluate a checkpoint");
  auto* c_predict = app.add_subcommand("predict", "write detections and annotated images");
  auto* c_mcf = app.add_subcommand("finetune-mcf", "graft-train a second modality onto a frozen base");
  auto* c_transfer = app.add_subcommand("transfer", "re-shape a single-modality checkpoint");
  auto* c_features = app.add_subcommand("features", "export grayscale feature maps");
  auto* c_info = app.add_subcommand("info", "print parameter count and junction table");
  for (auto* sub : {c_train, c_val, c_predict, c_mcf, c_transfer, c_features, c_info})
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = effective_config(config_path);
    if (!fusion_override.empty()) cfg.fusion = fusion_override;
    if (!scale_override.empty()) cfg.scale = scale_override;
    if (!preset_override.empty()) cfg.preset = preset_override;
    if (!primary_override.empty()) cfg.primary = primary_override;
    if (conf_override >= 0) cfg.conf = conf_override;
    if (iou_override >= 0) cfg.iou = iou_override;
    if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
    if (deterministic) cfg.deterministic = true;
    if (!out_override.empty()) cfg.out_dir = out_override;
    cfg = run_config_from_json(cfg.to_json(), "command line");  // re-validate merged view

    auto need_weights = [&]() {
      if (weights.empty())
        throw CliError("config", "config error: --weights is required for this subcommand");
    };
    if (c_info->parsed()) return cmd_info(cfg);
    if (c_train->parsed()) return cmd_train(cfg);
    if (c_val->parsed()) { need_weights(); return cmd_val(cfg, weights); }
    if (c_predict->parsed()) { need_weights(); return cmd_predict(cfg, weights); }
    if (c_mcf->parsed()) { need_weights(); return cmd_finetune_mcf(cfg, weights); }
    if (c_transfer->parsed()) {
      need_weights();
      std::string out_path = out_override.empty() ? "transferred.ckpt" : out_override;
      return cmd_transfer(cfg, weights, strategy, out_path);
    }
    if (c_features->parsed()) { need_weights(); return cmd_features(cfg, weights, stage); }
  } catch (const CliError& e) {
    std::cerr << "error category=" << e.category << " detail=" << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error category=" << classify(e.what()) << " detail=" << e.what() << "\n";
    return 1;
  }
  return 0;
}
