#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "rgbt/detector.hpp"
#include "rgbt/losses.hpp"

namespace rgbt {

// One run description shared by every subcommand. Strict parse: unknown keys
// are rejected and referenced paths must exist.
struct RunConfig {
  std::string dataset_root;
  std::string manifest;  // dataset manifest path
  std::string fusion = "single";
  std::string scale = "n";
  std::string primary = "rgb";  // which modality feeds a single-modality or MCF-base graph
  int in_channels = 3;
  int ir_channels = 1;
  int num_classes = 1;
  int img_size = 640;
  int epochs = 1;
  int batch_size = 16;
  std::string preset = "sgd-init";
  uint64_t seed = 0;
  bool deterministic = true;
  bool augment_flip = false;
  int64_t max_iters = -1;
  double lambda_dfl = 1.0, lambda_cls = 0.5, lambda_loc = 0.05;
  double conf = 0.25;
  double iou = 0.60;
  std::string out_dir = "runs";

  ModelSpec model_spec() const {
    ModelSpec s;
    s.scale = scale.empty() ? 'n' : scale[0];
    s.num_classes = num_classes;
    s.fusion = fusion_mode_from_name(fusion);
    s.in_channels = in_channels;
    s.ir_channels = ir_channels;
    if (primary == "ir" && s.fusion == FusionMode::Single) s.in_channels = ir_channels;
    return s;
  }
  LossWeights loss_weights() const { return {lambda_dfl, lambda_cls, lambda_loc}; }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"dataset_root", dataset_root}, {"manifest", manifest}, {"fusion", fusion},
        {"scale", scale}, {"primary", primary}, {"in_channels", in_channels},
        {"ir_channels", ir_channels}, {"num_classes", num_classes}, {"img_size", img_size},
        {"epochs", epochs}, {"batch_size", batch_size}, {"preset", preset}, {"seed", seed},
        {"deterministic", deterministic}, {"augment_flip", augment_flip},
        {"max_iters", max_iters}, {"lambda_dfl", lambda_dfl}, {"lambda_cls", lambda_cls},
        {"lambda_loc", lambda_loc}, {"conf", conf}, {"iou", iou}, {"out_dir", out_dir}};
  }

  bool operator==(const RunConfig&) const = default;
};

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& origin) {
  static const std::set<std::string> known = {
      "dataset_root", "manifest",   "fusion",      "scale",        "primary",
      "in_channels",  "ir_channels", "num_classes", "img_size",     "epochs",
      "batch_size",   "preset",     "seed",        "deterministic", "augment_flip",
      "max_iters",    "lambda_dfl", "lambda_cls",  "lambda_loc",   "conf",
      "iou",          "out_dir"};
  for (const auto& [key, unused] : j.items())
    if (!known.count(key))
      throw std::runtime_error("config error: unknown key '" + key + "' in " + origin);

  RunConfig c;
  c.dataset_root = j.value("dataset_root", c.dataset_root);
  c.manifest = j.value("manifest", c.manifest);
  c.fusion = j.value("fusion", c.fusion);
  c.scale = j.value("scale", c.scale);
  c.primary = j.value("primary", c.primary);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.ir_channels = j.value("ir_channels", c.ir_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.img_size = j.value("img_size", c.img_size);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.preset = j.value("preset", c.preset);
  c.seed = j.value("seed", c.seed);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.augment_flip = j.value("augment_flip", c.augment_flip);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.lambda_dfl = j.value("lambda_dfl", c.lambda_dfl);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.lambda_loc = j.value("lambda_loc", c.lambda_loc);
  c.conf = j.value("conf", c.conf);
  c.iou = j.value("iou", c.iou);
  c.out_dir = j.value("out_dir", c.out_dir);

  fusion_mode_from_name(c.fusion);  // validates
  if (c.scale != "n" && c.scale != "s" && c.scale != "m")
    throw std::runtime_error("config error: scale must be one of n, s, m");
  if (c.primary != "rgb" && c.primary != "ir")
    throw std::runtime_error("config error: primary must be rgb or ir");
  if (!c.dataset_root.empty() && !std::filesystem::exists(c.dataset_root))
    throw std::runtime_error("config error: dataset_root does not exist: " + c.dataset_root);
  if (!c.manifest.empty() && !std::filesystem::exists(c.manifest))
    throw std::runtime_error("config error: manifest does not exist: " + c.manifest);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config error: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw std::runtime_error("config error: " + path + " is not valid json: " + e.what());
  }
  return run_config_from_json(j, path);
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config: " + path);
  os << c.to_json().dump(2) << "\n";
}

}  // namespace rgbt
