#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/image.hpp"
#include "rgbt/losses.hpp"
#include "rgbt/rng.hpp"

namespace rgbt {

struct GroundTruthBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized center format
};

struct PairedSample {
  std::string image_id;
  Image rgb;
  Image ir;
  std::vector<GroundTruthBox> boxes;
  std::string source_split;
};

enum class ModalityPolicy { Rgb, Ir, Both };

inline ModalityPolicy modality_policy_from_name(const std::string& s) {
  if (s == "rgb") return ModalityPolicy::Rgb;
  if (s == "ir") return ModalityPolicy::Ir;
  if (s == "both") return ModalityPolicy::Both;
  throw std::invalid_argument("unknown modality policy: " + s);
}

struct LoadReport {
  std::vector<std::string> excluded;  // stems missing one modality or labels
};

struct DatasetManifest {
  int num_classes = 0;
  std::vector<std::string> names;
};

inline DatasetManifest load_dataset_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset manifest: " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  DatasetManifest m;
  m.num_classes = j.at("num_classes").get<int>();
  m.names = j.value("names", std::vector<std::string>{});
  if (m.num_classes < 1) throw std::runtime_error("dataset manifest: num_classes must be >= 1");
  if (!m.names.empty() && static_cast<int>(m.names.size()) != m.num_classes)
    throw std::runtime_error("dataset manifest: names list does not match num_classes");
  return m;
}

namespace detail {

inline std::vector<GroundTruthBox> parse_label_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open label file: " + path);
  std::vector<GroundTruthBox> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    if (fields.empty()) continue;
    auto fail = [&](const std::string& why) -> std::runtime_error {
      return std::runtime_error("label parse error at " + path + ":" + std::to_string(lineno) +
                                ": " + why);
    };
    if (fields.size() != 5) throw fail("expected 5 fields, got " + std::to_string(fields.size()));
    GroundTruthBox b;
    try {
      size_t used = 0;
      b.class_id = std::stoi(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument(fields[0]);
      b.cx = std::stod(fields[1]);
      b.cy = std::stod(fields[2]);
      b.w = std::stod(fields[3]);
      b.h = std::stod(fields[4]);
    } catch (const std::exception&) {
      throw fail("non-numeric field");
    }
    if (b.class_id < 0) throw fail("negative class id");
    if (b.cx < 0 || b.cx > 1 || b.cy < 0 || b.cy > 1 || b.w <= 0 || b.w > 1 || b.h <= 0 || b.h > 1)
      throw fail("coordinate out of range [0,1] or non-positive size");
    boxes.push_back(b);
  }
  return boxes;
}

inline std::map<std::string, std::string> stems_in(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;  // stem -> full path (sorted by stem)
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    if (ext == ".png" || ext == ".ppm" || ext == ".pgm")
      out[e.path().stem().string()] = e.path().string();
  }
  return out;
}

}  // namespace detail

// Load a FLIR/LLVIP-style tree: images/visible/<split>, images/infrared/<split>,
// labels/<split>, paired by filename stem, ordered lexicographically. Stems
// missing a required modality or a label file are excluded and reported.
inline std::pair<std::vector<PairedSample>, LoadReport> load_paired_dataset(
    const std::string& root, const std::string& split, ModalityPolicy policy) {
  namespace fs = std::filesystem;
  fs::path vis = fs::path(root) / "images" / "visible" / split;
  fs::path inf = fs::path(root) / "images" / "infrared" / split;
  fs::path lab = fs::path(root) / "labels" / split;
  bool need_rgb = policy != ModalityPolicy::Ir;
  bool need_ir = policy != ModalityPolicy::Rgb;
  if (need_rgb && !fs::is_directory(vis))
    throw std::runtime_error("missing dataset directory: " + vis.string());
  if (need_ir && !fs::is_directory(inf))
    throw std::runtime_error("missing dataset directory: " + inf.string());
  if (!fs::is_directory(lab)) throw std::runtime_error("missing dataset directory: " + lab.string());

  auto rgbs = need_rgb ? detail::stems_in(vis) : std::map<std::string, std::string>{};
  auto irs = need_ir ? detail::stems_in(inf) : std::map<std::string, std::string>{};
  std::map<std::string, bool> stems;
  for (auto& [s, p] : rgbs) stems[s] = true;
  for (auto& [s, p] : irs) stems[s] = true;

  std::vector<PairedSample> samples;
  LoadReport report;
  for (auto& [stem, unused] : stems) {
    bool have_rgb = rgbs.count(stem) > 0, have_ir = irs.count(stem) > 0;
    fs::path lpath = lab / (stem + ".txt");
    if ((need_rgb && !have_rgb) || (need_ir && !have_ir) || !fs::is_regular_file(lpath)) {
      report.excluded.push_back(stem);
      continue;
    }
    PairedSample s;
    s.image_id = stem;
    s.source_split = split;
    if (need_rgb) s.rgb = load_image(rgbs.at(stem));
    if (need_ir) s.ir = load_image(irs.at(stem));
    s.boxes = detail::parse_label_file(lpath.string());
    samples.push_back(std::move(s));
  }
  return {std::move(samples), std::move(report)};
}

struct AlignmentReport {
  std::vector<std::string> violations;
  bool empty_dataset = false;
};

inline AlignmentReport verify_alignment(const std::vector<PairedSample>& samples) {
  AlignmentReport rep;
  rep.empty_dataset = samples.empty();
  for (const auto& s : samples) {
    if (s.rgb.w == 0 || s.ir.w == 0) continue;  // single-modality load
    if (s.rgb.w != s.ir.w || s.rgb.h != s.ir.h) {
      std::ostringstream os;
      os << s.image_id << ": rgb " << s.rgb.w << "x" << s.rgb.h << " vs ir " << s.ir.w << "x"
         << s.ir.h;
      rep.violations.push_back(os.str());
    }
  }
  return rep;
}

// ---------- letterbox ----------

struct LetterboxTransform {
  double scale = 1.0;
  double pad_x = 0.0, pad_y = 0.0;  // per-side padding in target pixels
  int src_w = 0, src_h = 0;
  int target = 640;

  GroundTruthBox apply(const GroundTruthBox& b) const {
    GroundTruthBox o = b;
    o.cx = (b.cx * src_w * scale + pad_x) / target;
    o.cy = (b.cy * src_h * scale + pad_y) / target;
    o.w = b.w * src_w * scale / target;
    o.h = b.h * src_h * scale / target;
    return o;
  }
  GroundTruthBox invert(const GroundTruthBox& b) const {
    GroundTruthBox o = b;
    o.cx = (b.cx * target - pad_x) / (src_w * scale);
    o.cy = (b.cy * target - pad_y) / (src_h * scale);
    o.w = b.w * target / (src_w * scale);
    o.h = b.h * target / (src_h * scale);
    return o;
  }
};

namespace detail {

inline Image letterbox_image(const Image& src, double scale, int target) {
  if (src.w == 0) return src;
  int nw = std::max(1, static_cast<int>(std::lround(src.w * scale)));
  int nh = std::max(1, static_cast<int>(std::lround(src.h * scale)));
  Image resized = (nw == src.w && nh == src.h) ? src : resize_bilinear(src, nw, nh);
  Image out(target, target, src.c, 114);
  int ox = (target - nw) / 2, oy = (target - nh) / 2;
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x)
      for (int ch = 0; ch < src.c; ++ch) out.at(ox + x, oy + y, ch) = resized.at(x, y, ch);
  return out;
}

}  // namespace detail

// Aspect-preserving resize of both modalities onto a target x target canvas,
// gray padding, boxes remapped into the letterboxed frame.
inline std::pair<PairedSample, LetterboxTransform> letterbox(const PairedSample& sample,
                                                             int target) {
  if (target % 32 != 0) throw std::invalid_argument("letterbox target must be divisible by 32");
  int w = sample.rgb.w ? sample.rgb.w : sample.ir.w;
  int h = sample.rgb.h ? sample.rgb.h : sample.ir.h;
  if (w == 0 || h == 0) throw std::invalid_argument("letterbox: sample has no image data");
  LetterboxTransform t;
  t.src_w = w;
  t.src_h = h;
  t.target = target;
  t.scale = std::min(static_cast<double>(target) / w, static_cast<double>(target) / h);
  int nw = std::max(1, static_cast<int>(std::lround(w * t.scale)));
  int nh = std::max(1, static_cast<int>(std::lround(h * t.scale)));
  t.pad_x = (target - nw) / 2.0;
  t.pad_y = (target - nh) / 2.0;

  PairedSample out = sample;
  out.rgb = detail::letterbox_image(sample.rgb, t.scale, target);
  out.ir = detail::letterbox_image(sample.ir, t.scale, target);
  out.boxes.clear();
  for (const auto& b : sample.boxes) out.boxes.push_back(t.apply(b));
  return {std::move(out), t};
}

// ---------- augmentation ----------

struct AugmentConfig {
  double flip_prob = 0.5;
  double scale_jitter = 0.0;  // uniform scale in [1-j, 1+j]
};

namespace detail {

inline Image flip_horizontal(const Image& src) {
  Image out(src.w, src.h, src.c);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      for (int ch = 0; ch < src.c; ++ch) out.at(x, y, ch) = src.at(src.w - 1 - x, y, ch);
  return out;
}

// rescale content about the image center, cropping or padding back to size
inline Image center_zoom(const Image& src, double s) {
  if (src.w == 0) return src;
  int nw = std::max(1, static_cast<int>(std::lround(src.w * s)));
  int nh = std::max(1, static_cast<int>(std::lround(src.h * s)));
  Image resized = resize_bilinear(src, nw, nh);
  Image out(src.w, src.h, src.c, 114);
  int ox = (src.w - nw) / 2, oy = (src.h - nh) / 2;
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      int sx = x - ox, sy = y - oy;
      if (sx < 0 || sy < 0 || sx >= nw || sy >= nh) continue;
      for (int ch = 0; ch < src.c; ++ch) out.at(x, y, ch) = resized.at(sx, sy, ch);
    }
  return out;
}

}  // namespace detail

// Deterministic geometric augmentation, identical on both modalities.
inline PairedSample augment(const PairedSample& sample, const AugmentConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  PairedSample out = sample;
  bool flip = rng.uniform() < cfg.flip_prob;
  double s = cfg.scale_jitter > 0 ? rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter) : 1.0;

  if (flip) {
    if (out.rgb.w) out.rgb = detail::flip_horizontal(out.rgb);
    if (out.ir.w) out.ir = detail::flip_horizontal(out.ir);
    for (auto& b : out.boxes) b.cx = 1.0 - b.cx;
  }
  if (s != 1.0) {
    if (out.rgb.w) out.rgb = detail::center_zoom(out.rgb, s);
    if (out.ir.w) out.ir = detail::center_zoom(out.ir, s);
    std::vector<GroundTruthBox> kept;
    for (auto b : out.boxes) {
      b.cx = 0.5 + (b.cx - 0.5) * s;
      b.cy = 0.5 + (b.cy - 0.5) * s;
      b.w *= s;
      b.h *= s;
      double x1 = std::clamp(b.cx - b.w / 2, 0.0, 1.0), x2 = std::clamp(b.cx + b.w / 2, 0.0, 1.0);
      double y1 = std::clamp(b.cy - b.h / 2, 0.0, 1.0), y2 = std::clamp(b.cy + b.h / 2, 0.0, 1.0);
      if (x2 - x1 < 1e-4 || y2 - y1 < 1e-4) continue;  // left the frame
      b.cx = (x1 + x2) / 2;
      b.cy = (y1 + y2) / 2;
      b.w = x2 - x1;
      b.h = y2 - y1;
      kept.push_back(b);
    }
    out.boxes = std::move(kept);
  }
  return out;
}

// ---------- tensor conversion ----------

// [0,255] -> [0,1] CHW tensor with leading batch dim 1
inline Tensor image_to_tensor(const Image& img) {
  Tensor t({1, img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) t.at4(0, ch, y, x) = img.at(x, y, ch) / 255.0;
  return t;
}

inline std::vector<PixelBox> boxes_to_pixels(const std::vector<GroundTruthBox>& boxes, int side) {
  std::vector<PixelBox> out;
  for (const auto& b : boxes) {
    PixelBox p;
    p.class_id = b.class_id;
    p.box = {(b.cx - b.w / 2) * side, (b.cy - b.h / 2) * side, (b.cx + b.w / 2) * side,
             (b.cy + b.h / 2) * side};
    out.push_back(p);
  }
  return out;
}

// ---------- synthetic paired data ----------

// Small paired scenes with bright class-coded rectangles visible in both
// modalities, for overfit and determinism tests.
inline PairedSample make_synthetic_pair(uint64_t seed, int side, int num_classes, int ir_channels = 1) {
  Rng rng(seed);
  PairedSample s;
  s.image_id = "synthetic_" + std::to_string(seed);
  s.rgb = Image(side, side, 3);
  s.ir = Image(side, side, ir_channels);
  for (auto& p : s.rgb.pix) p = static_cast<uint8_t>(rng.uniform_int(20, 60));
  for (auto& p : s.ir.pix) p = static_cast<uint8_t>(rng.uniform_int(20, 60));

  int n = rng.uniform_int(1, 2);
  for (int i = 0; i < n; ++i) {
    int cls = rng.uniform_int(0, num_classes - 1);
    int bw = rng.uniform_int(side / 4, side / 2);
    int bh = rng.uniform_int(side / 4, side / 2);
    int x1 = rng.uniform_int(0, side - bw - 1);
    int y1 = rng.uniform_int(0, side - bh - 1);
    uint8_t bright = static_cast<uint8_t>(200 + 20 * cls);
    for (int y = y1; y < y1 + bh; ++y)
      for (int x = x1; x < x1 + bw; ++x) {
        s.rgb.at(x, y, cls % 3) = bright;
        for (int ch = 0; ch < ir_channels; ++ch) s.ir.at(x, y, ch) = bright;
      }
    GroundTruthBox b;
    b.class_id = cls;
    b.cx = (x1 + bw / 2.0) / side;
    b.cy = (y1 + bh / 2.0) / side;
    b.w = static_cast<double>(bw) / side;
    b.h = static_cast<double>(bh) / side;
    s.boxes.push_back(b);
  }
  return s;
}

}  // namespace rgbt
