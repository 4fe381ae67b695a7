#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rgbt/nn.hpp"

namespace rgbt {

enum class FusionMode { Single, Early, Mid, MidP3, MidToLate, Late, Score, ShareWeight };

inline const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::Single: return "single";
    case FusionMode::Early: return "early";
    case FusionMode::Mid: return "mid";
    case FusionMode::MidP3: return "midp3";
    case FusionMode::MidToLate: return "midtolate";
    case FusionMode::Late: return "late";
    case FusionMode::Score: return "score";
    case FusionMode::ShareWeight: return "shareweight";
  }
  return "?";
}

inline FusionMode fusion_mode_from_name(const std::string& s) {
  for (FusionMode m : {FusionMode::Single, FusionMode::Early, FusionMode::Mid, FusionMode::MidP3,
                       FusionMode::MidToLate, FusionMode::Late, FusionMode::Score,
                       FusionMode::ShareWeight})
    if (s == fusion_mode_name(m)) return m;
  throw std::invalid_argument("unknown fusion mode: " + s);
}

struct ModelSpec {
  char scale = 'n';  // n, s, m
  int num_classes = 1;
  int reg_max = 16;
  std::array<int, 3> strides = {8, 16, 32};
  int in_channels = 3;     // primary-modality channels
  int ir_channels = 3;     // secondary-modality channels for fused modes
  FusionMode fusion = FusionMode::Single;

  void validate() const {
    if (scale != 'n' && scale != 's' && scale != 'm')
      throw std::invalid_argument("unsupported scale: " + std::string(1, scale));
    if (reg_max < 2) throw std::invalid_argument("reg_max must be >= 2");
    if (!(strides[0] < strides[1] && strides[1] < strides[2]))
      throw std::invalid_argument("strides must be strictly increasing");
    if (in_channels != 1 && in_channels != 3 && in_channels != 4 && in_channels != 6)
      throw std::invalid_argument("in_channels must be in {1,3,4,6}");
    if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  }

  double width_mult() const { return scale == 'n' ? 0.25 : scale == 's' ? 0.5 : 0.75; }
  double depth_mult() const { return scale == 'm' ? 2.0 / 3.0 : 1.0 / 3.0; }

  // channel widths at P1..P5
  std::array<int, 5> channels() const {
    static constexpr std::array<int, 5> base = {64, 128, 256, 512, 512};
    std::array<int, 5> c{};
    for (int i = 0; i < 5; ++i)
      c[static_cast<size_t>(i)] = std::max(8, static_cast<int>(std::lround(base[static_cast<size_t>(i)] * width_mult())));
    return c;
  }
  // bottleneck repeats at stages P2..P5
  std::array<int, 4> depths() const {
    static constexpr std::array<int, 4> base = {3, 9, 6, 3};
    std::array<int, 4> d{};
    for (int i = 0; i < 4; ++i)
      d[static_cast<size_t>(i)] = std::max(1, static_cast<int>(std::lround(base[static_cast<size_t>(i)] * depth_mult())));
    return d;
  }
};

// ---------- backbone ----------

struct PyramidVars {
  Var p2, p3, p4, p5;
};

class Backbone : public Module {
 public:
  Backbone(const ModelSpec& spec, int in_ch, Rng& rng) {
    auto c = spec.channels();
    auto d = spec.depths();
    s1_ = std::make_shared<ConvBlock>(in_ch, c[0], 3, 2, rng);
    s2_conv_ = std::make_shared<ConvBlock>(c[0], c[1], 3, 2, rng);
    s2_block_ = std::make_shared<C3k2Block>(c[1], c[1], d[0], rng);
    s3_conv_ = std::make_shared<ConvBlock>(c[1], c[2], 3, 2, rng);
    s3_block_ = std::make_shared<C3k2Block>(c[2], c[2], d[1], rng);
    s4_conv_ = std::make_shared<ConvBlock>(c[2], c[3], 3, 2, rng);
    s4_block_ = std::make_shared<C3k2Block>(c[3], c[3], d[2], rng);
    s5_conv_ = std::make_shared<ConvBlock>(c[3], c[4], 3, 2, rng);
    s5_block_ = std::make_shared<C3k2Block>(c[4], c[4], d[3], rng);
    sppf_ = std::make_shared<SPPF>(c[4], rng);
    add_child("s1", s1_);
    add_child("s2.conv", s2_conv_);
    add_child("s2.block", s2_block_);
    add_child("s3.conv", s3_conv_);
    add_child("s3.block", s3_block_);
    add_child("s4.conv", s4_conv_);
    add_child("s4.block", s4_block_);
    add_child("s5.conv", s5_conv_);
    add_child("s5.block", s5_block_);
    add_child("sppf", sppf_);
  }

  // stem through P3; p2_out receives the stride-4 feature when non-null
  Var forward_to_p3(const Var& x, Var* p2_out = nullptr) {
    Var y = s1_->forward(x);
    y = s2_block_->forward(s2_conv_->forward(y));
    if (p2_out) *p2_out = y;
    return s3_block_->forward(s3_conv_->forward(y));
  }
  std::pair<Var, Var> forward_from_p3(const Var& p3) {
    Var p4 = s4_block_->forward(s4_conv_->forward(p3));
    Var p5 = sppf_->forward(s5_block_->forward(s5_conv_->forward(p4)));
    return {p4, p5};
  }
  PyramidVars forward(const Var& x) {
    PyramidVars p;
    p.p3 = forward_to_p3(x, &p.p2);
    auto [p4, p5] = forward_from_p3(p.p3);
    p.p4 = p4;
    p.p5 = p5;
    return p;
  }

 private:
  std::shared_ptr<ConvBlock> s1_, s2_conv_, s3_conv_, s4_conv_, s5_conv_;
  std::shared_ptr<C3k2Block> s2_block_, s3_block_, s4_block_, s5_block_;
  std::shared_ptr<SPPF> sppf_;
};

// A backbone truncated at P3: the stem piece used by the MidP3 topology.
class BackboneStem : public Module {
 public:
  BackboneStem(const ModelSpec& spec, int in_ch, Rng& rng) {
    auto c = spec.channels();
    auto d = spec.depths();
    s1_ = std::make_shared<ConvBlock>(in_ch, c[0], 3, 2, rng);
    s2_conv_ = std::make_shared<ConvBlock>(c[0], c[1], 3, 2, rng);
    s2_block_ = std::make_shared<C3k2Block>(c[1], c[1], d[0], rng);
    s3_conv_ = std::make_shared<ConvBlock>(c[1], c[2], 3, 2, rng);
    s3_block_ = std::make_shared<C3k2Block>(c[2], c[2], d[1], rng);
    add_child("s1", s1_);
    add_child("s2.conv", s2_conv_);
    add_child("s2.block", s2_block_);
    add_child("s3.conv", s3_conv_);
    add_child("s3.block", s3_block_);
  }
  Var forward(const Var& x, Var* p2_out = nullptr) {
    Var y = s1_->forward(x);
    y = s2_block_->forward(s2_conv_->forward(y));
    if (p2_out) *p2_out = y;
    return s3_block_->forward(s3_conv_->forward(y));
  }

 private:
  std::shared_ptr<ConvBlock> s1_, s2_conv_, s3_conv_;
  std::shared_ptr<C3k2Block> s2_block_, s3_block_;
};

// The P4/P5 tail of a backbone: the shared trunk of the MidP3 topology.
class BackboneTrunk : public Module {
 public:
  BackboneTrunk(const ModelSpec& spec, Rng& rng) {
    auto c = spec.channels();
    auto d = spec.depths();
    s4_conv_ = std::make_shared<ConvBlock>(c[2], c[3], 3, 2, rng);
    s4_block_ = std::make_shared<C3k2Block>(c[3], c[3], d[2], rng);
    s5_conv_ = std::make_shared<ConvBlock>(c[3], c[4], 3, 2, rng);
    s5_block_ = std::make_shared<C3k2Block>(c[4], c[4], d[3], rng);
    sppf_ = std::make_shared<SPPF>(c[4], rng);
    add_child("s4.conv", s4_conv_);
    add_child("s4.block", s4_block_);
    add_child("s5.conv", s5_conv_);
    add_child("s5.block", s5_block_);
    add_child("sppf", sppf_);
  }
  std::pair<Var, Var> forward(const Var& p3) {
    Var p4 = s4_block_->forward(s4_conv_->forward(p3));
    Var p5 = sppf_->forward(s5_block_->forward(s5_conv_->forward(p4)));
    return {p4, p5};
  }

 private:
  std::shared_ptr<ConvBlock> s4_conv_, s5_conv_;
  std::shared_ptr<C3k2Block> s4_block_, s5_block_;
  std::shared_ptr<SPPF> sppf_;
};

// ---------- PAN neck ----------

class Neck : public Module {
 public:
  Neck(const ModelSpec& spec, Rng& rng) {
    auto c = spec.channels();
    int n = std::max(1, static_cast<int>(std::lround(3 * spec.depth_mult())));
    up4_ = std::make_shared<C3k2Block>(c[4] + c[3], c[3], n, rng);
    up3_ = std::make_shared<C3k2Block>(c[3] + c[2], c[2], n, rng);
    down3_ = std::make_shared<ConvBlock>(c[2], c[2], 3, 2, rng);
    out4_ = std::make_shared<C3k2Block>(c[2] + c[3], c[3], n, rng);
    down4_ = std::make_shared<ConvBlock>(c[3], c[3], 3, 2, rng);
    out5_ = std::make_shared<C3k2Block>(c[3] + c[4], c[4], n, rng);
    add_child("up4", up4_);
    add_child("up3", up3_);
    add_child("down3", down3_);
    add_child("out4", out4_);
    add_child("down4", down4_);
    add_child("out5", out5_);
  }
  std::array<Var, 3> forward(const Var& p3, const Var& p4, const Var& p5) {
    Var t4 = up4_->forward(ops::concat_channels({ops::upsample2x(p5), p4}));
    Var n3 = up3_->forward(ops::concat_channels({ops::upsample2x(t4), p3}));
    Var n4 = out4_->forward(ops::concat_channels({down3_->forward(n3), t4}));
    Var n5 = out5_->forward(ops::concat_channels({down4_->forward(n4), p5}));
    return {n3, n4, n5};
  }

 private:
  std::shared_ptr<C3k2Block> up4_, up3_, out4_, out5_;
  std::shared_ptr<ConvBlock> down3_, down4_;
};

// ---------- decoupled head ----------

struct ScaleOutput {
  Var cls;  // [N, num_classes, K, K]
  Var reg;  // [N, 4*reg_max, K, K]
  int stride = 0;
};

using HeadOutput = std::vector<ScaleOutput>;

class DetectHead : public Module {
 public:
  DetectHead(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    auto c = spec.channels();
    std::array<int, 3> in = {c[2], c[3], c[4]};
    int reg_hidden = std::max({16, c[2] / 4, 4 * spec.reg_max});
    for (int s = 0; s < 3; ++s) {
      std::string p = "p" + std::to_string(s + 3) + ".";
      auto cls1 = std::make_shared<ConvBlock>(in[static_cast<size_t>(s)], in[static_cast<size_t>(s)], 3, 1, rng);
      auto cls2 = std::make_shared<ConvBlock>(in[static_cast<size_t>(s)], in[static_cast<size_t>(s)], 3, 1, rng);
      auto cls3 = std::make_shared<Conv2dLayer>(in[static_cast<size_t>(s)], spec.num_classes, 1, 1, rng);
      // bias the class prior low so early training is not swamped by FPs
      cls3->bias_->value.fill(std::log(0.01 / 0.99));
      auto reg1 = std::make_shared<ConvBlock>(in[static_cast<size_t>(s)], reg_hidden, 3, 1, rng);
      auto reg2 = std::make_shared<ConvBlock>(reg_hidden, reg_hidden, 3, 1, rng);
      auto reg3 = std::make_shared<Conv2dLayer>(reg_hidden, 4 * spec.reg_max, 1, 1, rng);
      add_child(p + "cls1", cls1);
      add_child(p + "cls2", cls2);
      add_child(p + "cls3", cls3);
      add_child(p + "reg1", reg1);
      add_child(p + "reg2", reg2);
      add_child(p + "reg3", reg3);
      cls_[static_cast<size_t>(s)] = {cls1, cls2, cls3};
      reg_[static_cast<size_t>(s)] = {reg1, reg2, reg3};
    }
  }
  HeadOutput forward(const std::array<Var, 3>& feats) {
    HeadOutput out;
    for (int s = 0; s < 3; ++s) {
      auto& [c1, c2, c3] = cls_[static_cast<size_t>(s)];
      auto& [r1, r2, r3] = reg_[static_cast<size_t>(s)];
      ScaleOutput so;
      so.cls = c3->forward(c2->forward(c1->forward(feats[static_cast<size_t>(s)])));
      so.reg = r3->forward(r2->forward(r1->forward(feats[static_cast<size_t>(s)])));
      so.stride = spec_.strides[static_cast<size_t>(s)];
      out.push_back(so);
    }
    return out;
  }

 private:
  ModelSpec spec_;
  std::array<std::tuple<std::shared_ptr<ConvBlock>, std::shared_ptr<ConvBlock>, std::shared_ptr<Conv2dLayer>>, 3> cls_, reg_;
};

// ---------- single-modality detector ----------

struct FeaturePyramid {
  Tensor p2, p3, p4, p5;  // detached values; p2 kept for visualization
};

struct ForwardResult {
  FeaturePyramid pyramid;
  HeadOutput heads;
  HeadOutput heads_secondary;  // Late/Score modes only
};

class Detector : public Module {
 public:
  Detector(const ModelSpec& spec, uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    backbone_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
    neck_ = std::make_shared<Neck>(spec_, rng);
    head_ = std::make_shared<DetectHead>(spec_, rng);
    add_child("backbone", backbone_);
    add_child("neck", neck_);
    add_child("head", head_);
  }

  ForwardResult forward(const Var& x) {
    check_input(x);
    ForwardResult r;
    PyramidVars p = backbone_->forward(x);
    auto feats = neck_->forward(p.p3, p.p4, p.p5);
    r.heads = head_->forward(feats);
    r.pyramid = {p.p2->value, p.p3->value, p.p4->value, p.p5->value};
    return r;
  }

  const ModelSpec& spec() const { return spec_; }
  std::shared_ptr<Backbone> backbone() { return backbone_; }
  std::shared_ptr<Neck> neck() { return neck_; }
  std::shared_ptr<DetectHead> head() { return head_; }

  void check_input(const Var& x) const {
    if (x->value.ndim() != 4) throw std::invalid_argument("input must be NCHW");
    if (x->value.shape[1] != spec_.in_channels)
      throw std::invalid_argument("stage backbone.s1: expected " + std::to_string(spec_.in_channels) +
                                  " input channels, got " + std::to_string(x->value.shape[1]));
    if (x->value.shape[2] % 32 != 0 || x->value.shape[3] % 32 != 0)
      throw std::invalid_argument("input spatial size must be divisible by 32");
  }

 private:
  ModelSpec spec_;
  std::shared_ptr<Backbone> backbone_;
  std::shared_ptr<Neck> neck_;
  std::shared_ptr<DetectHead> head_;
};

// ---------- decoding / NMS ----------

struct Detection {
  int class_id = 0;
  double score = 0.0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline double box_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                      double bx2, double by2) {
  double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double ua = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return inter / ua;
}

inline double det_iou(const Detection& a, const Detection& b) {
  return box_iou(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}

// Distribution-expectation decode of one image's head maps.
inline std::vector<Detection> decode(const HeadOutput& heads, int reg_max, double conf_thresh,
                                     int image_index = 0) {
  if (conf_thresh <= 0.0 || conf_thresh >= 1.0)
    throw std::invalid_argument("conf_thresh must be in (0,1)");
  std::vector<Detection> dets;
  for (const auto& so : heads) {
    const Tensor& cls = so.cls->value;
    const Tensor& reg = so.reg->value;
    int nc = cls.shape[1], gh = cls.shape[2], gw = cls.shape[3];
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) {
        // expectation of each side's distribution
        double dist[4];
        for (int p = 0; p < 4; ++p) {
          double zmax = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < reg_max; ++j)
            zmax = std::max(zmax, reg.at4(image_index, p * reg_max + j, y, x));
          double zs = 0.0, e = 0.0;
          for (int j = 0; j < reg_max; ++j) zs += std::exp(reg.at4(image_index, p * reg_max + j, y, x) - zmax);
          for (int j = 0; j < reg_max; ++j)
            e += std::exp(reg.at4(image_index, p * reg_max + j, y, x) - zmax) / zs * j;
          dist[p] = e * so.stride;
        }
        double ax = (x + 0.5) * so.stride, ay = (y + 0.5) * so.stride;
        for (int c = 0; c < nc; ++c) {
          double score = 1.0 / (1.0 + std::exp(-cls.at4(image_index, c, y, x)));
          if (score < conf_thresh) continue;
          Detection d;
          d.class_id = c;
          d.score = score;
          d.x1 = ax - dist[0];
          d.y1 = ay - dist[1];
          d.x2 = ax + dist[2];
          d.y2 = ay + dist[3];
          if (d.x2 > d.x1 && d.y2 > d.y1) dets.push_back(d);
        }
      }
  }
  return dets;
}

// Class-wise greedy NMS by descending score. Stable: ties keep insertion order.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (iou_thresh <= 0.0 || iou_thresh >= 1.0)
    throw std::invalid_argument("iou_thresh must be in (0,1)");
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> keep;
  std::vector<bool> removed(dets.size(), false);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (removed[i]) continue;
    keep.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (removed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (det_iou(dets[i], dets[j]) > iou_thresh) removed[j] = true;
    }
  }
  return keep;
}

// ---------- feature-map export ----------

struct GrayImage {
  int w = 0, h = 0;
  std::vector<uint8_t> pix;
};

// Channel-mean activation min-max normalized to 8-bit. A constant map (zero
// range) renders as uniform mid-gray.
inline GrayImage feature_to_gray(const Tensor& feat, int image_index = 0) {
  int c = feat.shape[1], h = feat.shape[2], w = feat.shape[3];
  std::vector<double> mean(static_cast<size_t>(h) * w, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) mean[static_cast<size_t>(y) * w + x] += feat.at4(image_index, ci, y, x);
  double lo = mean[0], hi = mean[0];
  for (double v : mean) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  GrayImage img;
  img.w = w;
  img.h = h;
  img.pix.resize(mean.size());
  if (hi - lo < 1e-12) {
    std::fill(img.pix.begin(), img.pix.end(), 128);
  } else {
    for (size_t i = 0; i < mean.size(); ++i)
      img.pix[i] = static_cast<uint8_t>(std::lround((mean[i] - lo) / (hi - lo) * 255.0));
  }
  return img;
}

}  // namespace rgbt
