#pragma once

#include <memory>
#include <sstream>
#include <vector>

#include "rgbt/detector.hpp"

namespace rgbt {

// Concat + 1x1-reduce junction. Output channel count equals the
// single-modality channel count at the stage, so the downstream graph is
// unchanged.
class FusionJunction : public Module {
 public:
  FusionJunction(int c, Rng& rng) : channels_(c) {
    reduce_ = std::make_shared<ConvBlock>(2 * c, c, 1, 1, rng);
    add_child("reduce", reduce_);
  }
  Var forward(const Var& a, const Var& b) {
    return reduce_->forward(ops::concat_channels({a, b}));
  }
  int channels() const { return channels_; }

 private:
  int channels_;
  std::shared_ptr<ConvBlock> reduce_;
};

// One detector over one or two modality streams, with the fusion topology
// selected by spec.fusion. All modes keep the single-modality neck/head
// shapes at every junction.
class FusedDetector : public Module {
 public:
  FusedDetector(const ModelSpec& spec, uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    auto c = spec_.channels();
    switch (spec_.fusion) {
      case FusionMode::Single:
        backbone_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
        add_child("backbone", backbone_);
        break;
      case FusionMode::Early:
        backbone_ = std::make_shared<Backbone>(spec_, spec_.in_channels + spec_.ir_channels, rng);
        add_child("backbone", backbone_);
        break;
      case FusionMode::Mid:
        backbone_rgb_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
        backbone_ir_ = std::make_shared<Backbone>(spec_, spec_.ir_channels, rng);
        add_child("backbone_rgb", backbone_rgb_);
        add_child("backbone_ir", backbone_ir_);
        make_junctions({c[2], c[3], c[4]}, rng);
        break;
      case FusionMode::ShareWeight:
        if (spec_.ir_channels != spec_.in_channels)
          throw std::invalid_argument(
              "shareweight fusion requires equal channel counts for both modalities");
        backbone_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
        add_child("backbone", backbone_);
        make_junctions({c[2], c[3], c[4]}, rng);
        break;
      case FusionMode::MidP3:
        stem_rgb_ = std::make_shared<BackboneStem>(spec_, spec_.in_channels, rng);
        stem_ir_ = std::make_shared<BackboneStem>(spec_, spec_.ir_channels, rng);
        add_child("stem_rgb", stem_rgb_);
        add_child("stem_ir", stem_ir_);
        junction_p3_ = std::make_shared<FusionJunction>(c[2], rng);
        add_child("junction_p3", junction_p3_);
        trunk_ = std::make_shared<BackboneTrunk>(spec_, rng);
        add_child("trunk", trunk_);
        break;
      case FusionMode::MidToLate:
        backbone_rgb_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
        backbone_ir_ = std::make_shared<Backbone>(spec_, spec_.ir_channels, rng);
        add_child("backbone_rgb", backbone_rgb_);
        add_child("backbone_ir", backbone_ir_);
        neck_rgb_ = std::make_shared<Neck>(spec_, rng);
        neck_ir_ = std::make_shared<Neck>(spec_, rng);
        add_child("neck_rgb", neck_rgb_);
        add_child("neck_ir", neck_ir_);
        make_junctions({c[2], c[3], c[4]}, rng);
        break;
      case FusionMode::Late:
      case FusionMode::Score:
        backbone_rgb_ = std::make_shared<Backbone>(spec_, spec_.in_channels, rng);
        backbone_ir_ = std::make_shared<Backbone>(spec_, spec_.ir_channels, rng);
        add_child("backbone_rgb", backbone_rgb_);
        add_child("backbone_ir", backbone_ir_);
        neck_rgb_ = std::make_shared<Neck>(spec_, rng);
        neck_ir_ = std::make_shared<Neck>(spec_, rng);
        add_child("neck_rgb", neck_rgb_);
        add_child("neck_ir", neck_ir_);
        head_rgb_ = std::make_shared<DetectHead>(spec_, rng);
        head_ir_ = std::make_shared<DetectHead>(spec_, rng);
        add_child("head_rgb", head_rgb_);
        add_child("head_ir", head_ir_);
        break;
    }
    if (spec_.fusion != FusionMode::Late && spec_.fusion != FusionMode::Score) {
      if (spec_.fusion != FusionMode::MidToLate) {
        neck_ = std::make_shared<Neck>(spec_, rng);
        add_child("neck", neck_);
      }
      head_ = std::make_shared<DetectHead>(spec_, rng);
      add_child("head", head_);
    }
  }

  // rgb carries the primary modality; ir may be empty for Single mode.
  ForwardResult forward(const Var& rgb, const Var& ir = nullptr) {
    bool needs_ir = spec_.fusion != FusionMode::Single;
    if (needs_ir && !ir)
      throw std::invalid_argument("fusion mode '" + std::string(fusion_mode_name(spec_.fusion)) +
                                  "' requires both modalities");
    ForwardResult r;
    switch (spec_.fusion) {
      case FusionMode::Single: {
        PyramidVars p = backbone_->forward(rgb);
        finish_shared(p, r);
        break;
      }
      case FusionMode::Early: {
        PyramidVars p = backbone_->forward(ops::concat_channels({rgb, ir}));
        finish_shared(p, r);
        break;
      }
      case FusionMode::Mid:
      case FusionMode::ShareWeight: {
        Backbone* brgb = backbone_rgb_ ? backbone_rgb_.get() : backbone_.get();
        Backbone* bir = backbone_ir_ ? backbone_ir_.get() : backbone_.get();
        PyramidVars pr = brgb->forward(rgb);
        PyramidVars pi = bir->forward(ir);
        PyramidVars fused;
        fused.p2 = pr.p2;
        fused.p3 = junction_p3_->forward(pr.p3, pi.p3);
        fused.p4 = junction_p4_->forward(pr.p4, pi.p4);
        fused.p5 = junction_p5_->forward(pr.p5, pi.p5);
        finish_shared(fused, r);
        break;
      }
      case FusionMode::MidP3: {
        Var p2;
        Var s3r = stem_rgb_->forward(rgb, &p2);
        Var s3i = stem_ir_->forward(ir);
        PyramidVars p;
        p.p2 = p2;
        p.p3 = junction_p3_->forward(s3r, s3i);
        auto [p4, p5] = trunk_->forward(p.p3);
        p.p4 = p4;
        p.p5 = p5;
        finish_shared(p, r);
        break;
      }
      case FusionMode::MidToLate: {
        PyramidVars pr = backbone_rgb_->forward(rgb);
        PyramidVars pi = backbone_ir_->forward(ir);
        auto nr = neck_rgb_->forward(pr.p3, pr.p4, pr.p5);
        auto ni = neck_ir_->forward(pi.p3, pi.p4, pi.p5);
        std::array<Var, 3> fused = {junction_p3_->forward(nr[0], ni[0]),
                                    junction_p4_->forward(nr[1], ni[1]),
                                    junction_p5_->forward(nr[2], ni[2])};
        r.heads = head_->forward(fused);
        r.pyramid = {pr.p2->value, pr.p3->value, pr.p4->value, pr.p5->value};
        break;
      }
      case FusionMode::Late:
      case FusionMode::Score: {
        PyramidVars pr = backbone_rgb_->forward(rgb);
        PyramidVars pi = backbone_ir_->forward(ir);
        auto hr = head_rgb_->forward(neck_rgb_->forward(pr.p3, pr.p4, pr.p5));
        auto hi = head_ir_->forward(neck_ir_->forward(pi.p3, pi.p4, pi.p5));
        if (spec_.fusion == FusionMode::Late) {
          // fuse by averaging head logits before decode
          for (size_t s = 0; s < hr.size(); ++s) {
            ScaleOutput so;
            so.cls = ops::scale(ops::add(hr[s].cls, hi[s].cls), 0.5);
            so.reg = ops::scale(ops::add(hr[s].reg, hi[s].reg), 0.5);
            so.stride = hr[s].stride;
            r.heads.push_back(so);
          }
        } else {
          r.heads = hr;
          r.heads_secondary = hi;
        }
        r.pyramid = {pr.p2->value, pr.p3->value, pr.p4->value, pr.p5->value};
        break;
      }
    }
    return r;
  }

  const ModelSpec& spec() const { return spec_; }

  // direct stage access for graft-style wrappers (Single mode)
  Backbone& backbone_ref() { return *backbone_; }
  Neck& neck_ref() { return *neck_; }
  DetectHead& head_ref() { return *head_; }

  std::vector<std::string> junction_table() const {
    std::vector<std::string> rows;
    auto row = [&](const char* stage, int c) {
      std::ostringstream os;
      os << stage << ": concat(2x" << c << ") -> 1x1 -> " << c;
      rows.push_back(os.str());
    };
    if (junction_p3_) row(spec_.fusion == FusionMode::MidToLate ? "neck-out P3" : "P3", junction_p3_->channels());
    if (junction_p4_) row(spec_.fusion == FusionMode::MidToLate ? "neck-out P4" : "P4", junction_p4_->channels());
    if (junction_p5_) row(spec_.fusion == FusionMode::MidToLate ? "neck-out P5" : "P5", junction_p5_->channels());
    if (spec_.fusion == FusionMode::Early) rows.push_back("input: channel concat");
    if (spec_.fusion == FusionMode::Late) rows.push_back("head-out: logit average");
    if (spec_.fusion == FusionMode::Score) rows.push_back("detections: score merge");
    return rows;
  }

 private:
  void make_junctions(std::array<int, 3> cs, Rng& rng) {
    junction_p3_ = std::make_shared<FusionJunction>(cs[0], rng);
    junction_p4_ = std::make_shared<FusionJunction>(cs[1], rng);
    junction_p5_ = std::make_shared<FusionJunction>(cs[2], rng);
    add_child("junction_p3", junction_p3_);
    add_child("junction_p4", junction_p4_);
    add_child("junction_p5", junction_p5_);
  }
  void finish_shared(const PyramidVars& p, ForwardResult& r) {
    auto feats = neck_->forward(p.p3, p.p4, p.p5);
    r.heads = head_->forward(feats);
    r.pyramid = {p.p2->value, p.p3->value, p.p4->value, p.p5->value};
  }

  ModelSpec spec_;
  std::shared_ptr<Backbone> backbone_, backbone_rgb_, backbone_ir_;
  std::shared_ptr<BackboneStem> stem_rgb_, stem_ir_;
  std::shared_ptr<BackboneTrunk> trunk_;
  std::shared_ptr<FusionJunction> junction_p3_, junction_p4_, junction_p5_;
  std::shared_ptr<Neck> neck_, neck_rgb_, neck_ir_;
  std::shared_ptr<DetectHead> head_, head_rgb_, head_ir_;
};

// Cross-modality score merge: same-class pairs above the IoU gate fuse into
// one detection with the max score and the score-weighted average box;
// unmatched detections pass through; standard NMS runs on the merged pool.
inline std::vector<Detection> merge_scores(const std::vector<Detection>& dets_rgb,
                                           const std::vector<Detection>& dets_ir,
                                           double iou_merge = 0.65, double nms_iou = 0.60) {
  std::vector<Detection> rgb = dets_rgb;
  std::stable_sort(rgb.begin(), rgb.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<bool> used_ir(dets_ir.size(), false);
  std::vector<Detection> pool;
  for (const auto& a : rgb) {
    int best = -1;
    double best_iou = iou_merge;
    for (size_t j = 0; j < dets_ir.size(); ++j) {
      if (used_ir[j] || dets_ir[j].class_id != a.class_id) continue;
      double iou = det_iou(a, dets_ir[j]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(j);
      }
    }
    if (best < 0) {
      pool.push_back(a);
      continue;
    }
    used_ir[static_cast<size_t>(best)] = true;
    const Detection& b = dets_ir[static_cast<size_t>(best)];
    double ws = a.score + b.score;
    Detection m;
    m.class_id = a.class_id;
    m.score = std::max(a.score, b.score);
    m.x1 = (a.x1 * a.score + b.x1 * b.score) / ws;
    m.y1 = (a.y1 * a.score + b.y1 * b.score) / ws;
    m.x2 = (a.x2 * a.score + b.x2 * b.score) / ws;
    m.y2 = (a.y2 * a.score + b.y2 * b.score) / ws;
    pool.push_back(m);
  }
  for (size_t j = 0; j < dets_ir.size(); ++j)
    if (!used_ir[j]) pool.push_back(dets_ir[j]);
  return nms(std::move(pool), nms_iou);
}

}  // namespace rgbt
