#pragma once

#include <memory>

#include "rgbt/fusion.hpp"

namespace rgbt {

struct FreezeReport {
  std::vector<std::string> frozen_names;
  std::vector<std::string> trainable_names;
  int64_t frozen_count = 0;
  int64_t trainable_count = 0;
};

// Multispectral controllable fine-tuning: a frozen pretrained single-modality
// detector plus a trainable auxiliary backbone grafted in through
// zero-initialized 1x1 convolutions at P3/P4/P5. At construction every zero
// conv is exactly zero, so the model output equals the frozen base output.
class McfModel : public Module {
 public:
  // base must be a Single-mode detector; it is frozen here.
  McfModel(std::shared_ptr<FusedDetector> base, int aux_channels, uint64_t seed)
      : base_(std::move(base)), spec_(base_->spec()) {
    if (spec_.fusion != FusionMode::Single)
      throw std::invalid_argument("MCF base must be a single-modality detector");
    base_->set_frozen(true);
    add_child("base", base_);
    Rng rng(seed ^ 0xA5C3ULL);
    aux_ = std::make_shared<Backbone>(spec_, aux_channels, rng);
    add_child("aux", aux_);
    auto c = spec_.channels();
    zero_p3_ = std::make_shared<Conv2dLayer>(c[2], c[2], 1, 1, rng, /*zero_init=*/true);
    zero_p4_ = std::make_shared<Conv2dLayer>(c[3], c[3], 1, 1, rng, /*zero_init=*/true);
    zero_p5_ = std::make_shared<Conv2dLayer>(c[4], c[4], 1, 1, rng, /*zero_init=*/true);
    add_child("zero_p3", zero_p3_);
    add_child("zero_p4", zero_p4_);
    add_child("zero_p5", zero_p5_);
  }

  // primary feeds the frozen base, aux the trainable branch
  ForwardResult forward(const Var& primary, const Var& aux) {
    PyramidVars pb = base_->backbone_ref().forward(primary);
    PyramidVars pa = aux_->forward(aux);
    PyramidVars fused;
    fused.p2 = pb.p2;
    fused.p3 = ops::add(pb.p3, zero_p3_->forward(pa.p3));
    fused.p4 = ops::add(pb.p4, zero_p4_->forward(pa.p4));
    fused.p5 = ops::add(pb.p5, zero_p5_->forward(pa.p5));
    ForwardResult r;
    auto feats = base_->neck_ref().forward(fused.p3, fused.p4, fused.p5);
    r.heads = base_->head_ref().forward(feats);
    r.pyramid = {fused.p2->value, fused.p3->value, fused.p4->value, fused.p5->value};
    return r;
  }

  FreezeReport freeze_report() const {
    FreezeReport rep;
    std::vector<std::pair<std::string, Var>> ps;
    named_params(ps);
    for (const auto& [name, v] : ps) {
      if (v->requires_grad) {
        rep.trainable_names.push_back(name);
        rep.trainable_count += v->value.numel();
      } else {
        rep.frozen_names.push_back(name);
        rep.frozen_count += v->value.numel();
      }
    }
    return rep;
  }

  const ModelSpec& spec() const { return spec_; }
  std::shared_ptr<FusedDetector> base() { return base_; }
  std::shared_ptr<Backbone> aux_branch() { return aux_; }
  std::array<std::shared_ptr<Conv2dLayer>, 3> zero_convs() { return {zero_p3_, zero_p4_, zero_p5_}; }

 private:
  std::shared_ptr<FusedDetector> base_;
  ModelSpec spec_;
  std::shared_ptr<Backbone> aux_;
  std::shared_ptr<Conv2dLayer> zero_p3_, zero_p4_, zero_p5_;
};

}  // namespace rgbt
