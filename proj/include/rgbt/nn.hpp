#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rgbt/ops.hpp"
#include "rgbt/rng.hpp"

namespace rgbt {

// Base class for parameterized graph pieces. Parameters are Vars with
// hierarchical names; buffers (BN running stats) are plain tensors.
class Module {
 public:
  virtual ~Module() = default;

  Var add_param(const std::string& name, Tensor init) {
    Var v = make_var(std::move(init), true);
    v->name = name;
    params_[name] = v;
    return v;
  }
  Tensor* add_buffer(const std::string& name, Tensor init) {
    buffers_[name] = std::move(init);
    return &buffers_[name];
  }
  void add_child(const std::string& name, std::shared_ptr<Module> m) {
    children_.push_back({name, std::move(m)});
  }

  void named_params(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix = "") const {
    for (const auto& [k, v] : params_) out.push_back({prefix + k, v});
    for (const auto& [k, m] : children_) m->named_params(out, prefix + k + ".");
  }
  void named_buffers(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix = "") {
    for (auto& [k, t] : buffers_) out.push_back({prefix + k, &t});
    for (const auto& [k, m] : children_) m->named_buffers(out, prefix + k + ".");
  }

  void set_training(bool t) {
    training_ = t;
    for (auto& [k, m] : children_) m->set_training(t);
  }
  // Frozen modules never update parameters or BN statistics and always
  // normalize with the running stats.
  void set_frozen(bool f) {
    frozen_ = f;
    for (auto& [k, v] : params_) v->requires_grad = !f;
    for (auto& [k, m] : children_) m->set_frozen(f);
  }
  bool training() const { return training_; }
  bool frozen() const { return frozen_; }

  int64_t parameter_count() const {
    std::vector<std::pair<std::string, Var>> ps;
    named_params(ps);
    int64_t n = 0;
    for (const auto& [k, v] : ps) n += v->value.numel();
    return n;
  }

 protected:
  std::map<std::string, Var> params_;
  std::map<std::string, Tensor> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
  bool training_ = false;
  bool frozen_ = false;
};

inline Tensor kaiming_conv_init(int cout, int cin, int k, Rng& rng) {
  Tensor w({cout, cin, k, k});
  double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, stddev);
  return w;
}

// Plain 2D convolution with bias, no normalization or activation.
class Conv2dLayer : public Module {
 public:
  Conv2dLayer(int cin, int cout, int k, int stride, Rng& rng, bool zero_init = false)
      : stride_(stride), pad_(k / 2) {
    Tensor w = zero_init ? Tensor({cout, cin, k, k}) : kaiming_conv_init(cout, cin, k, rng);
    weight_ = add_param("weight", std::move(w));
    bias_ = add_param("bias", Tensor({cout}));
  }
  Var forward(const Var& x) {
    return ops::add_bias(ops::conv2d(x, weight_, stride_, pad_), bias_);
  }
  Var weight_, bias_;

 private:
  int stride_, pad_;
};

// Conv block: conv2d (no bias) + batch norm + SiLU.
class ConvBlock : public Module {
 public:
  ConvBlock(int cin, int cout, int k, int stride, Rng& rng, bool act = true)
      : stride_(stride), pad_(k / 2), act_(act) {
    weight_ = add_param("conv.weight", kaiming_conv_init(cout, cin, k, rng));
    gamma_ = add_param("bn.weight", Tensor({cout}, 1.0));
    beta_ = add_param("bn.bias", Tensor({cout}));
    rm_ = add_buffer("bn.running_mean", Tensor({cout}));
    rv_ = add_buffer("bn.running_var", Tensor({cout}, 1.0));
  }
  Var forward(const Var& x) {
    Var y = ops::conv2d(x, weight_, stride_, pad_);
    bool batch_stats = training_ && !frozen_;
    y = ops::batchnorm(y, gamma_, beta_, *rm_, *rv_, batch_stats, batch_stats);
    return act_ ? ops::silu(y) : y;
  }
  Var weight_, gamma_, beta_;
  Tensor *rm_, *rv_;

 private:
  int stride_, pad_;
  bool act_;
};

// Residual bottleneck on c channels: two 3x3 conv blocks plus skip.
class Bottleneck : public Module {
 public:
  Bottleneck(int c, Rng& rng) {
    cv1_ = std::make_shared<ConvBlock>(c, c, 3, 1, rng);
    cv2_ = std::make_shared<ConvBlock>(c, c, 3, 1, rng);
    add_child("cv1", cv1_);
    add_child("cv2", cv2_);
  }
  Var forward(const Var& x) { return ops::add(x, cv2_->forward(cv1_->forward(x))); }

 private:
  std::shared_ptr<ConvBlock> cv1_, cv2_;
};

// Split-bottleneck stage block (C3k2 style): 1x1 in, half the channels run
// through n bottlenecks, all intermediate halves concatenated, 1x1 out.
class C3k2Block : public Module {
 public:
  C3k2Block(int cin, int cout, int n, Rng& rng) : n_(n), ch_(cout / 2) {
    cv1_ = std::make_shared<ConvBlock>(cin, cout, 1, 1, rng);
    add_child("cv1", cv1_);
    for (int i = 0; i < n; ++i) {
      auto b = std::make_shared<Bottleneck>(ch_, rng);
      add_child("m" + std::to_string(i), b);
      blocks_.push_back(b);
    }
    cv2_ = std::make_shared<ConvBlock>(ch_ * (2 + n), cout, 1, 1, rng);
    add_child("cv2", cv2_);
  }
  Var forward(const Var& x) {
    Var y = cv1_->forward(x);
    std::vector<Var> parts = {ops::slice_channels(y, 0, ch_), ops::slice_channels(y, ch_, 2 * ch_)};
    for (auto& b : blocks_) parts.push_back(b->forward(parts.back()));
    return cv2_->forward(ops::concat_channels(parts));
  }

 private:
  int n_, ch_;
  std::shared_ptr<ConvBlock> cv1_, cv2_;
  std::vector<std::shared_ptr<Bottleneck>> blocks_;
};

// Spatial pyramid pooling (fast): 1x1 reduce, three chained 5x5 maxpools,
// concat, 1x1 out.
class SPPF : public Module {
 public:
  SPPF(int c, Rng& rng) : ch_(c / 2) {
    cv1_ = std::make_shared<ConvBlock>(c, ch_, 1, 1, rng);
    cv2_ = std::make_shared<ConvBlock>(ch_ * 4, c, 1, 1, rng);
    add_child("cv1", cv1_);
    add_child("cv2", cv2_);
  }
  Var forward(const Var& x) {
    Var y = cv1_->forward(x);
    Var p1 = ops::maxpool2d(y, 5, 1, 2);
    Var p2 = ops::maxpool2d(p1, 5, 1, 2);
    Var p3 = ops::maxpool2d(p2, 5, 1, 2);
    return cv2_->forward(ops::concat_channels({y, p1, p2, p3}));
  }

 private:
  int ch_;
  std::shared_ptr<ConvBlock> cv1_, cv2_;
};

}  // namespace rgbt
