#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rgbt/nn.hpp"

namespace rgbt {

struct OptimizerPreset {
  std::string name;
  double lr0 = 0.01;
  double warmup_epochs = 3.0;
  double warmup_momentum = 0.8;
  double warmup_bias_lr = 0.1;
  double momentum = 0.937;     // nominal momentum after warmup
  double weight_decay = 5e-4;  // applied to conv weights only
};

inline OptimizerPreset optimizer_preset(const std::string& name) {
  if (name == "sgd-init") return {"sgd-init", 0.01, 3.0, 0.8, 0.1};
  if (name == "sgd") return {"sgd", 0.01, 1.0, 0.1, 0.01};
  if (name == "adam") return {"adam", 0.001, 1.0, 0.1, 0.01};
  throw std::invalid_argument("unknown optimizer preset: " + name);
}

struct ScheduleState {
  double lr_weights = 0.0;
  double lr_bias = 0.0;
  double momentum = 0.0;
};

// Linear warmup over [0, total_warmup_iters]: weight lr 0 -> lr0, bias lr
// warmup_bias_lr -> lr0, momentum warmup_momentum -> nominal.
inline ScheduleState warmup_schedule(int64_t iteration, int64_t total_warmup_iters,
                                     const OptimizerPreset& p) {
  if (total_warmup_iters < 1) throw std::invalid_argument("total_warmup_iters must be >= 1");
  double t = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(total_warmup_iters));
  ScheduleState s;
  s.lr_weights = t * p.lr0;
  s.lr_bias = p.warmup_bias_lr + t * (p.lr0 - p.warmup_bias_lr);
  s.momentum = p.warmup_momentum + t * (p.momentum - p.warmup_momentum);
  return s;
}

// Full schedule: warmup, then linear decay of both lrs to 0.01*lr0 at the
// final iteration. Momentum stays nominal after warmup.
inline ScheduleState schedule_at(int64_t iteration, int64_t total_warmup_iters,
                                 int64_t total_iters, const OptimizerPreset& p) {
  if (iteration < total_warmup_iters) return warmup_schedule(iteration, total_warmup_iters, p);
  double lr = p.lr0;
  if (total_iters > total_warmup_iters) {
    double t = static_cast<double>(iteration - total_warmup_iters) /
               static_cast<double>(total_iters - total_warmup_iters);
    t = std::min(1.0, t);
    lr = p.lr0 * (1.0 - 0.99 * t);
  }
  return {lr, lr, p.momentum};
}

inline std::vector<Var> trainable_params(Module& m) {
  std::vector<std::pair<std::string, Var>> ps;
  m.named_params(ps);
  std::vector<Var> out;
  for (auto& [name, v] : ps)
    if (v->requires_grad) out.push_back(v);
  return out;
}

// Base optimizer: two parameter groups. Conv weights (4D) take weight decay;
// biases and normalization affine parameters (1D) do not and use the bias lr
// during warmup.
class Optimizer {
 public:
  explicit Optimizer(const std::vector<Var>& params, const OptimizerPreset& preset)
      : preset_(preset) {
    if (params.empty()) throw std::invalid_argument("optimizer: empty parameter list");
    for (const Var& p : params) {
      if (!p->requires_grad)
        throw std::invalid_argument("optimizer configured over frozen parameter" +
                                    (p->name.empty() ? std::string() : ": " + p->name));
      if (p->grad.v.empty()) p->grad = Tensor(p->value.shape);
      (p->value.ndim() >= 2 ? weights_ : biases_).push_back(p);
    }
  }
  virtual ~Optimizer() = default;

  void zero_grad() {
    for (auto& p : weights_) p->grad.fill(0.0);
    for (auto& p : biases_) p->grad.fill(0.0);
  }

  virtual void step(const ScheduleState& s) = 0;

  const OptimizerPreset& preset() const { return preset_; }

 protected:
  OptimizerPreset preset_;
  std::vector<Var> weights_, biases_;
};

class SgdOptimizer : public Optimizer {
 public:
  SgdOptimizer(const std::vector<Var>& params, const OptimizerPreset& preset)
      : Optimizer(params, preset) {
    for (auto& p : weights_) vel_w_.emplace_back(p->value.shape);
    for (auto& p : biases_) vel_b_.emplace_back(p->value.shape);
  }

  void step(const ScheduleState& s) override {
    update_group(weights_, vel_w_, s.lr_weights, s.momentum, preset_.weight_decay);
    update_group(biases_, vel_b_, s.lr_bias, s.momentum, 0.0);
  }

 private:
  static void update_group(std::vector<Var>& ps, std::vector<Tensor>& vel, double lr, double mu,
                           double wd) {
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i]->value.v;
      auto& g = ps[i]->grad.v;
      auto& v = vel[i].v;
      for (size_t k = 0; k < p.size(); ++k) {
        double grad = g[k] + wd * p[k];
        v[k] = mu * v[k] + grad;
        p[k] -= lr * v[k];
      }
    }
  }
  std::vector<Tensor> vel_w_, vel_b_;
};

class AdamOptimizer : public Optimizer {
 public:
  AdamOptimizer(const std::vector<Var>& params, const OptimizerPreset& preset, double beta2 = 0.999,
                double eps = 1e-8)
      : Optimizer(params, preset), beta2_(beta2), eps_(eps) {
    for (auto& p : weights_) {
      m_w_.emplace_back(p->value.shape);
      v_w_.emplace_back(p->value.shape);
    }
    for (auto& p : biases_) {
      m_b_.emplace_back(p->value.shape);
      v_b_.emplace_back(p->value.shape);
    }
  }

  void step(const ScheduleState& s) override {
    ++t_;
    update_group(weights_, m_w_, v_w_, s.lr_weights, s.momentum, preset_.weight_decay);
    update_group(biases_, m_b_, v_b_, s.lr_bias, s.momentum, 0.0);
  }

 private:
  void update_group(std::vector<Var>& ps, std::vector<Tensor>& ms, std::vector<Tensor>& vs,
                    double lr, double beta1, double wd) {
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i]->value.v;
      auto& g = ps[i]->grad.v;
      auto& m = ms[i].v;
      auto& v = vs[i].v;
      for (size_t k = 0; k < p.size(); ++k) {
        double grad = g[k] + wd * p[k];
        m[k] = beta1 * m[k] + (1.0 - beta1) * grad;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad * grad;
        p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
    }
  }
  double beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_w_, v_w_, m_b_, v_b_;
};

inline std::unique_ptr<Optimizer> make_optimizer(const std::vector<Var>& params,
                                                 const OptimizerPreset& preset) {
  if (preset.name == "adam") return std::make_unique<AdamOptimizer>(params, preset);
  return std::make_unique<SgdOptimizer>(params, preset);
}

}  // namespace rgbt
