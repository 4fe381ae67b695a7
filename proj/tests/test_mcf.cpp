#include <catch2/catch_amalgamated.hpp>

#include "rgbt/losses.hpp"
#include "rgbt/mcf.hpp"
#include "rgbt/optim.hpp"

using namespace rgbt;

namespace {

Var random_image(int c, int hw, uint64_t seed) {
  Rng rng(seed);
  Tensor t({1, c, hw, hw});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return make_var(std::move(t));
}

std::shared_ptr<FusedDetector> make_base(uint64_t seed) {
  ModelSpec spec;
  spec.scale = 'n';
  spec.num_classes = 2;
  spec.fusion = FusionMode::Single;
  return std::make_shared<FusedDetector>(spec, seed);
}

double max_head_diff(const HeadOutput& a, const HeadOutput& b) {
  double m = 0.0;
  for (size_t s = 0; s < a.size(); ++s) {
    for (int64_t i = 0; i < a[s].cls->value.numel(); ++i)
      m = std::max(m, std::abs(a[s].cls->value[i] - b[s].cls->value[i]));
    for (int64_t i = 0; i < a[s].reg->value.numel(); ++i)
      m = std::max(m, std::abs(a[s].reg->value[i] - b[s].reg->value[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("graft is an exact no-op at construction") {
  auto base = make_base(5);
  McfModel mcf(base, /*aux_channels=*/1, 77);
  mcf.set_training(false);
  for (int trial = 0; trial < 10; ++trial) {
    Var rgb = random_image(3, 64, 100 + static_cast<uint64_t>(trial));
    Var aux = random_image(1, 64, 200 + static_cast<uint64_t>(trial));
    auto grafted = mcf.forward(rgb, aux);
    auto plain = base->forward(rgb);
    CHECK(max_head_diff(grafted.heads, plain.heads) <= 1e-6);
  }
}

TEST_CASE("zero convs start at exactly zero") {
  McfModel mcf(make_base(1), 1, 2);
  for (auto& zc : mcf.zero_convs()) {
    for (double w : zc->weight_->value.v) CHECK(w == 0.0);
    for (double b : zc->bias_->value.v) CHECK(b == 0.0);
  }
}

TEST_CASE("freeze report partitions parameters: aux branch and zero convs train") {
  McfModel mcf(make_base(9), 1, 3);
  FreezeReport rep = mcf.freeze_report();
  CHECK(!rep.frozen_names.empty());
  CHECK(!rep.trainable_names.empty());
  for (const auto& n : rep.frozen_names) CHECK(n.rfind("base.", 0) == 0);
  for (const auto& n : rep.trainable_names) {
    bool ok = n.rfind("aux.", 0) == 0 || n.rfind("zero_p", 0) == 0;
    CHECK(ok);
  }
  CHECK(rep.frozen_count + rep.trainable_count == mcf.parameter_count());
  // every name lands in exactly one bucket
  CHECK(rep.frozen_names.size() + rep.trainable_names.size() ==
        [&] {
          std::vector<std::pair<std::string, Var>> ps;
          mcf.named_params(ps);
          return ps.size();
        }());
}

TEST_CASE("total size decomposes into base + aux backbone + zero convs") {
  auto base = make_base(4);
  int64_t base_n = base->parameter_count();
  McfModel mcf(base, 3, 6);
  int64_t zeros = 0;
  for (auto& zc : mcf.zero_convs()) zeros += zc->parameter_count();
  CHECK(mcf.parameter_count() == base_n + mcf.aux_branch()->parameter_count() + zeros);
}

TEST_CASE("fine-tuning leaves frozen tensors bitwise unchanged and moves a zero conv") {
  auto base = make_base(13);
  McfModel mcf(base, 1, 14);
  mcf.set_training(true);

  FreezeReport rep = mcf.freeze_report();
  std::vector<std::pair<std::string, Var>> ps;
  mcf.named_params(ps);
  std::map<std::string, std::vector<double>> before;
  for (auto& [name, v] : ps) before[name] = v->value.v;

  auto params = trainable_params(mcf);
  OptimizerPreset preset = optimizer_preset("sgd");
  SgdOptimizer opt(params, preset);
  std::vector<std::vector<PixelBox>> gts = {{{1, {8.0, 8.0, 40.0, 48.0}}}};
  LossWeights w;
  Rng rng(777);
  for (int step = 0; step < 5; ++step) {
    Var rgb = random_image(3, 64, rng.next_u64());
    Var aux = random_image(1, 64, rng.next_u64());
    auto r = mcf.forward(rgb, aux);
    LossOutput loss = compute_detection_loss(r.heads, gts, mcf.spec(), w);
    opt.zero_grad();
    backward(loss.total);
    opt.step({0.01, 0.01, 0.9});
  }

  for (const auto& name : rep.frozen_names) {
    auto it = std::find_if(ps.begin(), ps.end(), [&](auto& p) { return p.first == name; });
    REQUIRE(it != ps.end());
    CHECK(it->second->value.v == before[name]);
  }
  bool any_nonzero = false;
  for (auto& zc : mcf.zero_convs())
    for (double v : zc->weight_->value.v)
      if (v != 0.0) any_nonzero = true;
  CHECK(any_nonzero);
}

TEST_CASE("optimizer rejects frozen parameters") {
  auto base = make_base(2);
  McfModel mcf(base, 1, 1);
  std::vector<std::pair<std::string, Var>> ps;
  mcf.named_params(ps);
  std::vector<Var> all;
  for (auto& [n, v] : ps) all.push_back(v);
  CHECK_THROWS_AS(SgdOptimizer(all, optimizer_preset("sgd")), std::invalid_argument);
}

TEST_CASE("loss gradient through the graft matches finite differences") {
  auto base = make_base(21);
  McfModel mcf(base, 1, 22);
  mcf.set_training(false);  // frozen running stats: forward is a pure function
  // move off the zero-init point so gradients into the aux branch are alive
  Rng jig(55);
  for (auto& zc : mcf.zero_convs())
    for (double& v : zc->weight_->value.v) v = jig.normal(0.0, 0.05);
  Var rgb = random_image(3, 64, 900);
  Var aux = random_image(1, 64, 901);
  std::vector<std::vector<PixelBox>> gts = {{{0, {12.0, 10.0, 52.0, 44.0}}}};
  LossWeights w;

  auto loss_value = [&]() {
    auto r = mcf.forward(rgb, aux);
    return compute_detection_loss(r.heads, gts, mcf.spec(), w);
  };

  LossOutput out = loss_value();
  std::vector<std::pair<std::string, Var>> ps;
  mcf.named_params(ps);
  for (auto& [n, v] : ps) v->grad.fill(0.0);
  backward(out.total);

  // the zero convs are the bottleneck every aux gradient flows through; check
  // a spread of their weights plus an aux-backbone weight
  auto zcs = mcf.zero_convs();
  Rng pick(31);
  double h = 1e-5;
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Var probe = zcs[static_cast<size_t>(trial % 3)]->weight_;
    if (trial >= 18) {
      for (auto& [n, v] : ps)
        if (n == "aux.s1.conv.weight") probe = v;
    }
    int k = pick.uniform_int(0, static_cast<int>(probe->value.numel()) - 1);
    double keep = probe->value[k];
    probe->value[k] = keep + h;
    double lp = loss_value().total->value[0];
    probe->value[k] = keep - h;
    double lm = loss_value().total->value[0];
    probe->value[k] = keep;
    double fd = (lp - lm) / (2 * h);
    double an = probe->grad[k];
    CHECK(std::abs(fd - an) <= 1e-4 * std::max({1.0, std::abs(fd), std::abs(an)}));
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("mcf refuses a fused base") {
  ModelSpec spec;
  spec.scale = 'n';
  spec.num_classes = 2;
  spec.fusion = FusionMode::Mid;
  auto fused = std::make_shared<FusedDetector>(spec, 0);
  CHECK_THROWS_AS(McfModel(fused, 1, 0), std::invalid_argument);
}
