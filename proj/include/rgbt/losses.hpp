#pragma once

#include <cmath>
#include <vector>

#include "rgbt/detector.hpp"

namespace rgbt {

struct LossWeights {
  double lambda_dfl = 1.0;
  double lambda_cls = 0.5;
  double lambda_loc = 0.05;
};

inline double total_loss(double l_dfl, double l_cls, double l_loc, const LossWeights& w) {
  if (w.lambda_dfl < 0 || w.lambda_cls < 0 || w.lambda_loc < 0)
    throw std::invalid_argument("loss weights must be nonnegative");
  return w.lambda_dfl * l_dfl + w.lambda_cls * l_cls + w.lambda_loc * l_loc;
}

// ---------- plain (scalar) reference forms ----------

// single-element BCE on a probability
inline double bce_prob(double p, double t) {
  return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

struct BoxXYXY {
  double x1, y1, x2, y2;
  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double area() const { return w() * h(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

struct CiouTerms {
  double iou, rho2, c2, v, alpha;
};

inline CiouTerms ciou_terms(const BoxXYXY& pred, const BoxXYXY& gt) {
  if (pred.area() <= 0 || gt.area() <= 0)
    throw std::domain_error("ciou: boxes must have positive area");
  CiouTerms t{};
  t.iou = box_iou(pred.x1, pred.y1, pred.x2, pred.y2, gt.x1, gt.y1, gt.x2, gt.y2);
  double dx = pred.cx() - gt.cx(), dy = pred.cy() - gt.cy();
  t.rho2 = dx * dx + dy * dy;
  double cw = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
  double ch = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
  t.c2 = cw * cw + ch * ch;
  double da = std::atan(gt.w() / gt.h()) - std::atan(pred.w() / pred.h());
  t.v = 4.0 / (M_PI * M_PI) * da * da;
  t.alpha = t.iou < 1.0 || t.v > 0 ? t.v / (1.0 - t.iou + t.v) : 0.0;
  return t;
}

inline double ciou_loss(const BoxXYXY& pred, const BoxXYXY& gt) {
  CiouTerms t = ciou_terms(pred, gt);
  return 1.0 - t.iou + t.rho2 / t.c2 + t.alpha * t.v;
}

// DFL of one side given the full softmax distribution S and target y.
inline double dfl_pair(double y, const std::vector<double>& s) {
  int r = static_cast<int>(s.size());
  if (y < 0.0 || y > r - 1) throw std::domain_error("dfl: target outside [0, reg_max-1]");
  int yl = static_cast<int>(std::floor(y));
  int yr = std::min(yl + 1, r - 1);
  double wl = yl + 1 - y, wr = y - yl;
  if (yl == r - 1) { wl = 1.0; wr = 0.0; }
  double out = 0.0;
  if (wl > 0) out -= wl * std::log(s[static_cast<size_t>(yl)]);
  if (wr > 0) out -= wr * std::log(s[static_cast<size_t>(yr)]);
  return out;
}

// ---------- target assignment ----------

struct PixelBox {
  int class_id = 0;
  BoxXYXY box{};
};

struct AnchorAssignment {
  int scale;       // 0,1,2 for strides 8,16,32
  int image;       // batch index
  int gy, gx;      // grid cell
  int class_id;
  int gt_index;
  double l, t, r, b;  // distance targets in stride units, clipped
  BoxXYXY gt;
};

struct AssignmentResult {
  std::vector<AnchorAssignment> positives;
};

// Center-prior rule: an anchor point is positive iff it lies inside a ground
// truth box and within 2.5 strides (Chebyshev) of the box center. Ties go to
// the smallest box area, then the lowest ground-truth index.
inline AssignmentResult assign_targets(const std::vector<PixelBox>& gts,
                                       const std::array<int, 3>& strides,
                                       const std::array<std::pair<int, int>, 3>& grids,
                                       int reg_max, int image_index = 0) {
  AssignmentResult res;
  for (int s = 0; s < 3; ++s) {
    int stride = strides[static_cast<size_t>(s)];
    auto [gh, gw] = grids[static_cast<size_t>(s)];
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        double ax = (gx + 0.5) * stride, ay = (gy + 0.5) * stride;
        int best = -1;
        double best_area = 0.0;
        for (size_t i = 0; i < gts.size(); ++i) {
          const BoxXYXY& b = gts[i].box;
          if (ax <= b.x1 || ax >= b.x2 || ay <= b.y1 || ay >= b.y2) continue;
          if (std::max(std::abs(ax - b.cx()), std::abs(ay - b.cy())) > 2.5 * stride) continue;
          if (best < 0 || b.area() < best_area) {
            best = static_cast<int>(i);
            best_area = b.area();
          }
        }
        if (best < 0) continue;
        const BoxXYXY& b = gts[static_cast<size_t>(best)].box;
        double cap = reg_max - 1.01;  // valid right-neighbor bin required
        AnchorAssignment a;
        a.scale = s;
        a.image = image_index;
        a.gy = gy;
        a.gx = gx;
        a.class_id = gts[static_cast<size_t>(best)].class_id;
        a.gt_index = best;
        a.l = std::min((ax - b.x1) / stride, cap);
        a.t = std::min((ay - b.y1) / stride, cap);
        a.r = std::min((b.x2 - ax) / stride, cap);
        a.b = std::min((b.y2 - ay) / stride, cap);
        a.gt = b;
        res.positives.push_back(a);
      }
  }
  return res;
}

// ---------- autograd loss pipeline ----------

// CIoU on [M]-shaped coordinate columns, built from autograd primitives so
// the full gradient (including the alpha term) flows.
inline Var ciou_vec(const Var& px1, const Var& py1, const Var& px2, const Var& py2,
                    const std::vector<BoxXYXY>& gt) {
  int m = px1->value.dim(0);
  Tensor gx1({m}), gy1({m}), gx2({m}), gy2({m}), gar({m}), gcx({m}), gcy({m}), gat({m});
  for (int i = 0; i < m; ++i) {
    const BoxXYXY& b = gt[static_cast<size_t>(i)];
    gx1[i] = b.x1; gy1[i] = b.y1; gx2[i] = b.x2; gy2[i] = b.y2;
    gar[i] = b.area(); gcx[i] = b.cx(); gcy[i] = b.cy();
    gat[i] = std::atan(b.w() / b.h());
  }
  using namespace ops;
  Var cgx1 = make_var(gx1), cgy1 = make_var(gy1), cgx2 = make_var(gx2), cgy2 = make_var(gy2);
  Var iw = clamp_min(sub(vmin(px2, cgx2), vmax(px1, cgx1)), 0.0);
  Var ih = clamp_min(sub(vmin(py2, cgy2), vmax(py1, cgy1)), 0.0);
  Var inter = mul(iw, ih);
  Var area_p = mul(sub(px2, px1), sub(py2, py1));
  Var uni = sub(add(area_p, make_var(gar)), inter);
  Var iou = div(inter, uni);
  Var dx = sub(scale(add(px1, px2), 0.5), make_var(gcx));
  Var dy = sub(scale(add(py1, py2), 0.5), make_var(gcy));
  Var rho2 = add(square(dx), square(dy));
  Var cw = sub(vmax(px2, cgx2), vmin(px1, cgx1));
  Var ch = sub(vmax(py2, cgy2), vmin(py1, cgy1));
  Var c2 = add(square(cw), square(ch));
  Var da = sub(make_var(gat), atan_of(div(sub(px2, px1), sub(py2, py1))));
  Var v = scale(square(da), 4.0 / (M_PI * M_PI));
  Var one = make_var(Tensor({m}, 1.0));
  Var alpha = div(v, add(sub(one, iou), v));
  return add(add(sub(one, iou), div(rho2, c2)), mul(alpha, v));
}

struct LossOutput {
  Var total;       // scalar graph node
  double dfl = 0.0, cls = 0.0, loc = 0.0, all = 0.0;
  int num_positive = 0;
};

// Full Eq-style loss over a batch: BCE classification over every anchor and
// class, DFL and CIoU over positive anchors only.
inline LossOutput compute_detection_loss(const HeadOutput& heads,
                                         const std::vector<std::vector<PixelBox>>& gt_per_image,
                                         const ModelSpec& spec, const LossWeights& w) {
  int batch = heads[0].cls->value.shape[0];
  std::array<std::pair<int, int>, 3> grids;
  for (int s = 0; s < 3; ++s)
    grids[static_cast<size_t>(s)] = {heads[static_cast<size_t>(s)].cls->value.shape[2],
                                     heads[static_cast<size_t>(s)].cls->value.shape[3]};

  std::vector<AnchorAssignment> positives;
  for (int i = 0; i < batch; ++i) {
    AssignmentResult r = assign_targets(gt_per_image[static_cast<size_t>(i)], spec.strides, grids,
                                        spec.reg_max, i);
    positives.insert(positives.end(), r.positives.begin(), r.positives.end());
  }

  // classification: mean over all anchors x classes, weighted across scales
  // by element count so the combined value is the global mean
  int64_t total_elems = 0;
  for (const auto& so : heads) total_elems += so.cls->value.numel();
  Var l_cls;
  for (int s = 0; s < 3; ++s) {
    const auto& so = heads[static_cast<size_t>(s)];
    Tensor target(so.cls->value.shape);
    for (const auto& a : positives)
      if (a.scale == s) target.at4(a.image, a.class_id, a.gy, a.gx) = 1.0;
    Var part = ops::scale(ops::bce_with_logits_mean(so.cls, target),
                          static_cast<double>(so.cls->value.numel()) / static_cast<double>(total_elems));
    l_cls = l_cls ? ops::add(l_cls, part) : part;
  }

  Var l_dfl, l_loc;
  int m = static_cast<int>(positives.size());
  if (m > 0) {
    // gather positive reg logits scale by scale, then merge
    std::vector<Var> reg_rows;
    std::vector<AnchorAssignment> ordered;
    for (int s = 0; s < 3; ++s) {
      std::vector<ops::AnchorIndex> idx;
      for (const auto& a : positives)
        if (a.scale == s) {
          idx.push_back({a.image, a.gy, a.gx});
          ordered.push_back(a);
        }
      if (!idx.empty())
        reg_rows.push_back(ops::gather_anchors(heads[static_cast<size_t>(s)].reg, idx));
    }
    Var reg;  // [M, 4*reg_max]
    if (reg_rows.size() == 1) {
      reg = reg_rows[0];
    } else {
      // stack along rows via reshape+concat on a channel-style axis
      std::vector<Var> as_maps;
      for (auto& rr : reg_rows)
        as_maps.push_back(ops::reshape(rr, {1, rr->value.dim(0), rr->value.dim(1), 1}));
      // concat over "channel" = row axis
      Var cat = ops::concat_channels(as_maps);
      reg = ops::reshape(cat, {m, 4 * spec.reg_max});
    }
    Var reg3 = ops::reshape(reg, {m, 4, spec.reg_max});
    Tensor targets({m, 4});
    std::vector<BoxXYXY> gts(static_cast<size_t>(m));
    Tensor ax({m}), ay({m}), strd({m});
    for (int i = 0; i < m; ++i) {
      const auto& a = ordered[static_cast<size_t>(i)];
      targets.at2(i, 0) = a.l;
      targets.at2(i, 1) = a.t;
      targets.at2(i, 2) = a.r;
      targets.at2(i, 3) = a.b;
      gts[static_cast<size_t>(i)] = a.gt;
      int stride = spec.strides[static_cast<size_t>(a.scale)];
      ax[i] = (a.gx + 0.5) * stride;
      ay[i] = (a.gy + 0.5) * stride;
      strd[i] = stride;
    }
    l_dfl = ops::dfl_mean(reg3, targets);

    Var expect = ops::dist_expectation(reg3);  // [M,4] stride units
    Var st = make_var(strd);
    Var l = ops::mul(ops::col(expect, 0), st);
    Var t = ops::mul(ops::col(expect, 1), st);
    Var r = ops::mul(ops::col(expect, 2), st);
    Var b = ops::mul(ops::col(expect, 3), st);
    Var vax = make_var(ax), vay = make_var(ay);
    Var px1 = ops::sub(vax, l), py1 = ops::sub(vay, t);
    Var px2 = ops::add(vax, r), py2 = ops::add(vay, b);
    l_loc = ops::mean_all(ciou_vec(px1, py1, px2, py2, gts));
  } else {
    l_dfl = make_var(Tensor({1}, 0.0));
    l_loc = make_var(Tensor({1}, 0.0));
  }

  LossOutput out;
  out.dfl = l_dfl->value[0];
  out.cls = l_cls->value[0];
  out.loc = l_loc->value[0];
  out.num_positive = m;
  out.total = ops::add(ops::add(ops::scale(l_dfl, w.lambda_dfl), ops::scale(l_cls, w.lambda_cls)),
                       ops::scale(l_loc, w.lambda_loc));
  out.all = out.total->value[0];
  return out;
}

}  // namespace rgbt
