#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rgbt/detector.hpp"
#include "rgbt/losses.hpp"

namespace rgbt {

// Detection tagged with its image for dataset-level evaluation.
struct TaggedDetection {
  int image = 0;
  Detection det;
};

struct MatchFlags {
  std::vector<int> tp;       // aligned with detections sorted by descending score
  std::vector<double> score; // scores in the same order
  int n_gt = 0;
};

// Greedy matching per the COCO-style protocol: detections in descending score
// order each claim the unmatched same-class GT with the highest IoU >= thresh.
inline MatchFlags match_detections(std::vector<TaggedDetection> dets,
                                   const std::vector<std::vector<PixelBox>>& gts_per_image,
                                   int class_id, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(), [](const TaggedDetection& a, const TaggedDetection& b) {
    return a.det.score > b.det.score;
  });
  MatchFlags out;
  std::map<std::pair<int, int>, bool> used;  // (image, gt index) -> claimed
  for (size_t img = 0; img < gts_per_image.size(); ++img)
    for (size_t g = 0; g < gts_per_image[img].size(); ++g)
      if (gts_per_image[img][g].class_id == class_id) ++out.n_gt;
  for (const auto& td : dets) {
    if (td.det.class_id != class_id) continue;
    const auto& gts = gts_per_image[static_cast<size_t>(td.image)];
    int best = -1;
    double best_iou = -1.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || used[{td.image, static_cast<int>(g)}]) continue;
      double iou = box_iou(td.det.x1, td.det.y1, td.det.x2, td.det.y2, gts[g].box.x1,
                           gts[g].box.y1, gts[g].box.x2, gts[g].box.y2);
      if (iou >= iou_thresh && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[{td.image, best}] = true;
      out.tp.push_back(1);
    } else {
      out.tp.push_back(0);
    }
    out.score.push_back(td.det.score);
  }
  return out;
}

// Cumulative precision/recall over the score-sorted flags.
inline void pr_curve(const MatchFlags& flags, std::vector<double>& precision,
                     std::vector<double>& recall) {
  precision.clear();
  recall.clear();
  if (flags.n_gt == 0) return;  // caller skips the class
  int tp = 0;
  for (size_t k = 0; k < flags.tp.size(); ++k) {
    tp += flags.tp[k];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(flags.n_gt));
  }
}

// Area under the monotone precision envelope (Riemann sum over recall steps).
inline double average_precision(const std::vector<double>& precision,
                                const std::vector<double>& recall) {
  if (precision.empty()) return 0.0;
  size_t n = precision.size();
  std::vector<double> env(precision);
  for (size_t i = n - 1; i-- > 0;) env[i] = std::max(env[i], env[i + 1]);
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ap += env[i] * (recall[i] - prev_r);
    prev_r = recall[i];
  }
  return ap;
}

inline double mean_ap(const std::vector<double>& per_class_ap) {
  if (per_class_ap.empty()) throw std::invalid_argument("mean_ap: no classes with ground truth");
  double s = 0.0;
  for (double a : per_class_ap) s += a;
  return s / static_cast<double>(per_class_ap.size());
}

struct ClassMetrics {
  int class_id = 0;
  bool has_gt = false;
  double precision = 0.0;  // at the max-F1 operating point
  double recall = 0.0;
  double ap50 = 0.0;
  double ap = 0.0;  // mean over IoU 0.50:0.95
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double map50 = 0.0;
  double map = 0.0;
  bool available = false;  // false when no class has ground truth
};

inline MetricsReport evaluate_detections(const std::vector<TaggedDetection>& dets,
                                         const std::vector<std::vector<PixelBox>>& gts_per_image,
                                         int num_classes) {
  MetricsReport rep;
  std::vector<double> ap50s, aps;
  for (int c = 0; c < num_classes; ++c) {
    ClassMetrics cm;
    cm.class_id = c;
    MatchFlags f50 = match_detections(dets, gts_per_image, c, 0.5);
    cm.has_gt = f50.n_gt > 0;
    if (!cm.has_gt) {
      rep.per_class.push_back(cm);
      continue;
    }
    std::vector<double> p, r;
    pr_curve(f50, p, r);
    cm.ap50 = average_precision(p, r);
    // operating point: maximize F1 along the curve
    double best_f1 = -1.0;
    for (size_t i = 0; i < p.size(); ++i) {
      double f1 = p[i] + r[i] > 0 ? 2 * p[i] * r[i] / (p[i] + r[i]) : 0.0;
      if (f1 > best_f1) {
        best_f1 = f1;
        cm.precision = p[i];
        cm.recall = r[i];
      }
    }
    double apsum = 0.0;
    for (int t = 0; t < 10; ++t) {
      double thr = 0.5 + 0.05 * t;
      MatchFlags f = match_detections(dets, gts_per_image, c, thr);
      std::vector<double> pp, rr;
      pr_curve(f, pp, rr);
      apsum += average_precision(pp, rr);
    }
    cm.ap = apsum / 10.0;
    rep.per_class.push_back(cm);
    ap50s.push_back(cm.ap50);
    aps.push_back(cm.ap);
  }
  if (!ap50s.empty()) {
    rep.map50 = mean_ap(ap50s);
    rep.map = mean_ap(aps);
    rep.available = true;
  }
  return rep;
}

}  // namespace rgbt
