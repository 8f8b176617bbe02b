#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/geometry.hpp"

#include <json.hpp>

namespace lbba {

// One detection attributed to an image; inputs to AP are grouped per class.
struct Detection {
  int image = 0;
  double score = 0.0;
  Box box;
};

struct PrPoint {
  double score = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

// VOC-style AP at IoU 0.5 with continuous ("every point") interpolation.
// Detections are sorted by descending score (ties: insertion order); each
// may claim at most one unmatched GT, preferring the highest IoU.
// Returns nullopt when the class has no ground truth.
inline std::optional<double> average_precision(
    std::vector<Detection> dets, const std::map<int, std::vector<Box>>& gts,
    double iou_thresh = 0.5, std::vector<PrPoint>* curve = nullptr) {
  int npos = 0;
  for (const auto& [img, boxes] : gts) npos += static_cast<int>(boxes.size());
  if (npos == 0) return std::nullopt;

  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::map<int, std::vector<char>> used;
  for (const auto& [img, boxes] : gts) {
    used[img].assign(boxes.size(), 0);
  }
  const int n = static_cast<int>(dets.size());
  std::vector<char> tp(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < n; ++k) {
    const Detection& d = dets[static_cast<std::size_t>(k)];
    auto it = gts.find(d.image);
    if (it == gts.end()) continue;
    const std::vector<Box>& boxes = it->second;
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      const double v = iou(d.box, boxes[j]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh && !used[d.image][static_cast<std::size_t>(best)]) {
      used[d.image][static_cast<std::size_t>(best)] = 1;
      tp[static_cast<std::size_t>(k)] = 1;
    }
  }

  // precision envelope over the PR curve, integrated at recall steps
  std::vector<double> prec(static_cast<std::size_t>(n)), rec(static_cast<std::size_t>(n));
  int tp_cum = 0;
  for (int k = 0; k < n; ++k) {
    tp_cum += tp[static_cast<std::size_t>(k)];
    prec[static_cast<std::size_t>(k)] = static_cast<double>(tp_cum) / (k + 1);
    rec[static_cast<std::size_t>(k)] = static_cast<double>(tp_cum) / npos;
  }
  if (curve) {
    curve->clear();
    for (int k = 0; k < n; ++k) {
      curve->push_back(PrPoint{dets[static_cast<std::size_t>(k)].score,
                               prec[static_cast<std::size_t>(k)],
                               rec[static_cast<std::size_t>(k)]});
    }
  }
  double ap = 0.0;
  double running = 0.0;  // max precision at >= current recall
  for (int k = n - 1; k >= 0; --k) {
    running = std::max(running, prec[static_cast<std::size_t>(k)]);
    const double r_prev = k > 0 ? rec[static_cast<std::size_t>(k - 1)] : 0.0;
    ap += (rec[static_cast<std::size_t>(k)] - r_prev) * running;
  }
  return ap;
}

// CorLoc: fraction of class-positive images whose single top-scoring box
// hits any GT of that class at IoU >= 0.5 (any-hit convention).
// top_boxes: per image, the argmax-scored box for the class, present only
// for images whose label includes the class.
inline std::optional<double> corloc(const std::map<int, Box>& top_boxes,
                                    const std::map<int, std::vector<Box>>& gts,
                                    double iou_thresh = 0.5) {
  if (top_boxes.empty()) return std::nullopt;
  int hits = 0;
  for (const auto& [img, box] : top_boxes) {
    auto it = gts.find(img);
    if (it == gts.end()) continue;
    for (const Box& g : it->second) {
      if (iou(box, g) >= iou_thresh) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(top_boxes.size());
}

// Appendix-style proposal mIoU: every box is matched to its max-IoU GT,
// IoUs are averaged within the matched GT's class, then macro-averaged
// over classes. direction_gt_to_box flips the matching direction (each GT
// takes its best box) and is reported alongside.
struct MiouInput {
  std::vector<Box> boxes;
  std::vector<Box> gt_boxes;
  std::vector<int> gt_classes;
};

inline std::optional<double> proposal_miou(const std::vector<MiouInput>& images,
                                           int num_classes,
                                           bool direction_gt_to_box = false) {
  std::vector<double> sum(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<int> count(static_cast<std::size_t>(num_classes), 0);
  for (const MiouInput& img : images) {
    if (img.gt_boxes.empty()) continue;  // image without GT is skipped
    if (direction_gt_to_box) {
      for (std::size_t j = 0; j < img.gt_boxes.size(); ++j) {
        double best = 0.0;
        for (const Box& b : img.boxes) best = std::max(best, iou(b, img.gt_boxes[j]));
        sum[static_cast<std::size_t>(img.gt_classes[j])] += best;
        count[static_cast<std::size_t>(img.gt_classes[j])] += 1;
      }
    } else {
      for (const Box& b : img.boxes) {
        double best = 0.0;
        int best_gt = 0;
        for (std::size_t j = 0; j < img.gt_boxes.size(); ++j) {
          const double v = iou(b, img.gt_boxes[j]);
          if (v > best) {
            best = v;
            best_gt = static_cast<int>(j);
          }
        }
        sum[static_cast<std::size_t>(img.gt_classes[static_cast<std::size_t>(best_gt)])] += best;
        count[static_cast<std::size_t>(img.gt_classes[static_cast<std::size_t>(best_gt)])] += 1;
      }
    }
  }
  double total = 0.0;
  int classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (count[static_cast<std::size_t>(c)] == 0) continue;
    total += sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];
    ++classes;
  }
  if (classes == 0) return std::nullopt;
  return total / classes;
}

struct EvalResult {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_ap;
  std::vector<std::optional<double>> per_class_corloc;
  std::optional<double> map;
  std::optional<double> mean_corloc;
  std::optional<double> miou_raw;
  std::optional<double> miou_adjusted;
  int num_images = 0;
  int num_gts = 0;
  int num_detections = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& xs) {
  double total = 0.0;
  int n = 0;
  for (const auto& x : xs) {
    if (!x) continue;
    total += *x;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / n;
}

inline nlohmann::json eval_result_to_json(const EvalResult& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < r.class_names.size(); ++c) {
    per_class[r.class_names[c]] = {{"ap", opt(r.per_class_ap[c])},
                                   {"corloc", opt(r.per_class_corloc[c])}};
  }
  return nlohmann::json{
      {"per_class", per_class},
      {"map", opt(r.map)},
      {"mean_corloc", opt(r.mean_corloc)},
      {"miou_raw", opt(r.miou_raw)},
      {"miou_adjusted", opt(r.miou_adjusted)},
      {"counts",
       {{"images", r.num_images}, {"gts", r.num_gts}, {"detections", r.num_detections}}},
      {"config_hash", r.config_hash},
      {"seed", r.seed}};
}

}  // namespace lbba
