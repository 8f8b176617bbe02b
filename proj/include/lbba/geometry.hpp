#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "lbba/error.hpp"

namespace lbba {

// Axis-aligned box in continuous pixel coordinates, corner convention
// (x1,y1,x2,y2) with x2 > x1 and y2 > y1. Widths carry no legacy "+1".
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x2 > x1 && y2 > y1;
  }

  bool operator==(const Box& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

// Dimensionless second-stage regression offsets. tw/th are log size ratios,
// so decode always produces positive extents.
struct BoxDelta {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;

  bool finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tw) &&
           std::isfinite(th);
  }
};

struct ScoredBox {
  Box box;
  double score = 0.0;
  int class_id = -1;  // -1 = class-agnostic
};

inline void require_valid(const Box& b, const char* what) {
  if (!b.valid()) {
    throw InvalidBoxError(std::string(what) + ": degenerate box (" +
                          std::to_string(b.x1) + "," + std::to_string(b.y1) +
                          "," + std::to_string(b.x2) + "," +
                          std::to_string(b.y2) + ")");
  }
}

// Intersection over union. Symmetric, in [0,1], equal to 1 iff a == b.
inline double iou(const Box& a, const Box& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// Standard second-stage parameterization: center offsets normalized by the
// anchor extent, log scale ratios.
inline BoxDelta encode(const Box& box, const Box& anchor) {
  require_valid(box, "encode box");
  require_valid(anchor, "encode anchor");
  BoxDelta d;
  d.tx = (box.cx() - anchor.cx()) / anchor.width();
  d.ty = (box.cy() - anchor.cy()) / anchor.height();
  d.tw = std::log(box.width() / anchor.width());
  d.th = std::log(box.height() / anchor.height());
  return d;
}

inline Box decode(const BoxDelta& delta, const Box& anchor) {
  require_valid(anchor, "decode anchor");
  const double cx = anchor.cx() + delta.tx * anchor.width();
  const double cy = anchor.cy() + delta.ty * anchor.height();
  const double w = anchor.width() * std::exp(delta.tw);
  const double h = anchor.height() * std::exp(delta.th);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Clip to [0,W]x[0,H], keeping a sliver of positive extent so downstream
// encode/area stay well defined.
inline Box clip_box(const Box& b, double width, double height) {
  const double eps = 1e-3;
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, width - eps);
  c.y1 = std::clamp(b.y1, 0.0, height - eps);
  c.x2 = std::clamp(b.x2, c.x1 + eps, width);
  c.y2 = std::clamp(b.y2, c.y1 + eps, height);
  return c;
}

// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline double smooth_l1_term(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

inline double smooth_l1_term_grad(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
}

// Sum of elementwise smooth-L1 over equal-length residual vectors.
inline double smooth_l1(const std::vector<double>& pred,
                        const std::vector<double>& target) {
  if (pred.size() != target.size()) {
    throw DimensionError("smooth_l1: length mismatch " +
                         std::to_string(pred.size()) + " vs " +
                         std::to_string(target.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    total += smooth_l1_term(pred[i] - target[i]);
  }
  return total;
}

// Greedy NMS over descending score, ties broken by lower original index.
// Returns kept indices in descending score order.
inline std::vector<int> nms(const std::vector<ScoredBox>& dets,
                            double iou_thresh) {
  if (iou_thresh <= 0.0 || iou_thresh >= 1.0) {
    throw ConfigError("nms: iou_thresh must lie in (0,1)");
  }
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });
  std::vector<int> kept;
  std::vector<char> suppressed(dets.size(), 0);
  for (int idx : order) {
    if (suppressed[idx]) continue;
    kept.push_back(idx);
    for (int other : order) {
      if (other == idx || suppressed[other]) continue;
      if (iou(dets[idx].box, dets[other].box) > iou_thresh) {
        suppressed[other] = 1;
      }
    }
  }
  return kept;
}

struct MatchResult {
  int gt_index = -1;  // -1 = unmatched
  double best_iou = 0.0;
};

// Max-IoU assignment of proposals to ground truth. A proposal matches its
// best GT when that IoU reaches pos_thresh; ties break to the lower GT
// index. Empty GT list leaves everything unmatched.
inline std::vector<MatchResult> match_to_gt(const std::vector<Box>& proposals,
                                            const std::vector<Box>& gts,
                                            double pos_thresh) {
  if (pos_thresh <= 0.0 || pos_thresh >= 1.0) {
    throw ConfigError("match_to_gt: pos_thresh must lie in (0,1)");
  }
  std::vector<MatchResult> out(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    MatchResult m;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(proposals[i], gts[j]);
      if (v > m.best_iou) {
        m.best_iou = v;
        m.gt_index = static_cast<int>(j);
      }
    }
    if (m.best_iou < pos_thresh) m.gt_index = -1;
    out[i] = m;
  }
  return out;
}

}  // namespace lbba
