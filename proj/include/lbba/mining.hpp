#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/tensor.hpp"

namespace lbba {

struct MiningConfig {
  double seed_iou = 0.5;     // neighbor assignment threshold (OICR)
  int top_k = 32;            // P_wsod size cap
  double score_thresh = 0.05;
  double nms_thresh = 0.5;
};

// Per-proposal pseudo labels for one refinement stream. Label 0 is
// background; class c is stored as c+1. Weights are the mining seed's
// score (OICR convention, including for background).
struct SeedSupervision {
  std::vector<int> labels;
  std::vector<double> weights;
};

struct PseudoGt {
  int class_id = -1;
  Box box;
};

// P_wsod entry: the source region proposal, the regression-decoded box it
// produced, and the selection score. E-step consumers read `proposal`
// (region-proposal geometry); `decoded` is carried as metadata.
struct SelectedProposal {
  int source_index = -1;
  Box proposal;
  Box decoded;
  double score = 0.0;
};

// OICR-style seed mining. scores: R x C class scores from the previous
// stream (background column already dropped) over `score_boxes`. The
// returned supervision covers `assign_boxes` (which may be a superset of
// the scored proposals), labeling every box by its max-IoU seed.
inline SeedSupervision seed_supervision(const Tensor<double>& scores,
                                        const std::vector<int>& y,
                                        const std::vector<Box>& score_boxes,
                                        const std::vector<Box>& assign_boxes,
                                        double seed_iou = 0.5) {
  const int r = scores.dim(0), c = scores.dim(1);
  if (r != static_cast<int>(score_boxes.size())) {
    throw DimensionError("seed_supervision: score rows != proposal count");
  }
  if (c != static_cast<int>(y.size())) {
    throw DimensionError("seed_supervision: score cols != class count");
  }
  if (r == 0) throw EmptyProposalError("seed_supervision: no proposals");

  struct Seed {
    int class_id;
    int proposal;
    double score;
  };
  std::vector<Seed> seeds;
  for (int cls = 0; cls < c; ++cls) {
    if (!y[static_cast<std::size_t>(cls)]) continue;
    int best = 0;
    for (int i = 1; i < r; ++i) {
      if (scores.at(i, cls) > scores.at(best, cls)) best = i;  // tie: lower index
    }
    seeds.push_back(Seed{cls, best, scores.at(best, cls)});
  }
  if (seeds.empty()) {
    throw NoPositiveClassError("seed_supervision: image has no positive class");
  }

  SeedSupervision out;
  const int n = static_cast<int>(assign_boxes.size());
  out.labels.assign(static_cast<std::size_t>(n), 0);
  out.weights.assign(static_cast<std::size_t>(n), 1.0);
  for (int i = 0; i < n; ++i) {
    // best-overlapping seed decides both label and weight
    double best_iou = -1.0;
    const Seed* best_seed = nullptr;
    for (const Seed& s : seeds) {
      const double v = iou(assign_boxes[static_cast<std::size_t>(i)],
                           score_boxes[static_cast<std::size_t>(s.proposal)]);
      if (v > best_iou) {
        best_iou = v;
        best_seed = &s;
      }
    }
    out.weights[static_cast<std::size_t>(i)] = best_seed->score;
    out.labels[static_cast<std::size_t>(i)] =
        best_iou >= seed_iou ? best_seed->class_id + 1 : 0;
  }
  return out;
}

// Top-scoring proposal of each present class becomes its pseudo GT box.
inline std::vector<PseudoGt> pseudo_gt(const Tensor<double>& final_scores,
                                       const std::vector<int>& y,
                                       const std::vector<Box>& proposals) {
  const int r = final_scores.dim(0), c = final_scores.dim(1);
  if (r != static_cast<int>(proposals.size())) {
    throw DimensionError("pseudo_gt: score rows != proposal count");
  }
  std::vector<PseudoGt> out;
  if (r == 0) return out;
  for (int cls = 0; cls < c && cls < static_cast<int>(y.size()); ++cls) {
    if (!y[static_cast<std::size_t>(cls)]) continue;
    int best = 0;
    for (int i = 1; i < r; ++i) {
      if (final_scores.at(i, cls) > final_scores.at(best, cls)) best = i;
    }
    out.push_back(PseudoGt{cls, proposals[static_cast<std::size_t>(best)]});
  }
  return out;
}

// Ranks proposals by max-over-classes score, thresholds, NMS-filters and
// truncates to top_k. Never returns empty: when everything falls below the
// threshold the single best proposal is kept (the adjuster always needs
// input).
inline std::vector<SelectedProposal> select_wsod_proposals(
    const std::vector<Box>& proposals, const std::vector<Box>& decoded,
    const Tensor<double>& scores, const MiningConfig& cfg) {
  const int r = scores.dim(0), c = scores.dim(1);
  if (r != static_cast<int>(proposals.size()) ||
      r != static_cast<int>(decoded.size())) {
    throw DimensionError("select_wsod_proposals: row count mismatch");
  }
  if (r == 0) throw EmptyProposalError("select_wsod_proposals: no proposals");

  std::vector<double> best(static_cast<std::size_t>(r), 0.0);
  for (int i = 0; i < r; ++i) {
    double m = scores.at(i, 0);
    for (int j = 1; j < c; ++j) m = std::max(m, scores.at(i, j));
    best[static_cast<std::size_t>(i)] = m;
  }

  std::vector<ScoredBox> pool;
  std::vector<int> pool_src;
  for (int i = 0; i < r; ++i) {
    if (best[static_cast<std::size_t>(i)] >= cfg.score_thresh) {
      pool.push_back(ScoredBox{proposals[static_cast<std::size_t>(i)],
                               best[static_cast<std::size_t>(i)], -1});
      pool_src.push_back(i);
    }
  }
  if (pool.empty()) {
    const int top = static_cast<int>(
        std::max_element(best.begin(), best.end()) - best.begin());
    return {SelectedProposal{top, proposals[static_cast<std::size_t>(top)],
                             decoded[static_cast<std::size_t>(top)],
                             best[static_cast<std::size_t>(top)]}};
  }
  std::vector<int> kept = nms(pool, cfg.nms_thresh);
  if (static_cast<int>(kept.size()) > cfg.top_k) {
    kept.resize(static_cast<std::size_t>(cfg.top_k));
  }
  std::vector<SelectedProposal> out;
  out.reserve(kept.size());
  for (int k : kept) {
    const int src = pool_src[static_cast<std::size_t>(k)];
    out.push_back(SelectedProposal{src, proposals[static_cast<std::size_t>(src)],
                                   decoded[static_cast<std::size_t>(src)],
                                   best[static_cast<std::size_t>(src)]});
  }
  return out;
}

}  // namespace lbba
