#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lbba/autodiff.hpp"
#include "lbba/geometry.hpp"
#include "lbba/nn.hpp"

namespace lbba {

// Shared by the WSOD network and the adjuster's training-only RPN.
struct RpnSpec {
  int top_k = 16;
  double nms = 0.7;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  int sample = 32;  // balanced anchor sample per image
  AnchorSpec anchors;
};

template <typename S>
struct RpnOut {
  ag::Var<S> obj;    // [A,H',W']
  ag::Var<S> delta;  // [4A,H',W']
  std::vector<Box> anchors;
  int plane = 0;     // H' * W'
};

template <typename S>
void init_rpn(ParamStore<S>& store, const std::string& prefix, int num_scales) {
  store.add(prefix + "_conv.w", {16, BackboneSpec::kOutChannels, 3, 3},
            BackboneSpec::kOutChannels * 9);
  store.add_zeros(prefix + "_conv.b", {16});
  store.add(prefix + "_obj.w", {num_scales, 16, 1, 1}, 16);
  store.add_zeros(prefix + "_obj.b", {num_scales});
  store.add(prefix + "_delta.w", {4 * num_scales, 16, 1, 1}, 16);
  store.add_zeros(prefix + "_delta.b", {4 * num_scales});
}

template <typename S>
RpnOut<S> rpn_forward(NetContext<S>& ctx, ag::Var<S> feature_map,
                      const std::string& prefix, const RpnSpec& spec) {
  RpnOut<S> out;
  auto rc = ag::relu(ag::conv2d(feature_map, ctx.param(prefix + "_conv.w"),
                                ctx.param(prefix + "_conv.b")));
  out.obj = ag::conv2d(rc, ctx.param(prefix + "_obj.w"), ctx.param(prefix + "_obj.b"));
  out.delta =
      ag::conv2d(rc, ctx.param(prefix + "_delta.w"), ctx.param(prefix + "_delta.b"));
  const int fh = feature_map.value().dim(1), fw = feature_map.value().dim(2);
  out.anchors = make_anchors(fh, fw, BackboneSpec::kStride, spec.anchors);
  out.plane = fh * fw;
  return out;
}

// Decoded, clipped, NMS-filtered proposals from the current RPN state.
// Detached: proposal geometry never carries gradient.
template <typename S>
std::vector<Box> rpn_proposals(const RpnOut<S>& rpn, int width, int height,
                               const RpnSpec& spec) {
  const auto& obj = rpn.obj.value();
  const auto& deltas = rpn.delta.value();
  std::vector<ScoredBox> cands;
  for (std::size_t i = 0; i < rpn.anchors.size(); ++i) {
    const int a = static_cast<int>(i) / rpn.plane;
    const int cell = static_cast<int>(i) % rpn.plane;
    const Box box = clip_box(
        decode_normalized(
            static_cast<double>(deltas[(4 * a + 0) * rpn.plane + cell]),
            static_cast<double>(deltas[(4 * a + 1) * rpn.plane + cell]),
            static_cast<double>(deltas[(4 * a + 2) * rpn.plane + cell]),
            static_cast<double>(deltas[(4 * a + 3) * rpn.plane + cell]),
            rpn.anchors[i]),
        width, height);
    if (box.width() < 4.0 || box.height() < 4.0) continue;
    cands.push_back(ScoredBox{box, static_cast<double>(obj[static_cast<int>(i)]), -1});
  }
  // pre-NMS truncation keeps the quadratic suppression cheap
  const int pre_nms = spec.top_k * 8;
  if (static_cast<int>(cands.size()) > pre_nms) {
    std::stable_sort(cands.begin(), cands.end(),
                     [](const ScoredBox& a, const ScoredBox& b) {
                       return a.score > b.score;
                     });
    cands.resize(static_cast<std::size_t>(pre_nms));
  }
  std::vector<Box> out;
  for (int k : nms(cands, spec.nms)) {
    out.push_back(cands[static_cast<std::size_t>(k)].box);
    if (static_cast<int>(out.size()) >= spec.top_k) break;
  }
  return out;
}

// Anchor assignment with the Faster R-CNN thresholds: IoU >= pos_iou is
// positive, <= neg_iou negative, in between ignored; the best anchor of
// each GT is forced positive.
struct RpnAssignment {
  std::vector<int> label;      // 1 positive, 0 negative, -1 ignored
  std::vector<int> target_gt;  // GT index backing each positive
};

inline RpnAssignment rpn_assign(const std::vector<Box>& anchors,
                                const std::vector<Box>& gt_boxes,
                                double pos_iou, double neg_iou) {
  const int n_anchors = static_cast<int>(anchors.size());
  RpnAssignment out;
  out.label.assign(static_cast<std::size_t>(n_anchors), -1);
  out.target_gt.assign(static_cast<std::size_t>(n_anchors), -1);
  std::vector<int> gt_best(gt_boxes.size(), -1);
  std::vector<double> gt_best_iou(gt_boxes.size(), -1.0);
  for (int i = 0; i < n_anchors; ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
      const double v = iou(anchors[static_cast<std::size_t>(i)], gt_boxes[j]);
      if (v > best) {
        best = v;
        out.target_gt[static_cast<std::size_t>(i)] = static_cast<int>(j);
      }
      if (v > gt_best_iou[j]) {
        gt_best_iou[j] = v;
        gt_best[j] = i;
      }
    }
    if (best >= pos_iou) {
      out.label[static_cast<std::size_t>(i)] = 1;
    } else if (best <= neg_iou) {
      out.label[static_cast<std::size_t>(i)] = 0;
    }
  }
  for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
    if (gt_best[j] >= 0) {
      out.label[static_cast<std::size_t>(gt_best[j])] = 1;
      out.target_gt[static_cast<std::size_t>(gt_best[j])] = static_cast<int>(j);
    }
  }
  return out;
}

// Balanced-sample losses: BCE on objectness of sampled anchors, smooth-L1
// on positive deltas. Returns {cls loss, det loss}; id -1 marks a skipped
// term.
template <typename S>
std::pair<ag::Var<S>, ag::Var<S>> rpn_losses(const RpnOut<S>& rpn,
                                             const std::vector<Box>& gt_boxes,
                                             const RpnSpec& spec,
                                             std::mt19937_64& rng) {
  ag::Var<S> l_cls{nullptr, -1}, l_det{nullptr, -1};
  if (gt_boxes.empty()) return {l_cls, l_det};
  const int n_anchors = static_cast<int>(rpn.anchors.size());
  const RpnAssignment assign =
      rpn_assign(rpn.anchors, gt_boxes, spec.pos_iou, spec.neg_iou);
  const std::vector<int>& label = assign.label;
  const std::vector<int>& target_gt = assign.target_gt;

  std::vector<int> pos, neg;
  for (int i = 0; i < n_anchors; ++i) {
    if (label[static_cast<std::size_t>(i)] == 1) pos.push_back(i);
    if (label[static_cast<std::size_t>(i)] == 0) neg.push_back(i);
  }
  const int want_pos = std::min<int>(spec.sample / 2, static_cast<int>(pos.size()));
  std::shuffle(pos.begin(), pos.end(), rng);
  pos.resize(static_cast<std::size_t>(want_pos));
  std::sort(pos.begin(), pos.end());
  const int want_neg = std::min<int>(spec.sample - want_pos, static_cast<int>(neg.size()));
  std::shuffle(neg.begin(), neg.end(), rng);
  neg.resize(static_cast<std::size_t>(want_neg));
  std::sort(neg.begin(), neg.end());

  const int n_sampled = static_cast<int>(pos.size() + neg.size());
  if (n_sampled > 0) {
    std::vector<int> idx;
    Tensor<S> targets({n_sampled});
    Tensor<S> weights({n_sampled});
    int at = 0;
    for (int i : pos) {
      idx.push_back(i);
      targets[at] = S(1);
      weights[at++] = S(1);
    }
    for (int i : neg) {
      idx.push_back(i);
      targets[at] = S(0);
      weights[at++] = S(1);
    }
    auto logits = ag::gather_elems(rpn.obj, idx, {n_sampled});
    l_cls = ag::bce_with_logits(logits, targets, weights, static_cast<S>(n_sampled));
  }
  if (!pos.empty()) {
    std::vector<int> didx;
    Tensor<S> dtgt({static_cast<int>(pos.size()), 4});
    for (std::size_t p = 0; p < pos.size(); ++p) {
      const int i = pos[p];
      const int a = i / rpn.plane, cell = i % rpn.plane;
      for (int comp = 0; comp < 4; ++comp) {
        didx.push_back((4 * a + comp) * rpn.plane + cell);
      }
      double nd[4];
      encode_normalized(
          gt_boxes[static_cast<std::size_t>(target_gt[static_cast<std::size_t>(i)])],
          rpn.anchors[static_cast<std::size_t>(i)], nd);
      for (int comp = 0; comp < 4; ++comp) {
        dtgt.at(static_cast<int>(p), comp) = static_cast<S>(nd[comp]);
      }
    }
    auto deltas = ag::gather_elems(rpn.delta, didx, {static_cast<int>(pos.size()), 4});
    l_det = ag::smooth_l1_rows(deltas, dtgt, static_cast<S>(pos.size()));
  }
  return {l_cls, l_det};
}

}  // namespace lbba
