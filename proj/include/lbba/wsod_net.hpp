#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "lbba/autodiff.hpp"
#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/mining.hpp"
#include "lbba/nn.hpp"
#include "lbba/optimizer.hpp"
#include "lbba/param_store.hpp"
#include "lbba/rng.hpp"
#include "lbba/rpn.hpp"

namespace lbba {

struct WsodSpec {
  int num_classes = 4;
  int refine_streams = 3;  // K
  double det_match_iou = 0.5;
  double bbr_weight = 1.0;
  double q_eps = 1e-6;  // clamp on the image score before BCE
  RpnSpec rpn;
  MiningConfig mining;
};

struct WsodLosses {
  double total = 0.0;
  double wsddn = 0.0;
  double refine = 0.0;
  double rpn_cls = 0.0;
  double rpn_det = 0.0;
  double det = 0.0;
  double bbr = 0.0;
  int det_positives = 0;
  bool rpn_skipped = false;  // no pseudo GT -> RPN unsupervised this image

  WsodLosses& operator+=(const WsodLosses& o) {
    total += o.total;
    wsddn += o.wsddn;
    refine += o.refine;
    rpn_cls += o.rpn_cls;
    rpn_det += o.rpn_det;
    det += o.det;
    bbr += o.bbr;
    det_positives += o.det_positives;
    return *this;
  }
  void scale(double k) {
    total *= k;
    wsddn *= k;
    refine *= k;
    rpn_cls *= k;
    rpn_det *= k;
    det *= k;
    bbr *= k;
  }
};

// Raw per-image outputs used by mining, prediction and CorLoc: proposals
// (P_mil followed by P_rpn), final-stream class scores with the background
// column dropped, and the class-agnostic regression boxes decoded onto the
// proposals.
struct WsodPrediction {
  std::vector<Box> proposals;
  int num_mil = 0;
  Tensor<double> scores;     // R x C
  std::vector<Box> decoded;  // clipped to image bounds
};

// Maps adjusted boxes onto selected region proposals; bound by the trainer
// to the current-stage adjuster. Absent in baseline mode.
using AdjustFn = std::function<std::vector<Box>(const std::vector<Box>&)>;

// The WSOD network f: two-stream MIL head, K refinement streams, a
// lightweight RPN and a class-agnostic box regression branch on a shared
// conv backbone.
template <typename S>
class WsodNet {
 public:
  WsodNet(WsodSpec spec, std::uint64_t seed) : spec_(spec), store_(seed) {
    nn::init_backbone(store_, "f");
    nn::init_linear(store_, "f.neck", RoiSpec::feat_dim(), RoiSpec::kNeck);
    nn::init_linear(store_, "f.mil_cls", RoiSpec::kNeck, spec_.num_classes);
    nn::init_linear(store_, "f.mil_det", RoiSpec::kNeck, spec_.num_classes);
    for (int k = 0; k < spec_.refine_streams; ++k) {
      nn::init_linear(store_, refine_name(k), RoiSpec::kNeck, spec_.num_classes + 1);
    }
    nn::init_linear(store_, "f.reg", RoiSpec::kNeck, 4);
    init_rpn(store_, "f.rpn", static_cast<int>(spec_.rpn.anchors.scales.size()));
  }

  WsodNet(WsodSpec spec, ParamStore<S> store)
      : spec_(spec), store_(std::move(store)) {}

  const WsodSpec& spec() const { return spec_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  struct Forward {
    ag::Var<S> feature_map;
    RpnOut<S> rpn;
    std::vector<Box> rpn_proposals;  // detached
    std::vector<Box> all_boxes;      // P_mil followed by P_rpn
    int num_mil = 0;
    ag::Var<S> neck;    // [R, kNeck]
    ag::Var<S> fusion;  // [Rmil, C]
    std::vector<ag::Var<S>> refine_logits;  // K x [R, C+1]
    std::vector<ag::Var<S>> refine_probs;   // K x [R, C+1], rows simplex
    ag::Var<S> reg;     // [R, 4]
    int height = 0, width = 0;
  };

  // with_rpn_proposals=false keeps the ROI box set fixed to P_mil; used by
  // gradient checks, where proposal geometry must not move under parameter
  // perturbation (proposals are detached in training as well).
  Forward forward(NetContext<S>& ctx, const Tensor<S>& pixels,
                  const std::vector<Box>& pmil,
                  bool with_rpn_proposals = true) const {
    if (pmil.empty()) throw EmptyProposalError("wsod forward: no proposals");
    Forward fw;
    fw.height = pixels.dim(1);
    fw.width = pixels.dim(2);
    auto px = ctx.input(pixels);
    fw.feature_map = nn::backbone_forward(ctx, px, "f");
    fw.rpn = rpn_forward(ctx, fw.feature_map, "f.rpn", spec_.rpn);
    if (with_rpn_proposals) {
      fw.rpn_proposals = rpn_proposals(fw.rpn, fw.width, fw.height, spec_.rpn);
    }

    fw.all_boxes = pmil;
    fw.all_boxes.insert(fw.all_boxes.end(), fw.rpn_proposals.begin(),
                        fw.rpn_proposals.end());
    fw.num_mil = static_cast<int>(pmil.size());

    auto roi = ag::roi_pool(
        fw.feature_map,
        context_boxes(fw.all_boxes, RoiSpec::kContext, fw.width, fw.height),
        BackboneSpec::kStride, RoiSpec::kPool);
    fw.neck = ag::relu(nn::linear_layer(ctx, roi, "f.neck"));

    std::vector<int> mil_rows(static_cast<std::size_t>(fw.num_mil));
    for (int i = 0; i < fw.num_mil; ++i) mil_rows[static_cast<std::size_t>(i)] = i;
    auto mil_feat = ag::gather_rows(fw.neck, mil_rows);
    auto x_cls = nn::linear_layer(ctx, mil_feat, "f.mil_cls");
    auto x_det = nn::linear_layer(ctx, mil_feat, "f.mil_det");
    fw.fusion = ag::mul(ag::softmax_rows(x_cls), ag::softmax_cols(x_det));

    for (int k = 0; k < spec_.refine_streams; ++k) {
      auto logits = nn::linear_layer(ctx, fw.neck, refine_name(k));
      fw.refine_logits.push_back(logits);
      fw.refine_probs.push_back(ag::softmax_rows(logits));
    }
    fw.reg = nn::linear_layer(ctx, fw.neck, "f.reg");
    return fw;
  }

  // Eq. 1 image score: column sums of the fusion matrix, clamped before BCE.
  ag::Var<S> image_score(const Forward& fw) const {
    return ag::clampv(ag::col_sums(fw.fusion), static_cast<S>(spec_.q_eps),
                      static_cast<S>(1.0 - spec_.q_eps));
  }

  WsodPrediction extract_prediction(const Forward& fw) const {
    WsodPrediction pred;
    pred.proposals = fw.all_boxes;
    pred.num_mil = fw.num_mil;
    pred.scores = stream_scores(fw, spec_.refine_streams - 1, /*mil_only=*/false);
    const int r = static_cast<int>(fw.all_boxes.size());
    pred.decoded.reserve(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
      pred.decoded.push_back(clip_box(
          decode_normalized(static_cast<double>(fw.reg.value().at(i, 0)),
                            static_cast<double>(fw.reg.value().at(i, 1)),
                            static_cast<double>(fw.reg.value().at(i, 2)),
                            static_cast<double>(fw.reg.value().at(i, 3)),
                            fw.all_boxes[static_cast<std::size_t>(i)]),
          fw.width, fw.height));
    }
    return pred;
  }

  WsodPrediction predict_raw(const Tensor<double>& pixels,
                             const std::vector<Box>& pmil) {
    ag::Tape<S> tape;
    NetContext<S> ctx(tape, store_);
    const Forward fw = forward(ctx, to_input(pixels), pmil);
    return extract_prediction(fw);
  }

  // Test-time detection: final-stream scores, decoded boxes, per-class
  // score threshold then NMS.
  std::vector<ScoredBox> predict(const Tensor<double>& pixels,
                                 const std::vector<Box>& pmil,
                                 double nms_thresh, double score_thresh) {
    const WsodPrediction pred = predict_raw(pixels, pmil);
    return detections_from_prediction(pred, nms_thresh, score_thresh);
  }

  std::vector<ScoredBox> detections_from_prediction(const WsodPrediction& pred,
                                                    double nms_thresh,
                                                    double score_thresh) const {
    std::vector<ScoredBox> out;
    const int r = pred.scores.dim(0);
    for (int c = 0; c < spec_.num_classes; ++c) {
      std::vector<ScoredBox> cls;
      for (int i = 0; i < r; ++i) {
        const double s = pred.scores.at(i, c);
        if (s >= score_thresh) {
          cls.push_back(ScoredBox{pred.decoded[static_cast<std::size_t>(i)], s, c});
        }
      }
      if (cls.empty()) continue;
      for (int k : nms(cls, nms_thresh)) out.push_back(cls[static_cast<std::size_t>(k)]);
    }
    return out;
  }

  // One SGD step on a single image. `adjust` enables the boosted objective
  // (L_bbr on top of L_wsod); passing nullptr trains the Eq. 3 baseline.
  WsodLosses train_step(const Tensor<double>& pixels,
                        const std::vector<Box>& pmil, const std::vector<int>& y,
                        const AdjustFn& adjust, SgdOptimizer<S>& opt, int epoch,
                        std::mt19937_64& rng) {
    bool any = false;
    for (int v : y) any = any || v != 0;
    if (!any) throw NoPositiveClassError("wsod train_step: all-zero label vector");

    ag::Tape<S> tape;
    NetContext<S> ctx(tape, store_);
    const Forward fw = forward(ctx, to_input(pixels), pmil);
    WsodLosses out;

    std::vector<ag::Var<S>> terms;
    auto q = image_score(fw);
    Tensor<S> yt({spec_.num_classes});
    for (int c = 0; c < spec_.num_classes; ++c) {
      yt[c] = static_cast<S>(y[static_cast<std::size_t>(c)]);
    }
    auto l_wsddn = ag::bce(q, yt);
    out.wsddn = static_cast<double>(l_wsddn.value()[0]);
    terms.push_back(l_wsddn);

    auto l_refine = refine_loss(tape, fw, y);
    out.refine = static_cast<double>(l_refine.value()[0]);
    terms.push_back(l_refine);

    // pseudo GT mined from the final stream over P_mil
    std::vector<Box> mil_boxes(fw.all_boxes.begin(),
                               fw.all_boxes.begin() + fw.num_mil);
    const std::vector<PseudoGt> pgts = pseudo_gt(
        stream_scores(fw, spec_.refine_streams - 1), y, mil_boxes);
    std::vector<Box> pgt_boxes;
    for (const auto& p : pgts) pgt_boxes.push_back(p.box);

    if (pgt_boxes.empty()) {
      out.rpn_skipped = true;
    } else {
      auto [l_rpn_cls, l_rpn_det] = rpn_losses(fw.rpn, pgt_boxes, spec_.rpn, rng);
      if (l_rpn_cls.id >= 0) {
        out.rpn_cls = static_cast<double>(l_rpn_cls.value()[0]);
        terms.push_back(l_rpn_cls);
      }
      if (l_rpn_det.id >= 0) {
        out.rpn_det = static_cast<double>(l_rpn_det.value()[0]);
        terms.push_back(l_rpn_det);
      }
      auto l_det = det_loss(fw, pgt_boxes, &out.det_positives);
      if (l_det.id >= 0) {
        out.det = static_cast<double>(l_det.value()[0]);
        terms.push_back(l_det);
      }
    }

    if (adjust) {
      const WsodPrediction pred = extract_prediction(fw);
      const std::vector<SelectedProposal> selected = select_wsod_proposals(
          pred.proposals, pred.decoded, pred.scores, spec_.mining);
      std::vector<Box> sel_boxes;
      std::vector<int> sel_rows;
      for (const auto& sp : selected) {
        sel_boxes.push_back(sp.proposal);
        sel_rows.push_back(sp.source_index);
      }
      const std::vector<Box> adjusted = adjust(sel_boxes);
      auto l_bbr = bbr_loss(fw, sel_rows, sel_boxes, adjusted);
      out.bbr = static_cast<double>(l_bbr.value()[0]);
      terms.push_back(l_bbr);
    }

    auto total = ag::add_scalars(tape, terms);
    out.total = static_cast<double>(total.value()[0]);
    if (!std::isfinite(out.total)) {
      throw DivergenceError("wsod train_step: non-finite total loss");
    }
    tape.backward(total.id);
    opt.step(store_, ctx.grads(), epoch);
    return out;
  }

  // L_r: stream k supervised by the previous stream's scores (stream 0 by
  // the fusion matrix). Seeds are mined over P_mil and their labels shared
  // with every overlapping proposal, RPN ones included.
  ag::Var<S> refine_loss(ag::Tape<S>& tape, const Forward& fw,
                         const std::vector<int>& y) const {
    std::vector<Box> mil_boxes(fw.all_boxes.begin(),
                               fw.all_boxes.begin() + fw.num_mil);
    const int r_all = static_cast<int>(fw.all_boxes.size());
    std::vector<ag::Var<S>> refine_terms;
    for (int k = 0; k < spec_.refine_streams; ++k) {
      const Tensor<double> prev =
          k == 0 ? fusion_scores(fw) : stream_scores(fw, k - 1);
      const SeedSupervision sup = seed_supervision(prev, y, mil_boxes,
                                                   fw.all_boxes,
                                                   spec_.mining.seed_iou);
      std::vector<S> weights(sup.weights.size());
      for (std::size_t i = 0; i < sup.weights.size(); ++i) {
        weights[i] = static_cast<S>(sup.weights[i]);
      }
      auto lp = ag::log_softmax_rows(fw.refine_logits[static_cast<std::size_t>(k)]);
      refine_terms.push_back(
          ag::weighted_nll_rows(lp, sup.labels, weights, static_cast<S>(r_all)));
    }
    return ag::add_scalars(tape, refine_terms);
  }

  // L_bbr: smooth-L1 between predicted deltas of the selected proposals and
  // the encoding of their adjusted boxes.
  ag::Var<S> bbr_loss(const Forward& fw, const std::vector<int>& rows,
                      const std::vector<Box>& proposals,
                      const std::vector<Box>& adjusted) const {
    if (rows.size() != adjusted.size() || rows.size() != proposals.size()) {
      throw DimensionError("bbr_loss: selection arrays misaligned");
    }
    const int n = static_cast<int>(rows.size());
    Tensor<S> targets({n, 4});
    for (int i = 0; i < n; ++i) {
      double nd[4];
      encode_normalized(adjusted[static_cast<std::size_t>(i)],
                        proposals[static_cast<std::size_t>(i)], nd);
      for (int comp = 0; comp < 4; ++comp) {
        targets.at(i, comp) = static_cast<S>(nd[comp]);
      }
    }
    auto pred = ag::gather_rows(fw.reg, rows);
    auto loss = ag::smooth_l1_rows(pred, targets, static_cast<S>(n));
    return spec_.bbr_weight == 1.0 ? loss
                                   : ag::scale(loss, static_cast<S>(spec_.bbr_weight));
  }

  // L_det: regression toward pseudo GT boxes for proposals matched at 0.5.
  ag::Var<S> det_loss(const Forward& fw, const std::vector<Box>& pgt_boxes,
                      int* positives) const {
    const std::vector<MatchResult> matches =
        match_to_gt(fw.all_boxes, pgt_boxes, spec_.det_match_iou);
    std::vector<int> rows;
    std::vector<double> tgt;
    for (std::size_t i = 0; i < matches.size(); ++i) {
      if (matches[i].gt_index < 0) continue;
      rows.push_back(static_cast<int>(i));
      double nd[4];
      encode_normalized(pgt_boxes[static_cast<std::size_t>(matches[i].gt_index)],
                        fw.all_boxes[i], nd);
      tgt.insert(tgt.end(), {nd[0], nd[1], nd[2], nd[3]});
    }
    if (positives) *positives = static_cast<int>(rows.size());
    if (rows.empty()) return ag::Var<S>{nullptr, -1};
    const int n = static_cast<int>(rows.size());
    Tensor<S> targets({n, 4});
    for (int i = 0; i < 4 * n; ++i) {
      targets[i] = static_cast<S>(tgt[static_cast<std::size_t>(i)]);
    }
    auto pred = ag::gather_rows(fw.reg, rows);
    return ag::smooth_l1_rows(pred, targets, static_cast<S>(n));
  }

  // Fusion matrix values as doubles (Rmil x C).
  Tensor<double> fusion_scores(const Forward& fw) const {
    const auto& v = fw.fusion.value();
    Tensor<double> out({v.dim(0), v.dim(1)});
    for (int i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
    return out;
  }

  // Stream k scores with background dropped; P_mil rows only by default.
  Tensor<double> stream_scores(const Forward& fw, int k,
                               bool mil_only = true) const {
    const auto& v = fw.refine_probs[static_cast<std::size_t>(k)].value();
    const int rows = mil_only ? fw.num_mil : v.dim(0);
    Tensor<double> out({rows, spec_.num_classes});
    for (int i = 0; i < rows; ++i) {
      for (int c = 0; c < spec_.num_classes; ++c) {
        out.at(i, c) = static_cast<double>(v.at(i, c + 1));
      }
    }
    return out;
  }

  static Tensor<S> to_input(const Tensor<double>& pixels) {
    Tensor<S> t({1, pixels.dim(0), pixels.dim(1)});
    for (int i = 0; i < pixels.size(); ++i) t[i] = static_cast<S>(pixels[i]);
    return t;
  }

 private:
  static std::string refine_name(int k) {
    return "f.refine" + std::to_string(k + 1);
  }

  WsodSpec spec_;
  ParamStore<S> store_;
};

}  // namespace lbba
