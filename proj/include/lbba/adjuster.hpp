#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lbba/autodiff.hpp"
#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/nn.hpp"
#include "lbba/optimizer.hpp"
#include "lbba/param_store.hpp"
#include "lbba/rng.hpp"
#include "lbba/rpn.hpp"
#include "lbba/synthdata.hpp"

namespace lbba {

struct AdjusterSpec {
  int num_aux_classes = 6;  // score branch classes in standard mode
  bool one_class = false;   // collapse the score branch to binary fg/bg
  double match_iou = 0.5;   // proposal-to-GT matching for L_bba
  RpnSpec rpn;
};

struct AdjusterLosses {
  double total = 0.0;
  double bba = 0.0;    // regression term
  double score = 0.0;  // classification / foreground term
  double rpn_cls = 0.0;
  double rpn_det = 0.0;
  int matched = 0;

  AdjusterLosses& operator+=(const AdjusterLosses& o) {
    total += o.total;
    bba += o.bba;
    score += o.score;
    rpn_cls += o.rpn_cls;
    rpn_det += o.rpn_det;
    matched += o.matched;
    return *this;
  }
  void scale(double k) {
    total *= k;
    bba *= k;
    score *= k;
    rpn_cls *= k;
    rpn_det *= k;
  }
};

// One adjusted box per input proposal, order-aligned, plus a foreground
// confidence.
struct AdjustedBoxes {
  std::vector<Box> boxes;
  std::vector<double> confidence;
};

// The class-agnostic bounding box adjuster g: a two-stage regressor whose
// adjustment path takes pixels and proposal geometry only — no class
// information exists anywhere on that path. The internal RPN participates
// in training exclusively; adjust() never touches it.
template <typename S>
class Adjuster {
 public:
  Adjuster(AdjusterSpec spec, std::uint64_t seed) : spec_(spec), store_(seed) {
    nn::init_backbone(store_, "g");
    nn::init_linear(store_, "g.neck", RoiSpec::feat_dim(), RoiSpec::kNeck);
    nn::init_linear(store_, "g.reg", RoiSpec::kNeck, 4);
    nn::init_linear(store_, "g.score", RoiSpec::kNeck,
                    spec_.one_class ? 1 : spec_.num_aux_classes + 1);
    init_rpn(store_, "g.rpn", static_cast<int>(spec_.rpn.anchors.scales.size()));
  }

  Adjuster(AdjusterSpec spec, ParamStore<S> store, int stage)
      : spec_(spec), store_(std::move(store)), stage_(stage) {}

  const AdjusterSpec& spec() const { return spec_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  int stage() const { return stage_; }
  void set_stage(int t) { stage_ = t; }

  // Eq. 8: adjusted box per proposal, decoded onto the proposal and clipped
  // to image bounds. Deterministic, per-proposal independent.
  AdjustedBoxes adjust(const Tensor<double>& pixels,
                       const std::vector<Box>& proposals) const {
    if (proposals.empty()) throw EmptyProposalError("adjust: no proposals");
    ag::Tape<S> tape;
    ParamStore<S>& store = const_cast<ParamStore<S>&>(store_);
    NetContext<S> ctx(tape, store);
    auto px = ctx.input(to_input(pixels));
    auto fm = nn::backbone_forward(ctx, px, "g");
    const int h = pixels.dim(0), w = pixels.dim(1);
    auto roi = ag::roi_pool(fm, context_boxes(proposals, RoiSpec::kContext, w, h),
                            BackboneSpec::kStride, RoiSpec::kPool);
    auto neck = ag::relu(nn::linear_layer(ctx, roi, "g.neck"));
    auto reg = nn::linear_layer(ctx, neck, "g.reg");
    auto score = nn::linear_layer(ctx, neck, "g.score");
    AdjustedBoxes out;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      const int r = static_cast<int>(i);
      out.boxes.push_back(clip_box(
          decode_normalized(static_cast<double>(reg.value().at(r, 0)),
                            static_cast<double>(reg.value().at(r, 1)),
                            static_cast<double>(reg.value().at(r, 2)),
                            static_cast<double>(reg.value().at(r, 3)),
                            proposals[i]),
          w, h));
      out.confidence.push_back(foreground_confidence(score.value(), r));
    }
    return out;
  }

  // Supervised step on one auxiliary image. `roi_proposals` are the boxes
  // fed to the ROI head (initialization: P_mil; E-step: P_wsod plus a
  // P_mil sample); the internal RPN contributes its own proposals and is
  // itself trained against the ground truth.
  AdjusterLosses train_step(const Tensor<double>& pixels,
                            const std::vector<Box>& roi_proposals,
                            const std::vector<Instance>& gts,
                            SgdOptimizer<S>& opt, int epoch,
                            std::mt19937_64& rng) {
    ag::Tape<S> tape;
    NetContext<S> ctx(tape, store_);
    auto px = ctx.input(to_input(pixels));
    auto fm = nn::backbone_forward(ctx, px, "g");
    const int h = pixels.dim(0), w = pixels.dim(1);

    RpnOut<S> rpn = rpn_forward(ctx, fm, "g.rpn", spec_.rpn);
    const std::vector<Box> grpn = rpn_proposals(rpn, w, h, spec_.rpn);

    std::vector<Box> all = roi_proposals;
    all.insert(all.end(), grpn.begin(), grpn.end());
    if (all.empty()) throw EmptyProposalError("adjuster train_step: no proposals");

    auto roi = ag::roi_pool(fm, context_boxes(all, RoiSpec::kContext, w, h),
                            BackboneSpec::kStride, RoiSpec::kPool);
    auto neck = ag::relu(nn::linear_layer(ctx, roi, "g.neck"));
    auto reg = nn::linear_layer(ctx, neck, "g.reg");
    auto score = nn::linear_layer(ctx, neck, "g.score");

    std::vector<Box> gt_boxes;
    for (const Instance& inst : gts) gt_boxes.push_back(inst.box);

    AdjusterLosses out;
    std::vector<ag::Var<S>> terms;

    // L_bba regression over matched proposals
    const std::vector<MatchResult> matches =
        match_to_gt(all, gt_boxes, spec_.match_iou);
    std::vector<int> rows;
    std::vector<double> tgt;
    for (std::size_t i = 0; i < matches.size(); ++i) {
      if (matches[i].gt_index < 0) continue;
      rows.push_back(static_cast<int>(i));
      double nd[4];
      encode_normalized(gt_boxes[static_cast<std::size_t>(matches[i].gt_index)],
                        all[i], nd);
      tgt.insert(tgt.end(), {nd[0], nd[1], nd[2], nd[3]});
    }
    out.matched = static_cast<int>(rows.size());
    if (!rows.empty()) {
      const int n = static_cast<int>(rows.size());
      Tensor<S> targets({n, 4});
      for (int i = 0; i < 4 * n; ++i) {
        targets[i] = static_cast<S>(tgt[static_cast<std::size_t>(i)]);
      }
      auto pred = ag::gather_rows(reg, rows);
      auto l_bba = ag::smooth_l1_rows(pred, targets, static_cast<S>(n));
      out.bba = static_cast<double>(l_bba.value()[0]);
      terms.push_back(l_bba);
    }

    // score branch: matched proposals carry their GT class (or plain
    // foreground in one-class mode), everything else supervises background
    const int r_all = static_cast<int>(all.size());
    if (spec_.one_class) {
      Tensor<S> fg({r_all});
      Tensor<S> wgt({r_all});
      for (int i = 0; i < r_all; ++i) {
        fg[i] = matches[static_cast<std::size_t>(i)].gt_index >= 0 ? S(1) : S(0);
        wgt[i] = S(1);
      }
      auto logits = ag::reshape(score, {r_all});
      auto l_score = ag::bce_with_logits(logits, fg, wgt, static_cast<S>(r_all));
      out.score = static_cast<double>(l_score.value()[0]);
      terms.push_back(l_score);
    } else {
      std::vector<int> labels(static_cast<std::size_t>(r_all), 0);
      std::vector<S> weights(static_cast<std::size_t>(r_all), S(1));
      for (int i = 0; i < r_all; ++i) {
        const int gi = matches[static_cast<std::size_t>(i)].gt_index;
        if (gi >= 0) {
          labels[static_cast<std::size_t>(i)] =
              gts[static_cast<std::size_t>(gi)].class_id + 1;
        }
      }
      auto lp = ag::log_softmax_rows(score);
      auto l_score =
          ag::weighted_nll_rows(lp, labels, weights, static_cast<S>(r_all));
      out.score = static_cast<double>(l_score.value()[0]);
      terms.push_back(l_score);
    }

    // training-only RPN, supervised by the real GT boxes
    auto [l_rpn_cls, l_rpn_det] = rpn_losses(rpn, gt_boxes, spec_.rpn, rng);
    if (l_rpn_cls.id >= 0) {
      out.rpn_cls = static_cast<double>(l_rpn_cls.value()[0]);
      terms.push_back(l_rpn_cls);
    }
    if (l_rpn_det.id >= 0) {
      out.rpn_det = static_cast<double>(l_rpn_det.value()[0]);
      terms.push_back(l_rpn_det);
    }

    auto total = ag::add_scalars(tape, terms);
    out.total = static_cast<double>(total.value()[0]);
    if (!std::isfinite(out.total)) {
      throw DivergenceError("adjuster train_step: non-finite total loss");
    }
    tape.backward(total.id);
    opt.step(store_, ctx.grads(), epoch);
    return out;
  }

  static Tensor<S> to_input(const Tensor<double>& pixels) {
    Tensor<S> t({1, pixels.dim(0), pixels.dim(1)});
    for (int i = 0; i < pixels.size(); ++i) t[i] = static_cast<S>(pixels[i]);
    return t;
  }

 private:
  double foreground_confidence(const Tensor<S>& score, int row) const {
    if (spec_.one_class) {
      const double z = static_cast<double>(score.at(row, 0));
      return 1.0 / (1.0 + std::exp(-z));
    }
    // 1 - P(background) under the row softmax
    const int c = spec_.num_aux_classes + 1;
    double mx = static_cast<double>(score.at(row, 0));
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(score.at(row, j)));
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(static_cast<double>(score.at(row, j)) - mx);
    const double bg = std::exp(static_cast<double>(score.at(row, 0)) - mx) / sum;
    return 1.0 - bg;
  }

  AdjusterSpec spec_;
  ParamStore<S> store_;
  int stage_ = 0;
};

// Initialization of Algorithm 1: supervised training of g_0 on the fully
// annotated auxiliary split (precomputed proposals + internal RPN).
template <typename S>
Adjuster<S> train_initial_adjuster(const DatasetSplit& aux,
                                   const AdjusterSpec& spec,
                                   const TrainConfig& cfg) {
  if (aux.mode() != AnnotationMode::kFull) {
    throw ModeError("train_initial_adjuster: auxiliary split must be full mode");
  }
  cfg.validate();
  Adjuster<S> g(spec, derive_seed(cfg.seed, 0x6000));
  SgdOptimizer<S> opt(cfg);
  std::vector<int> order(static_cast<std::size_t>(aux.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = make_rng(cfg.seed, 0x6e, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), erng);
    for (int i : order) {
      auto srng = make_rng(cfg.seed, 0x65, static_cast<std::uint64_t>(epoch),
                           static_cast<std::uint64_t>(i));
      g.train_step(aux.pixels(i), aux.proposals(i).boxes, aux.instances(i), opt,
                   epoch, srng);
    }
  }
  g.set_stage(0);
  return g;
}

// E-step of Algorithm 1: continue training from the previous stage's
// adjuster on the proposals selected by the current WSOD model (region
// proposal geometry), mixed with a sample of the precomputed proposals.
template <typename S>
Adjuster<S> train_adjuster_stage(const DatasetSplit& aux,
                                 const std::vector<std::vector<Box>>& wsod_proposals,
                                 const Adjuster<S>& g_prev,
                                 const TrainConfig& cfg, double pmil_mix_ratio,
                                 int next_stage) {
  if (aux.mode() != AnnotationMode::kFull) {
    throw ModeError("train_adjuster_stage: auxiliary split must be full mode");
  }
  if (static_cast<int>(wsod_proposals.size()) != aux.size()) {
    throw SequencingError("train_adjuster_stage: selection list does not cover the split");
  }
  cfg.validate();
  Adjuster<S> g(g_prev.spec(), g_prev.params(), next_stage);  // warm start
  SgdOptimizer<S> opt(cfg);
  std::vector<int> order(static_cast<std::size_t>(aux.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = make_rng(cfg.seed, 0x7e, static_cast<std::uint64_t>(epoch),
                         static_cast<std::uint64_t>(next_stage));
    std::shuffle(order.begin(), order.end(), erng);
    for (int i : order) {
      auto srng = make_rng(cfg.seed, 0x75, static_cast<std::uint64_t>(epoch),
                           derive_seed(static_cast<std::uint64_t>(i), 0, 0,
                                       static_cast<std::uint64_t>(next_stage)));
      std::vector<Box> roi = wsod_proposals[static_cast<std::size_t>(i)];
      const auto& pmil = aux.proposals(i).boxes;
      for (const Box& b : pmil) {
        if (uniform(srng, 0.0, 1.0) < pmil_mix_ratio) roi.push_back(b);
      }
      g.train_step(aux.pixels(i), roi, aux.instances(i), opt, epoch, srng);
    }
  }
  return g;
}

}  // namespace lbba
