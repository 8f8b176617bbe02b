#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "lbba/autodiff.hpp"
#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/nn.hpp"
#include "lbba/optimizer.hpp"
#include "lbba/param_store.hpp"
#include "lbba/rng.hpp"
#include "lbba/synthdata.hpp"

namespace lbba {

// Multi-label image classifier h for the score masking strategy: the
// shared backbone topology (weights of its own), global average pooling,
// one logit per target class.
template <typename S>
class MaskClassifier {
 public:
  MaskClassifier(int num_classes, std::uint64_t seed)
      : num_classes_(num_classes), store_(seed) {
    nn::init_backbone(store_, "h");
    nn::init_linear(store_, "h.fc", BackboneSpec::kOutChannels, num_classes);
  }

  MaskClassifier(int num_classes, ParamStore<S> store)
      : num_classes_(num_classes), store_(std::move(store)) {}

  int num_classes() const { return num_classes_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  // Raw per-class logits; the masking threshold operates on these.
  std::vector<double> logits(const Tensor<double>& pixels) const {
    ag::Tape<S> tape;
    ParamStore<S>& store = const_cast<ParamStore<S>&>(store_);
    NetContext<S> ctx(tape, store);
    auto z = forward(ctx, pixels);
    std::vector<double> out(static_cast<std::size_t>(num_classes_));
    for (int c = 0; c < num_classes_; ++c) {
      out[static_cast<std::size_t>(c)] = static_cast<double>(z.value().at(0, c));
    }
    return out;
  }

  double train_step(const Tensor<double>& pixels, const std::vector<int>& y,
                    SgdOptimizer<S>& opt, int epoch) {
    ag::Tape<S> tape;
    NetContext<S> ctx(tape, store_);
    auto z = forward(ctx, pixels);
    Tensor<S> yt({num_classes_});
    Tensor<S> wt({num_classes_});
    for (int c = 0; c < num_classes_; ++c) {
      yt[c] = static_cast<S>(y[static_cast<std::size_t>(c)]);
      wt[c] = S(1);
    }
    auto flat = ag::reshape(z, {num_classes_});
    auto loss = ag::bce_with_logits(flat, yt, wt, static_cast<S>(num_classes_));
    const double v = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(v)) throw DivergenceError("mask train_step: non-finite loss");
    tape.backward(loss.id);
    opt.step(store_, ctx.grads(), epoch);
    return v;
  }

 private:
  ag::Var<S> forward(NetContext<S>& ctx, const Tensor<double>& pixels) const {
    Tensor<S> input({1, pixels.dim(0), pixels.dim(1)});
    for (int i = 0; i < pixels.size(); ++i) input[i] = static_cast<S>(pixels[i]);
    auto fm = nn::backbone_forward(ctx, ctx.input(std::move(input)), "h",
                                   nn::PoolKind::kMax);
    auto pooled = ag::global_avg_pool(fm);  // [1, C_f]
    return nn::linear_layer(ctx, pooled, "h.fc");
  }

  int num_classes_;
  ParamStore<S> store_;
};

// BCE-with-logits multi-label training on the weak split (image labels
// only).
template <typename S>
MaskClassifier<S> train_mask_classifier(const DatasetSplit& target,
                                        const TrainConfig& cfg) {
  cfg.validate();
  MaskClassifier<S> h(target.num_classes(), derive_seed(cfg.seed, 0x8000));
  SgdOptimizer<S> opt(cfg);
  std::vector<int> order(static_cast<std::size_t>(target.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = make_rng(cfg.seed, 0x8e, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), erng);
    for (int i : order) {
      h.train_step(target.pixels(i), target.labels(i), opt, epoch);
    }
  }
  return h;
}

// Masking strategy: every detection of a class whose image-level logit
// falls below tau is removed (its score is zeroed, which drops it from any
// thresholded report). Scores are never increased, so the output is always
// a subset of the input; the operation is idempotent.
inline std::vector<ScoredBox> apply_mask(const std::vector<ScoredBox>& dets,
                                         const std::vector<double>& logits,
                                         double tau) {
  std::vector<ScoredBox> out;
  out.reserve(dets.size());
  for (const ScoredBox& d : dets) {
    if (d.class_id >= 0 && d.class_id < static_cast<int>(logits.size()) &&
        logits[static_cast<std::size_t>(d.class_id)] < tau) {
      continue;
    }
    out.push_back(d);
  }
  return out;
}

}  // namespace lbba
