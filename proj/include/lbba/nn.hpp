#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lbba/autodiff.hpp"
#include "lbba/error.hpp"
#include "lbba/param_store.hpp"
#include "lbba/tensor.hpp"

namespace lbba {

// Backbone geometry shared by every network in the pipeline: three 3x3
// conv layers (1->8->16->32) with ReLU, 2x2 max pooling after the first
// two, overall stride 4.
struct BackboneSpec {
  static constexpr int kChannels[3] = {8, 16, 32};
  static constexpr int kStride = 4;
  static constexpr int kOutChannels = 32;
};

// ROI head geometry: bilinear k x k pooling then a shared hidden layer.
// Pooling happens on a context-enlarged window so the head can see object
// edges that fall outside an offset proposal; regression targets are still
// encoded against the original box.
struct RoiSpec {
  static constexpr int kPool = 4;  // k
  static constexpr int kNeck = 96;
  static constexpr double kContext = 1.75;
  static constexpr int feat_dim() { return BackboneSpec::kOutChannels * kPool * kPool; }
};

// Regression heads operate in sigma-normalized delta space so residuals sit
// at O(1) and the smooth-L1 gradient is commensurate with the
// classification terms.
constexpr double kDeltaStd[4] = {0.1, 0.1, 0.2, 0.2};

inline void encode_normalized(const Box& box, const Box& anchor, double* out4) {
  const BoxDelta d = encode(box, anchor);
  out4[0] = d.tx / kDeltaStd[0];
  out4[1] = d.ty / kDeltaStd[1];
  out4[2] = d.tw / kDeltaStd[2];
  out4[3] = d.th / kDeltaStd[3];
}

// Denormalizes a head output row, clamps the real-scale deltas to +-4 and
// decodes onto the anchor.
inline Box decode_normalized(double tx, double ty, double tw, double th,
                             const Box& anchor) {
  BoxDelta d{tx * kDeltaStd[0], ty * kDeltaStd[1], tw * kDeltaStd[2],
             th * kDeltaStd[3]};
  d.tx = std::clamp(d.tx, -4.0, 4.0);
  d.ty = std::clamp(d.ty, -4.0, 4.0);
  d.tw = std::clamp(d.tw, -4.0, 4.0);
  d.th = std::clamp(d.th, -4.0, 4.0);
  return decode(d, anchor);
}

// Scales a box about its center and clips to image bounds.
inline Box context_box(const Box& b, double factor, double width, double height) {
  const double w = b.width() * factor, h = b.height() * factor;
  return clip_box(Box{b.cx() - w / 2, b.cy() - h / 2, b.cx() + w / 2, b.cy() + h / 2},
                  width, height);
}

inline std::vector<Box> context_boxes(const std::vector<Box>& boxes, double factor,
                                      double width, double height) {
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const Box& b : boxes) out.push_back(context_box(b, factor, width, height));
  return out;
}

// Binds a ParamStore to a tape for one forward/backward pass. Parameters
// become leaves on first use; grads() collects their gradient buffers
// after backward().
template <typename S>
class NetContext {
 public:
  NetContext(ag::Tape<S>& tape, ParamStore<S>& store)
      : tape_(&tape), store_(&store) {}

  ag::Tape<S>& tape() { return *tape_; }

  ag::Var<S> param(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    ag::Var<S> v = ag::leaf(*tape_, store_->at(name));
    leaves_.emplace(name, v);
    return v;
  }

  ag::Var<S> input(Tensor<S> t) { return ag::leaf(*tape_, std::move(t)); }

  std::map<std::string, Tensor<S>> grads() const {
    std::map<std::string, Tensor<S>> out;
    for (const auto& [name, var] : leaves_) out.emplace(name, var.grad());
    return out;
  }

 private:
  ag::Tape<S>* tape_;
  ParamStore<S>* store_;
  std::map<std::string, ag::Var<S>> leaves_;
};

namespace nn {

// Registers backbone parameters under `<prefix>.convN.{w,b}`.
template <typename S>
void init_backbone(ParamStore<S>& store, const std::string& prefix) {
  int cin = 1;
  for (int layer = 0; layer < 3; ++layer) {
    const int cout = BackboneSpec::kChannels[layer];
    const std::string base = prefix + ".conv" + std::to_string(layer + 1);
    store.add(base + ".w", {cout, cin, 3, 3}, cin * 9);
    store.add_zeros(base + ".b", {cout});
    cin = cout;
  }
}

enum class PoolKind { kAvg, kMax };

// pixels [1,H,W] -> feature map [32, ceil(H/4), ceil(W/4)]. Detection and
// adjustment backbones pool by averaging: box regression needs the
// fractional edge coverage that max pooling destroys. The image-level
// classifier keeps max pooling for its invariance.
template <typename S>
ag::Var<S> backbone_forward(NetContext<S>& ctx, ag::Var<S> pixels,
                            const std::string& prefix,
                            PoolKind pool = PoolKind::kAvg) {
  ag::Var<S> x = pixels;
  for (int layer = 0; layer < 3; ++layer) {
    const std::string base = prefix + ".conv" + std::to_string(layer + 1);
    x = ag::conv2d(x, ctx.param(base + ".w"), ctx.param(base + ".b"));
    x = ag::relu(x);
    if (layer < 2) {
      x = pool == PoolKind::kAvg ? ag::avgpool2(x) : ag::maxpool2(x);
    }
  }
  return x;
}

template <typename S>
void init_linear(ParamStore<S>& store, const std::string& base, int in,
                 int out) {
  store.add(base + ".w", {in, out}, in);
  store.add_zeros(base + ".b", {out});
}

template <typename S>
ag::Var<S> linear_layer(NetContext<S>& ctx, ag::Var<S> x,
                        const std::string& base) {
  return ag::linear(x, ctx.param(base + ".w"), ctx.param(base + ".b"));
}

}  // namespace nn

// Anchor grid for the lightweight RPNs: one square anchor per feature cell
// per scale.
struct AnchorSpec {
  std::vector<double> scales = {8.0, 16.0, 32.0};  // side length in pixels
};

// Scale-major ordering: anchor i = a*H*W + y*W + x lines up with the flat
// layout of the [A,H,W] objectness plane, so anchor index doubles as the
// flat tensor offset.
inline std::vector<Box> make_anchors(int fm_h, int fm_w, double stride,
                                     const AnchorSpec& spec) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fm_h) * fm_w * spec.scales.size());
  for (double s : spec.scales) {
    for (int y = 0; y < fm_h; ++y) {
      for (int x = 0; x < fm_w; ++x) {
        const double cx = (x + 0.5) * stride;
        const double cy = (y + 0.5) * stride;
        anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
    }
  }
  return anchors;
}

}  // namespace lbba
