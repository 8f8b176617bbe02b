#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/rng.hpp"
#include "lbba/tensor.hpp"

namespace lbba {

// Shape archetypes the renderer knows. Auxiliary and target rosters are
// disjoint subsets of this list.
enum class ShapeKind {
  kSquare,
  kDisc,
  kTriangle,
  kRing,
  kCross,
  kHBar,
  kDiamond,
  kFrame,
  kVBar,
  kTee,
};

inline const std::vector<std::string>& all_shape_names() {
  static const std::vector<std::string> names = {
      "square", "disc", "triangle", "ring",  "cross",
      "hbar",   "diamond", "frame", "vbar",  "tee"};
  return names;
}

inline ShapeKind shape_from_name(const std::string& name) {
  const auto& names = all_shape_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<ShapeKind>(i);
  }
  throw ConfigError("unknown shape archetype: " + name);
}

struct SceneConfig {
  int height = 64;
  int width = 64;
  int instances_min = 1;
  int instances_max = 3;
  double size_min = 12.0;   // object side length range, pixels
  double size_max = 28.0;
  double intensity_min = 0.55;
  double intensity_max = 0.95;
  double noise = 0.10;      // background noise amplitude
  bool allow_occlusion = false;
  int max_proposals = 128;
  double min_proposal_size = 6.0;

  void validate(int n_classes) const {
    if (height < 32 || width < 32) throw ConfigError("SceneConfig: image size must be >= 32");
    if (n_classes < 2) throw ConfigError("SceneConfig: need at least 2 classes");
    if (instances_min < 1 || instances_max < instances_min) {
      throw ConfigError("SceneConfig: bad instances range");
    }
    if (size_max > std::min(height, width) - 4) {
      throw ConfigError("SceneConfig: instance sizes must fit inside the image");
    }
  }
};

struct Instance {
  int class_id = 0;  // index into the split's class roster
  Box box;
};

// One image plus its annotations. Pixels are quantized to the 8-bit grid
// at render time so the on-disk PGM round trip is lossless.
struct ImageSample {
  Tensor<double> pixels;  // [H,W] in [0,1]
  std::vector<Instance> instances;
  std::vector<int> image_labels;  // class-presence vector over the roster
};

enum class AnnotationMode { kFull, kWeak };

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<std::string> tags;  // grid | blob | jitter | rand
};

// A generated or loaded dataset. In weak mode the public instance accessor
// refuses; the private ground truth (when present) is reserved for metric
// code and every read is counted so training isolation can be audited.
class DatasetSplit {
 public:
  DatasetSplit() = default;
  DatasetSplit(std::vector<std::string> class_names, AnnotationMode mode)
      : class_names_(std::move(class_names)), mode_(mode) {}

  // Copies share no counter; the audit is per-object.
  DatasetSplit(const DatasetSplit& o)
      : samples_(o.samples_),
        proposals_(o.proposals_),
        class_names_(o.class_names_),
        mode_(o.mode_),
        has_private_gt_(o.has_private_gt_),
        seed_(o.seed_) {}
  DatasetSplit& operator=(const DatasetSplit& o) {
    samples_ = o.samples_;
    proposals_ = o.proposals_;
    class_names_ = o.class_names_;
    mode_ = o.mode_;
    has_private_gt_ = o.has_private_gt_;
    seed_ = o.seed_;
    return *this;
  }
  DatasetSplit(DatasetSplit&&) = default;
  DatasetSplit& operator=(DatasetSplit&&) = default;

  int size() const { return static_cast<int>(samples_.size()); }
  int num_classes() const { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  AnnotationMode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  const Tensor<double>& pixels(int i) const { return samples_[idx(i)].pixels; }
  const std::vector<int>& labels(int i) const { return samples_[idx(i)].image_labels; }
  const ProposalSet& proposals(int i) const { return proposals_[idx(i)]; }

  // Full-annotation access; rejected in weak mode.
  const std::vector<Instance>& instances(int i) const {
    if (mode_ != AnnotationMode::kFull) {
      throw ModeError("DatasetSplit: instance boxes are hidden in weak mode");
    }
    return samples_[idx(i)].instances;
  }

  // Metric-only channel. Works in weak mode when private GT was retained
  // in memory; every call is recorded in the audit counter.
  const std::vector<Instance>& private_gt(int i) const {
    if (!has_private_gt_) {
      throw ModeError("DatasetSplit: no private annotations available");
    }
    gt_access_count_.fetch_add(1, std::memory_order_relaxed);
    return samples_[idx(i)].instances;
  }
  bool has_private_gt() const { return has_private_gt_; }
  std::uint64_t gt_access_count() const { return gt_access_count_.load(); }

  // View of the same data with instance boxes withheld from the public
  // accessor; private GT stays available for metrics only.
  DatasetSplit weak_view() const {
    DatasetSplit v(*this);
    v.mode_ = AnnotationMode::kWeak;
    return v;
  }

  void push_sample(ImageSample sample, ProposalSet props) {
    samples_.push_back(std::move(sample));
    proposals_.push_back(std::move(props));
  }
  void set_has_private_gt(bool v) { has_private_gt_ = v; }
  void resize(int n) {
    samples_.resize(static_cast<std::size_t>(n));
    proposals_.resize(static_cast<std::size_t>(n));
  }
  ImageSample& mutable_sample(int i) { return samples_[idx(i)]; }
  ProposalSet& mutable_proposals(int i) { return proposals_[idx(i)]; }

 private:
  std::size_t idx(int i) const {
    if (i < 0 || i >= size()) throw Error("DatasetSplit: index out of range");
    return static_cast<std::size_t>(i);
  }

  std::vector<ImageSample> samples_;
  std::vector<ProposalSet> proposals_;
  std::vector<std::string> class_names_;
  AnnotationMode mode_ = AnnotationMode::kFull;
  bool has_private_gt_ = true;
  std::uint64_t seed_ = 0;
  mutable std::atomic<std::uint64_t> gt_access_count_{0};
};

namespace detail {

// Signed "inside" test per shape on a unit square centered at the origin.
inline bool shape_covers(ShapeKind kind, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (kind) {
    case ShapeKind::kSquare:
      return au <= 0.5 && av <= 0.5;
    case ShapeKind::kDisc:
      return u * u + v * v <= 0.25;
    case ShapeKind::kTriangle:  // apex at the top, base at the bottom
      return av <= 0.5 && au <= (v + 0.5) * 0.5;
    case ShapeKind::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 0.25 && r2 >= 0.09;
    }
    case ShapeKind::kCross:
      return (au <= 0.16 && av <= 0.5) || (av <= 0.16 && au <= 0.5);
    case ShapeKind::kHBar:
      return au <= 0.5 && av <= 0.18;
    case ShapeKind::kDiamond:
      return au + av <= 0.5;
    case ShapeKind::kFrame:
      return au <= 0.5 && av <= 0.5 && (au >= 0.28 || av >= 0.28);
    case ShapeKind::kVBar:
      return au <= 0.18 && av <= 0.5;
    case ShapeKind::kTee:
      return (av <= 0.5 && v <= -0.14 && au <= 0.5) || (au <= 0.16 && av <= 0.5);
  }
  return false;
}

// Rasterizes one shape into the canvas and returns its tight pixel bbox.
inline Box render_shape(Tensor<double>& canvas, ShapeKind kind, double cx,
                        double cy, double size, double intensity) {
  const int H = canvas.dim(0), W = canvas.dim(1);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - size)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + size)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - size)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + size)));
  double bx1 = 1e9, by1 = 1e9, bx2 = -1e9, by2 = -1e9;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      // 2x2 supersampling for soft edges
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx;
          const double py = y + 0.25 + 0.5 * sy;
          if (shape_covers(kind, (px - cx) / size, (py - cy) / size)) ++hits;
        }
      }
      if (hits == 0) continue;
      const double cover = hits / 4.0;
      double& p = canvas.at(y, x);
      p = std::max(p, intensity * cover);
      if (cover >= 0.5) {
        bx1 = std::min(bx1, static_cast<double>(x));
        by1 = std::min(by1, static_cast<double>(y));
        bx2 = std::max(bx2, static_cast<double>(x) + 1.0);
        by2 = std::max(by2, static_cast<double>(y) + 1.0);
      }
    }
  }
  if (bx2 <= bx1) return Box{};  // nothing rendered (should not happen)
  return Box{bx1, by1, bx2, by2};
}

inline void quantize_to_8bit(Tensor<double>& pixels) {
  for (auto& v : pixels.data) {
    v = std::clamp(v, 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
}

}  // namespace detail

// Renders one image worth of scene content. Deterministic in
// (config, roster, seed, index).
inline ImageSample generate_image(const SceneConfig& cfg,
                                  const std::vector<ShapeKind>& roster,
                                  std::uint64_t seed, int index) {
  auto rng = make_rng(seed, 0x5ce7e, static_cast<std::uint64_t>(index));
  const int H = cfg.height, W = cfg.width;
  ImageSample sample;
  sample.pixels = Tensor<double>({H, W});
  for (auto& v : sample.pixels.data) {
    v = 0.12 + uniform(rng, -cfg.noise, cfg.noise);
  }
  const int count = uniform_int(rng, cfg.instances_min, cfg.instances_max);
  sample.image_labels.assign(roster.size(), 0);
  for (int inst = 0; inst < count; ++inst) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int cls = uniform_int(rng, 0, static_cast<int>(roster.size()) - 1);
      const double size = uniform(rng, cfg.size_min, cfg.size_max);
      const double cx = uniform(rng, size * 0.55, W - size * 0.55);
      const double cy = uniform(rng, size * 0.55, H - size * 0.55);
      const Box trial{cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2};
      if (!cfg.allow_occlusion) {
        // keep a clear gap so coarse proposal generators can separate
        // neighboring objects
        const double margin = 5.0;
        bool clash = false;
        for (const Instance& prev : sample.instances) {
          const bool apart = trial.x2 + margin <= prev.box.x1 ||
                             prev.box.x2 + margin <= trial.x1 ||
                             trial.y2 + margin <= prev.box.y1 ||
                             prev.box.y2 + margin <= trial.y1;
          if (!apart) {
            clash = true;
            break;
          }
        }
        if (clash) continue;
      }
      const double intensity =
          uniform(rng, cfg.intensity_min, cfg.intensity_max);
      const Box tight = detail::render_shape(
          sample.pixels, roster[static_cast<std::size_t>(cls)], cx, cy, size,
          intensity);
      if (!tight.valid()) continue;
      sample.instances.push_back(Instance{cls, tight});
      sample.image_labels[static_cast<std::size_t>(cls)] = 1;
      break;
    }
  }
  // At least one instance per image: retry the whole scene with a shifted
  // seed if placement failed everywhere (vanishingly rare).
  if (sample.instances.empty()) {
    return generate_image(cfg, roster, seed + 0x9e37, index);
  }
  detail::quantize_to_8bit(sample.pixels);
  return sample;
}

// Label-free proposal generator: multiscale sliding grid, connected
// components of a coarse intensity threshold (plus jittered replicas), and
// uniform random boxes. Sees pixels only — annotations never reach it.
inline ProposalSet propose(const Tensor<double>& pixels, const SceneConfig& cfg,
                           std::uint64_t seed) {
  const int H = pixels.dim(0), W = pixels.dim(1);
  auto rng = make_rng(seed, 0xb10b5);
  ProposalSet out;
  auto push = [&](const Box& b, const char* tag) {
    Box c = clip_box(b, W, H);
    // grow undersized boxes about their center instead of dropping them;
    // thin components would otherwise never yield a proposal
    if (c.width() < cfg.min_proposal_size) {
      const double cx = c.cx();
      c.x1 = cx - cfg.min_proposal_size / 2;
      c.x2 = cx + cfg.min_proposal_size / 2;
    }
    if (c.height() < cfg.min_proposal_size) {
      const double cy = c.cy();
      c.y1 = cy - cfg.min_proposal_size / 2;
      c.y2 = cy + cfg.min_proposal_size / 2;
    }
    c = clip_box(c, W, H);
    if (c.width() < cfg.min_proposal_size - 1e-9 ||
        c.height() < cfg.min_proposal_size - 1e-9) {
      return;
    }
    out.boxes.push_back(c);
    out.tags.emplace_back(tag);
  };

  // (a) multi-scale sliding grid
  for (double s : {14.0, 22.0, 32.0}) {
    if (s > std::min(H, W)) continue;
    const double step = s / 2.0;
    for (double y = 0; y + s <= H + 1e-9; y += step) {
      for (double x = 0; x + s <= W + 1e-9; x += step) {
        push(Box{x, y, x + s, y + s}, "grid");
      }
    }
  }

  // (b) components of the thresholded, 4x-downsampled image. The coarse
  // grid keeps these deliberately sloppy; jittered replicas add variety.
  const int kDown = 4;
  const int h2 = H / kDown, w2 = W / kDown;
  std::vector<char> mask(static_cast<std::size_t>(h2) * w2, 0);
  for (int y = 0; y < h2; ++y) {
    for (int x = 0; x < w2; ++x) {
      double acc = 0.0;
      for (int dy = 0; dy < kDown; ++dy) {
        for (int dx = 0; dx < kDown; ++dx) {
          acc += pixels.at(kDown * y + dy, kDown * x + dx);
        }
      }
      mask[static_cast<std::size_t>(y) * w2 + x] =
          acc / (kDown * kDown) > 0.32 ? 1 : 0;
    }
  }
  std::vector<int> comp(static_cast<std::size_t>(h2) * w2, -1);
  int n_comp = 0;
  std::vector<std::array<int, 4>> bounds;  // x0,y0,x1,y1 in coarse cells
  std::vector<int> areas;
  std::vector<int> stack;
  for (int y = 0; y < h2; ++y) {
    for (int x = 0; x < w2; ++x) {
      const int at = y * w2 + x;
      if (!mask[static_cast<std::size_t>(at)] || comp[static_cast<std::size_t>(at)] >= 0) continue;
      const int c = n_comp++;
      bounds.push_back({x, y, x, y});
      areas.push_back(0);
      stack.push_back(at);
      comp[static_cast<std::size_t>(at)] = c;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cy = cur / w2, cxx = cur % w2;
        ++areas[static_cast<std::size_t>(c)];
        auto& b = bounds[static_cast<std::size_t>(c)];
        b[0] = std::min(b[0], cxx);
        b[1] = std::min(b[1], cy);
        b[2] = std::max(b[2], cxx);
        b[3] = std::max(b[3], cy);
        const int nbr[4][2] = {{cxx - 1, cy}, {cxx + 1, cy}, {cxx, cy - 1}, {cxx, cy + 1}};
        for (const auto& nb : nbr) {
          if (nb[0] < 0 || nb[0] >= w2 || nb[1] < 0 || nb[1] >= h2) continue;
          const int ni = nb[1] * w2 + nb[0];
          if (mask[static_cast<std::size_t>(ni)] && comp[static_cast<std::size_t>(ni)] < 0) {
            comp[static_cast<std::size_t>(ni)] = c;
            stack.push_back(ni);
          }
        }
      }
    }
  }
  for (int c = 0; c < n_comp; ++c) {
    if (areas[static_cast<std::size_t>(c)] < 2) continue;  // noise speckle
    const auto& b = bounds[static_cast<std::size_t>(c)];
    const double k = kDown;
    const Box blob{k * b[0], k * b[1], k * (b[2] + 1), k * (b[3] + 1)};
    push(blob, "blob");
    const double jx = 0.18 * blob.width(), jy = 0.18 * blob.height();
    for (int rep = 0; rep < 4; ++rep) {
      Box j{blob.x1 + uniform(rng, -jx, jx), blob.y1 + uniform(rng, -jy, jy),
            blob.x2 + uniform(rng, -jx, jx), blob.y2 + uniform(rng, -jy, jy)};
      if (j.x2 - j.x1 < cfg.min_proposal_size) continue;
      if (j.y2 - j.y1 < cfg.min_proposal_size) continue;
      push(j, "jitter");
    }
    // inward replicas: the coarse grid inflates thin components, so a few
    // shrunk variants keep recall up for bar-like shapes
    for (int rep = 0; rep < 3; ++rep) {
      Box j{blob.x1 + uniform(rng, 0.0, 0.3) * blob.width(),
            blob.y1 + uniform(rng, 0.0, 0.3) * blob.height(),
            blob.x2 - uniform(rng, 0.0, 0.3) * blob.width(),
            blob.y2 - uniform(rng, 0.0, 0.3) * blob.height()};
      if (j.x2 - j.x1 < cfg.min_proposal_size) continue;
      if (j.y2 - j.y1 < cfg.min_proposal_size) continue;
      push(j, "jitter");
    }
  }

  // (c) uniform random boxes
  for (int i = 0; i < 16; ++i) {
    const double w = uniform(rng, cfg.min_proposal_size + 2.0, W * 0.6);
    const double h = uniform(rng, cfg.min_proposal_size + 2.0, H * 0.6);
    const double x = uniform(rng, 0.0, W - w);
    const double y = uniform(rng, 0.0, H - h);
    push(Box{x, y, x + w, y + h}, "rand");
  }

  // clip count by seeded subsampling
  if (static_cast<int>(out.boxes.size()) > cfg.max_proposals) {
    std::vector<int> order(out.boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(cfg.max_proposals));
    std::sort(order.begin(), order.end());
    ProposalSet trimmed;
    for (int i : order) {
      trimmed.boxes.push_back(out.boxes[static_cast<std::size_t>(i)]);
      trimmed.tags.push_back(out.tags[static_cast<std::size_t>(i)]);
    }
    out = std::move(trimmed);
  }
  return out;
}

// Builds a split of n_images scenes over the named class subset.
// mode == kWeak strips instance boxes from the public accessor while the
// private channel stays available for metrics.
inline DatasetSplit generate_dataset(const SceneConfig& cfg,
                                     const std::vector<std::string>& class_subset,
                                     int n_images, std::uint64_t seed,
                                     AnnotationMode mode, int num_threads = 1) {
  if (class_subset.empty()) throw ConfigError("generate_dataset: empty class subset");
  if (n_images < 1) throw ConfigError("generate_dataset: n_images must be >= 1");
  cfg.validate(static_cast<int>(class_subset.size()));
  std::set<std::string> uniq(class_subset.begin(), class_subset.end());
  if (uniq.size() != class_subset.size()) {
    throw ConfigError("generate_dataset: duplicate class in subset");
  }
  std::vector<ShapeKind> roster;
  roster.reserve(class_subset.size());
  for (const auto& name : class_subset) roster.push_back(shape_from_name(name));

  DatasetSplit split(class_subset, mode);
  split.set_seed(seed);
  split.resize(n_images);
  // Per-image seeds keep the result independent of thread count.
  auto fill_range = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      ImageSample sample = generate_image(cfg, roster, seed, i);
      ProposalSet props = propose(
          sample.pixels, cfg, derive_seed(seed, 0x9999, static_cast<std::uint64_t>(i)));
      split.mutable_sample(i) = std::move(sample);
      split.mutable_proposals(i) = std::move(props);
    }
  };
  const int threads = std::max(1, num_threads);
  if (threads == 1) {
    fill_range(0, n_images);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_images + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int begin = t * chunk;
      const int end = std::min(n_images, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(fill_range, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return split;
}

}  // namespace lbba
