#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/geometry.hpp"
#include "lbba/tensor.hpp"

namespace lbba {
namespace ag {

// Reverse-mode tape. Every op appends one node holding the forward value,
// a gradient buffer of the same shape, and a closure that scatters the
// node's gradient into its parents. backward() walks the tape once in
// reverse. One tape per training step; nodes are never mutated after
// creation except for their gradient buffers.
template <typename S>
class Tape {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void()> backward;
  };

  int push(Tensor<S> value, std::function<void()> backward = nullptr) {
    Node n;
    n.grad = Tensor<S>(value.shape);
    n.value = std::move(value);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  Tensor<S>& value(int id) { return node(id).value; }
  Tensor<S>& grad(int id) { return node(id).grad; }

  void backward(int root) {
    Node& r = node(root);
    if (r.value.size() != 1) {
      throw DimensionError("backward: root must be scalar");
    }
    r.grad[0] = S(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward) n.backward();
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  Tensor<S>& value() const { return tape->value(id); }
  Tensor<S>& grad() const { return tape->grad(id); }
  const std::vector<int>& shape() const { return value().shape; }
};

template <typename S>
Var<S> leaf(Tape<S>& t, Tensor<S> v) {
  return Var<S>{&t, t.push(std::move(v))};
}

// ---- elementwise ----------------------------------------------------------

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = x.value();
  for (auto& v : out.data) v = v > S(0) ? v : S(0);
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& xv = t.value(xid);
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < g.size(); ++i) {
      if (xv[i] > S(0)) xg[i] += g[i];
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = x.value();
  for (auto& v : out.data) v = S(1) / (S(1) + std::exp(-v));
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& y = t.value(id);
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < g.size(); ++i) {
      xg[i] += g[i] * y[i] * (S(1) - y[i]);
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> clampv(Var<S> x, S lo, S hi) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = x.value();
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, lo, hi]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& xv = t.value(xid);
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < g.size(); ++i) {
      if (xv[i] >= lo && xv[i] <= hi) xg[i] += g[i];
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.value().shape != b.value().shape) {
    throw DimensionError("mul: shape mismatch");
  }
  Tensor<S> out = a.value();
  for (int i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  int id = t.push(std::move(out));
  int aid = a.id, bid = b.id;
  t.node(id).backward = [&t, id, aid, bid]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& av = t.value(aid);
    const Tensor<S>& bv = t.value(bid);
    Tensor<S>& ga = t.grad(aid);
    Tensor<S>& gb = t.grad(bid);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.value().shape != b.value().shape) {
    throw DimensionError("add: shape mismatch");
  }
  Tensor<S> out = a.value();
  for (int i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  int id = t.push(std::move(out));
  int aid = a.id, bid = b.id;
  t.node(id).backward = [&t, id, aid, bid]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& ga = t.grad(aid);
    Tensor<S>& gb = t.grad(bid);
    for (int i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> scale(Var<S> a, S k) {
  Tape<S>& t = *a.tape;
  Tensor<S> out = a.value();
  for (auto& v : out.data) v *= k;
  int id = t.push(std::move(out));
  int aid = a.id;
  t.node(id).backward = [&t, id, aid, k]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& ga = t.grad(aid);
    for (int i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
  };
  return Var<S>{&t, id};
}

// Sum of scalar losses; ignores entries with id < 0 so optional terms can
// be skipped without branching at the call site.
template <typename S>
Var<S> add_scalars(Tape<S>& t, const std::vector<Var<S>>& terms) {
  S total = S(0);
  std::vector<int> ids;
  for (const Var<S>& v : terms) {
    if (v.id < 0) continue;
    total += v.value()[0];
    ids.push_back(v.id);
  }
  int id = t.push(Tensor<S>({1}, {total}));
  t.node(id).backward = [&t, id, ids]() {
    const S g = t.grad(id)[0];
    for (int pid : ids) t.grad(pid)[0] += g;
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  S total = S(0);
  for (const S& v : x.value().data) total += v;
  int id = t.push(Tensor<S>({1}, {total}));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid]() {
    const S g = t.grad(id)[0];
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < xg.size(); ++i) xg[i] += g;
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> reshape(Var<S> x, std::vector<int> shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(std::move(shape), x.value().data);
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < g.size(); ++i) xg[i] += g[i];
  };
  return Var<S>{&t, id};
}

// ---- matrix ops ------------------------------------------------------------

// x:[R,D] @ w:[D,M] + b:[M] -> [R,M]
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const int R = x.value().dim(0), D = x.value().dim(1);
  if (w.value().dim(0) != D || b.value().dim(0) != w.value().dim(1)) {
    throw DimensionError("linear: weight shape mismatch");
  }
  const int M = w.value().dim(1);
  Tensor<S> out({R, M});
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const Tensor<S>& bv = b.value();
  for (int r = 0; r < R; ++r) {
    S* orow = &out.data[static_cast<std::size_t>(r) * M];
    for (int m = 0; m < M; ++m) orow[m] = bv[m];
    const S* xrow = &xv.data[static_cast<std::size_t>(r) * D];
    for (int d = 0; d < D; ++d) {
      const S xval = xrow[d];
      if (xval == S(0)) continue;
      const S* wrow = &wv.data[static_cast<std::size_t>(d) * M];
      for (int m = 0; m < M; ++m) orow[m] += xval * wrow[m];
    }
  }
  int id = t.push(std::move(out));
  int xid = x.id, wid = w.id, bid = b.id;
  t.node(id).backward = [&t, id, xid, wid, bid, R, D, M]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& xv = t.value(xid);
    const Tensor<S>& wv = t.value(wid);
    Tensor<S>& xg = t.grad(xid);
    Tensor<S>& wg = t.grad(wid);
    Tensor<S>& bg = t.grad(bid);
    for (int r = 0; r < R; ++r) {
      const S* grow = &g.data[static_cast<std::size_t>(r) * M];
      const S* xrow = &xv.data[static_cast<std::size_t>(r) * D];
      S* xgrow = &xg.data[static_cast<std::size_t>(r) * D];
      for (int m = 0; m < M; ++m) bg[m] += grow[m];
      for (int d = 0; d < D; ++d) {
        const S* wrow = &wv.data[static_cast<std::size_t>(d) * M];
        S* wgrow = &wg.data[static_cast<std::size_t>(d) * M];
        S acc = S(0);
        const S xval = xrow[d];
        for (int m = 0; m < M; ++m) {
          acc += grow[m] * wrow[m];
          wgrow[m] += xval * grow[m];
        }
        xgrow[d] += acc;
      }
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<int> rows) {
  Tape<S>& t = *x.tape;
  const int M = x.value().dim(1);
  Tensor<S> out({static_cast<int>(rows.size()), M});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int m = 0; m < M; ++m) out.at(static_cast<int>(i), m) = x.value().at(rows[i], m);
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, rows = std::move(rows), M]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int m = 0; m < M; ++m) xg.at(rows[i], m) += g.at(static_cast<int>(i), m);
    }
  };
  return Var<S>{&t, id};
}

// Picks arbitrary flat elements into a tensor of the given shape. Used to
// pull per-anchor logits/deltas out of RPN output planes.
template <typename S>
Var<S> gather_elems(Var<S> x, std::vector<int> flat_idx, std::vector<int> shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(std::move(shape));
  if (static_cast<std::size_t>(out.size()) != flat_idx.size()) {
    throw DimensionError("gather_elems: index count does not match shape");
  }
  for (std::size_t i = 0; i < flat_idx.size(); ++i) {
    out[static_cast<int>(i)] = x.value()[flat_idx[i]];
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, idx = std::move(flat_idx)]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      xg[idx[i]] += g[static_cast<int>(i)];
    }
  };
  return Var<S>{&t, id};
}

namespace detail {

template <typename S>
void softmax_span(const S* in, S* out, int n, int stride) {
  S mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i * stride]);
  S sum = S(0);
  for (int i = 0; i < n; ++i) {
    out[i * stride] = std::exp(in[i * stride] - mx);
    sum += out[i * stride];
  }
  for (int i = 0; i < n; ++i) out[i * stride] /= sum;
}

}  // namespace detail

// Softmax across each row (class axis of an R x C logit matrix).
template <typename S>
Var<S> softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int R = x.value().dim(0), M = x.value().dim(1);
  Tensor<S> out({R, M});
  for (int r = 0; r < R; ++r) {
    detail::softmax_span(&x.value().data[static_cast<std::size_t>(r) * M],
                         &out.data[static_cast<std::size_t>(r) * M], M, 1);
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, R, M]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& p = t.value(id);
    Tensor<S>& xg = t.grad(xid);
    for (int r = 0; r < R; ++r) {
      S dot = S(0);
      for (int m = 0; m < M; ++m) dot += g.at(r, m) * p.at(r, m);
      for (int m = 0; m < M; ++m) {
        xg.at(r, m) += p.at(r, m) * (g.at(r, m) - dot);
      }
    }
  };
  return Var<S>{&t, id};
}

// Softmax down each column (proposal axis; detection stream of the MIL head).
template <typename S>
Var<S> softmax_cols(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int R = x.value().dim(0), M = x.value().dim(1);
  Tensor<S> out({R, M});
  for (int m = 0; m < M; ++m) {
    detail::softmax_span(&x.value().data[static_cast<std::size_t>(m)],
                         &out.data[static_cast<std::size_t>(m)], R, M);
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, R, M]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& p = t.value(id);
    Tensor<S>& xg = t.grad(xid);
    for (int m = 0; m < M; ++m) {
      S dot = S(0);
      for (int r = 0; r < R; ++r) dot += g.at(r, m) * p.at(r, m);
      for (int r = 0; r < R; ++r) {
        xg.at(r, m) += p.at(r, m) * (g.at(r, m) - dot);
      }
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> log_softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int R = x.value().dim(0), M = x.value().dim(1);
  Tensor<S> out({R, M});
  for (int r = 0; r < R; ++r) {
    const S* in = &x.value().data[static_cast<std::size_t>(r) * M];
    S* o = &out.data[static_cast<std::size_t>(r) * M];
    S mx = in[0];
    for (int m = 1; m < M; ++m) mx = std::max(mx, in[m]);
    S sum = S(0);
    for (int m = 0; m < M; ++m) sum += std::exp(in[m] - mx);
    const S lse = mx + std::log(sum);
    for (int m = 0; m < M; ++m) o[m] = in[m] - lse;
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, R, M]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& lp = t.value(id);
    Tensor<S>& xg = t.grad(xid);
    for (int r = 0; r < R; ++r) {
      S gsum = S(0);
      for (int m = 0; m < M; ++m) gsum += g.at(r, m);
      for (int m = 0; m < M; ++m) {
        xg.at(r, m) += g.at(r, m) - std::exp(lp.at(r, m)) * gsum;
      }
    }
  };
  return Var<S>{&t, id};
}

// Column sums of an R x C matrix: q_c = sum_i s[i,c].
template <typename S>
Var<S> col_sums(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int R = x.value().dim(0), M = x.value().dim(1);
  Tensor<S> out({M});
  for (int r = 0; r < R; ++r) {
    for (int m = 0; m < M; ++m) out[m] += x.value().at(r, m);
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, R, M]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (int r = 0; r < R; ++r) {
      for (int m = 0; m < M; ++m) xg.at(r, m) += g[m];
    }
  };
  return Var<S>{&t, id};
}

// ---- spatial ops -----------------------------------------------------------

// 3x3-style convolution, stride 1, zero padding to keep the spatial size.
// x:[Cin,H,W], w:[Cout,Cin,KH,KW], b:[Cout] -> [Cout,H,W]
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const int Cin = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  const int Cout = w.value().dim(0);
  const int KH = w.value().dim(2), KW = w.value().dim(3);
  if (w.value().dim(1) != Cin) throw DimensionError("conv2d: channel mismatch");
  const int ph = KH / 2, pw = KW / 2;
  Tensor<S> out({Cout, H, W});
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  for (int co = 0; co < Cout; ++co) {
    const S bias = b.value()[co];
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) out.at(co, y, xx) = bias;
    }
    for (int ci = 0; ci < Cin; ++ci) {
      for (int ky = 0; ky < KH; ++ky) {
        for (int kx = 0; kx < KW; ++kx) {
          const S wgt = wv.data[((static_cast<std::size_t>(co) * Cin + ci) * KH + ky) * KW + kx];
          if (wgt == S(0)) continue;
          const int y0 = std::max(0, ph - ky), y1 = std::min(H, H + ph - ky);
          for (int y = y0; y < y1; ++y) {
            const int sy = y + ky - ph;
            const S* xrow = &xv.data[(static_cast<std::size_t>(ci) * H + sy) * W];
            S* orow = &out.data[(static_cast<std::size_t>(co) * H + y) * W];
            const int x0 = std::max(0, pw - kx), x1 = std::min(W, W + pw - kx);
            for (int xx = x0; xx < x1; ++xx) {
              orow[xx] += wgt * xrow[xx + kx - pw];
            }
          }
        }
      }
    }
  }
  int id = t.push(std::move(out));
  int xid = x.id, wid = w.id, bid = b.id;
  t.node(id).backward = [&t, id, xid, wid, bid, Cin, Cout, H, W, KH, KW, ph, pw]() {
    const Tensor<S>& g = t.grad(id);
    const Tensor<S>& xv = t.value(xid);
    const Tensor<S>& wv = t.value(wid);
    Tensor<S>& xg = t.grad(xid);
    Tensor<S>& wg = t.grad(wid);
    Tensor<S>& bg = t.grad(bid);
    for (int co = 0; co < Cout; ++co) {
      S bacc = S(0);
      for (int y = 0; y < H; ++y) {
        const S* grow = &g.data[(static_cast<std::size_t>(co) * H + y) * W];
        for (int xx = 0; xx < W; ++xx) bacc += grow[xx];
      }
      bg[co] += bacc;
      for (int ci = 0; ci < Cin; ++ci) {
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const std::size_t widx =
                ((static_cast<std::size_t>(co) * Cin + ci) * KH + ky) * KW + kx;
            const S wgt = wv.data[widx];
            S wacc = S(0);
            const int y0 = std::max(0, ph - ky), y1 = std::min(H, H + ph - ky);
            for (int y = y0; y < y1; ++y) {
              const int sy = y + ky - ph;
              const S* xrow = &xv.data[(static_cast<std::size_t>(ci) * H + sy) * W];
              S* xgrow = &xg.data[(static_cast<std::size_t>(ci) * H + sy) * W];
              const S* grow = &g.data[(static_cast<std::size_t>(co) * H + y) * W];
              const int x0 = std::max(0, pw - kx), x1 = std::min(W, W + pw - kx);
              for (int xx = x0; xx < x1; ++xx) {
                wacc += xrow[xx + kx - pw] * grow[xx];
                xgrow[xx + kx - pw] += wgt * grow[xx];
              }
            }
            wg.data[widx] += wacc;
          }
        }
      }
    }
  };
  return Var<S>{&t, id};
}

// 2x2 max pooling with stride 2; odd trailing rows/cols pool over the
// truncated window so the output is ceil(H/2) x ceil(W/2).
template <typename S>
Var<S> maxpool2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  const int OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<S> out({C, OH, OW});
  auto argmax = std::make_shared<std::vector<int>>(
      static_cast<std::size_t>(C) * OH * OW);
  const Tensor<S>& xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        S best = -std::numeric_limits<S>::infinity();
        int bidx = -1;
        for (int dy = 0; dy < 2; ++dy) {
          const int y = oy * 2 + dy;
          if (y >= H) continue;
          for (int dx = 0; dx < 2; ++dx) {
            const int xx = ox * 2 + dx;
            if (xx >= W) continue;
            const int idx = (c * H + y) * W + xx;
            if (xv[idx] > best) {
              best = xv[idx];
              bidx = idx;
            }
          }
        }
        out.at(c, oy, ox) = best;
        (*argmax)[(static_cast<std::size_t>(c) * OH + oy) * OW + ox] = bidx;
      }
    }
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, argmax]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (int i = 0; i < g.size(); ++i) {
      xg[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
    }
  };
  return Var<S>{&t, id};
}

// 2x2 average pooling with stride 2; truncated windows at odd edges
// average over the cells present. Preserves fractional edge coverage,
// which box regression depends on.
template <typename S>
Var<S> avgpool2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  const int OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<S> out({C, OH, OW});
  const Tensor<S>& xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        S acc = S(0);
        int n = 0;
        for (int dy = 0; dy < 2; ++dy) {
          const int y = oy * 2 + dy;
          if (y >= H) continue;
          for (int dx = 0; dx < 2; ++dx) {
            const int xx = ox * 2 + dx;
            if (xx >= W) continue;
            acc += xv[(c * H + y) * W + xx];
            ++n;
          }
        }
        out.at(c, oy, ox) = acc / static_cast<S>(n);
      }
    }
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, C, H, W, OH, OW]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (int c = 0; c < C; ++c) {
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox) {
          int n = 0;
          for (int dy = 0; dy < 2; ++dy) {
            if (oy * 2 + dy >= H) continue;
            for (int dx = 0; dx < 2; ++dx) {
              if (ox * 2 + dx >= W) continue;
              ++n;
            }
          }
          const S gv = g.at(c, oy, ox) / static_cast<S>(n);
          for (int dy = 0; dy < 2; ++dy) {
            const int y = oy * 2 + dy;
            if (y >= H) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const int xx = ox * 2 + dx;
              if (xx >= W) continue;
              xg[(c * H + y) * W + xx] += gv;
            }
          }
        }
      }
    }
  };
  return Var<S>{&t, id};
}

template <typename S>
Var<S> global_avg_pool(Var<S> x) {
  Tape<S>& t = *x.tape;
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  Tensor<S> out({1, C});
  const S inv = S(1) / static_cast<S>(H * W);
  for (int c = 0; c < C; ++c) {
    S acc = S(0);
    for (int y = 0; y < H; ++y) {
      for (int xx = 0; xx < W; ++xx) acc += x.value().at(c, y, xx);
    }
    out.at(0, c) = acc * inv;
  }
  int id = t.push(std::move(out));
  int xid = x.id;
  t.node(id).backward = [&t, id, xid, C, H, W, inv]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& xg = t.grad(xid);
    for (int c = 0; c < C; ++c) {
      const S gc = g.at(0, c) * inv;
      for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) xg.at(c, y, xx) += gc;
      }
    }
  };
  return Var<S>{&t, id};
}

// Bilinear crop-resize of each box to a k x k grid ("ROI align" with one
// sample per cell). fm:[C,H',W'] in feature coordinates; boxes are pixel
// coordinates divided by `stride` before sampling. Output [R, C*k*k].
// Sampling weights depend only on geometry, so they are cached and reused
// by the backward scatter. Boxes are data, not differentiated.
template <typename S>
Var<S> roi_pool(Var<S> fm, const std::vector<Box>& boxes, double stride, int k) {
  Tape<S>& t = *fm.tape;
  const int C = fm.value().dim(0), H = fm.value().dim(1), W = fm.value().dim(2);
  const int R = static_cast<int>(boxes.size());
  struct Taps {
    int i00, i01, i10, i11;
    S w00, w01, w10, w11;
  };
  auto taps = std::make_shared<std::vector<Taps>>(
      static_cast<std::size_t>(R) * k * k);
  for (int r = 0; r < R; ++r) {
    const Box& b = boxes[static_cast<std::size_t>(r)];
    require_valid(b, "roi_pool");
    const double fx1 = b.x1 / stride, fy1 = b.y1 / stride;
    const double fw = b.width() / stride, fh = b.height() / stride;
    for (int gy = 0; gy < k; ++gy) {
      for (int gx = 0; gx < k; ++gx) {
        // cell-center sample, shifted to index space (pixel centers at ints)
        const double sx = fx1 + (gx + 0.5) * fw / k - 0.5;
        const double sy = fy1 + (gy + 0.5) * fh / k - 0.5;
        const double cxs = std::clamp(sx, 0.0, static_cast<double>(W - 1));
        const double cys = std::clamp(sy, 0.0, static_cast<double>(H - 1));
        const int x0 = static_cast<int>(std::floor(cxs));
        const int y0 = static_cast<int>(std::floor(cys));
        const int x1 = std::min(x0 + 1, W - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const S ax = static_cast<S>(cxs - x0);
        const S ay = static_cast<S>(cys - y0);
        Taps& tp = (*taps)[(static_cast<std::size_t>(r) * k + gy) * k + gx];
        tp.i00 = y0 * W + x0;
        tp.i01 = y0 * W + x1;
        tp.i10 = y1 * W + x0;
        tp.i11 = y1 * W + x1;
        tp.w00 = (S(1) - ay) * (S(1) - ax);
        tp.w01 = (S(1) - ay) * ax;
        tp.w10 = ay * (S(1) - ax);
        tp.w11 = ay * ax;
      }
    }
  }
  Tensor<S> out({R, C * k * k});
  const Tensor<S>& fv = fm.value();
  for (int r = 0; r < R; ++r) {
    S* orow = &out.data[static_cast<std::size_t>(r) * C * k * k];
    for (int c = 0; c < C; ++c) {
      const S* plane = &fv.data[static_cast<std::size_t>(c) * H * W];
      for (int cell = 0; cell < k * k; ++cell) {
        const Taps& tp = (*taps)[static_cast<std::size_t>(r) * k * k + cell];
        orow[c * k * k + cell] = tp.w00 * plane[tp.i00] + tp.w01 * plane[tp.i01] +
                                 tp.w10 * plane[tp.i10] + tp.w11 * plane[tp.i11];
      }
    }
  }
  int id = t.push(std::move(out));
  int fid = fm.id;
  t.node(id).backward = [&t, id, fid, taps, R, C, H, W, k]() {
    const Tensor<S>& g = t.grad(id);
    Tensor<S>& fg = t.grad(fid);
    for (int r = 0; r < R; ++r) {
      const S* grow = &g.data[static_cast<std::size_t>(r) * C * k * k];
      for (int c = 0; c < C; ++c) {
        S* plane = &fg.data[static_cast<std::size_t>(c) * H * W];
        for (int cell = 0; cell < k * k; ++cell) {
          const Taps& tp = (*taps)[static_cast<std::size_t>(r) * k * k + cell];
          const S gv = grow[c * k * k + cell];
          plane[tp.i00] += tp.w00 * gv;
          plane[tp.i01] += tp.w01 * gv;
          plane[tp.i10] += tp.w10 * gv;
          plane[tp.i11] += tp.w11 * gv;
        }
      }
    }
  };
  return Var<S>{&t, id};
}

// ---- loss primitives -------------------------------------------------------

// Binary cross-entropy on probabilities (caller clamps away from {0,1}).
template <typename S>
Var<S> bce(Var<S> p, const Tensor<S>& y) {
  Tape<S>& t = *p.tape;
  if (p.value().size() != y.size()) throw DimensionError("bce: size mismatch");
  S total = S(0);
  for (int i = 0; i < y.size(); ++i) {
    const S pi = p.value()[i];
    total += -(y[i] * std::log(pi) + (S(1) - y[i]) * std::log(S(1) - pi));
  }
  int id = t.push(Tensor<S>({1}, {total}));
  int pid = p.id;
  auto target = std::make_shared<Tensor<S>>(y);
  t.node(id).backward = [&t, id, pid, target]() {
    const S g = t.grad(id)[0];
    const Tensor<S>& pv = t.value(pid);
    Tensor<S>& pg = t.grad(pid);
    for (int i = 0; i < pv.size(); ++i) {
      pg[i] += g * (-(*target)[i] / pv[i] + (S(1) - (*target)[i]) / (S(1) - pv[i]));
    }
  };
  return Var<S>{&t, id};
}

// Numerically stable weighted BCE on logits, normalized by `norm`.
template <typename S>
Var<S> bce_with_logits(Var<S> z, const Tensor<S>& y, const Tensor<S>& weight,
                       S norm) {
  Tape<S>& t = *z.tape;
  if (z.value().size() != y.size() || y.size() != weight.size()) {
    throw DimensionError("bce_with_logits: size mismatch");
  }
  S total = S(0);
  for (int i = 0; i < y.size(); ++i) {
    const S zi = z.value()[i];
    // log(1+exp(z)) - y*z, stable for both signs
    const S softplus = zi > S(0) ? zi + std::log1p(std::exp(-zi))
                                 : std::log1p(std::exp(zi));
    total += weight[i] * (softplus - y[i] * zi);
  }
  total /= norm;
  int id = t.push(Tensor<S>({1}, {total}));
  int zid = z.id;
  auto target = std::make_shared<Tensor<S>>(y);
  auto wgt = std::make_shared<Tensor<S>>(weight);
  t.node(id).backward = [&t, id, zid, target, wgt, norm]() {
    const S g = t.grad(id)[0] / norm;
    const Tensor<S>& zv = t.value(zid);
    Tensor<S>& zg = t.grad(zid);
    for (int i = 0; i < zv.size(); ++i) {
      const S sig = S(1) / (S(1) + std::exp(-zv[i]));
      zg[i] += g * (*wgt)[i] * (sig - (*target)[i]);
    }
  };
  return Var<S>{&t, id};
}

// Weighted negative log likelihood over row-wise log probabilities.
template <typename S>
Var<S> weighted_nll_rows(Var<S> logp, const std::vector<int>& labels,
                         const std::vector<S>& weights, S norm) {
  Tape<S>& t = *logp.tape;
  const int R = logp.value().dim(0);
  if (static_cast<int>(labels.size()) != R ||
      static_cast<int>(weights.size()) != R) {
    throw DimensionError("weighted_nll_rows: label/weight count mismatch");
  }
  S total = S(0);
  for (int r = 0; r < R; ++r) {
    total -= weights[static_cast<std::size_t>(r)] *
             logp.value().at(r, labels[static_cast<std::size_t>(r)]);
  }
  total /= norm;
  int id = t.push(Tensor<S>({1}, {total}));
  int lid = logp.id;
  auto lab = std::make_shared<std::vector<int>>(labels);
  auto wgt = std::make_shared<std::vector<S>>(weights);
  t.node(id).backward = [&t, id, lid, lab, wgt, norm, R]() {
    const S g = t.grad(id)[0] / norm;
    Tensor<S>& lg = t.grad(lid);
    for (int r = 0; r < R; ++r) {
      lg.at(r, (*lab)[static_cast<std::size_t>(r)]) -=
          g * (*wgt)[static_cast<std::size_t>(r)];
    }
  };
  return Var<S>{&t, id};
}

// Smooth-L1 between predicted rows and constant targets, divided by `norm`.
template <typename S>
Var<S> smooth_l1_rows(Var<S> pred, const Tensor<S>& target, S norm) {
  Tape<S>& t = *pred.tape;
  if (pred.value().shape != target.shape) {
    throw DimensionError("smooth_l1_rows: shape mismatch");
  }
  S total = S(0);
  for (int i = 0; i < target.size(); ++i) {
    total += static_cast<S>(smooth_l1_term(
        static_cast<double>(pred.value()[i] - target[i])));
  }
  total /= norm;
  int id = t.push(Tensor<S>({1}, {total}));
  int pid = pred.id;
  auto tgt = std::make_shared<Tensor<S>>(target);
  t.node(id).backward = [&t, id, pid, tgt, norm]() {
    const S g = t.grad(id)[0] / norm;
    const Tensor<S>& pv = t.value(pid);
    Tensor<S>& pg = t.grad(pid);
    for (int i = 0; i < pv.size(); ++i) {
      pg[i] += g * static_cast<S>(smooth_l1_term_grad(
                       static_cast<double>(pv[i] - (*tgt)[i])));
    }
  };
  return Var<S>{&t, id};
}

}  // namespace ag
}  // namespace lbba
