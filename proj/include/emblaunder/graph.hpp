#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "emblaunder/tensor.hpp"

namespace emblaunder {

// R[M,N] (+)= P[M,K] * Q[K,N]. tp/tq flag transposed storage: tp means P is
// stored [K,M], tq means Q is stored [N,K]. Transposed right operands are
// repacked into a per-thread scratch so every inner loop stays unit-stride
// and vectorizes; the repack is O(N*K) against O(M*N*K) multiply work.
template <typename T>
void gemm(const T* P, const T* Q, T* R, int M, int N, int K, bool tp, bool tq,
          bool accumulate) {
  static thread_local std::vector<T> scratch;
  if (tq) {
    scratch.assign(static_cast<size_t>(K) * N, T(0));
    for (int j = 0; j < N; ++j)
      for (int k = 0; k < K; ++k)
        scratch[static_cast<size_t>(k) * N + j] = Q[static_cast<size_t>(j) * K + k];
    Q = scratch.data();
    tq = false;
  }
  if (!accumulate) std::fill(R, R + static_cast<size_t>(M) * N, T(0));
  if (!tp) {
    for (int i = 0; i < M; ++i) {
      const T* p = P + static_cast<size_t>(i) * K;
      T* r = R + static_cast<size_t>(i) * N;
      for (int k = 0; k < K; ++k) {
        const T pv = p[k];
        const T* q = Q + static_cast<size_t>(k) * N;
        for (int j = 0; j < N; ++j) r[j] += pv * q[j];
      }
    }
  } else {
    for (int k = 0; k < K; ++k) {
      const T* p = P + static_cast<size_t>(k) * M;
      const T* q = Q + static_cast<size_t>(k) * N;
      for (int i = 0; i < M; ++i) {
        const T pv = p[i];
        T* r = R + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) r[j] += pv * q[j];
      }
    }
  }
}

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kPatchEmbed,
  kConv2d,
  kBiasAdd,
  kRelu,
  kGelu,
  kLayerNorm,
  kSoftmaxRows,
  kMeanAll,
  kSumAll,
  kMeanRows,
  kMeanHW,
  kResizeBilinear,
  kL2Normalize,
  kCosine,
  kClamp,
};

// Reverse-mode tape over dense tensors. Nodes are appended in topological
// order; values are computed eagerly and checked finite; backward() walks the
// tape once in reverse. One graph is built, differentiated, and dropped per
// optimization step, and a graph is never shared between threads.
template <typename T>
class GraphT {
 public:
  struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1, c = -1;
    bool requires_grad = false;
    float f[4] = {0, 0, 0, 0};
    int i[4] = {0, 0, 0, 0};
  };

  int input(TensorT<T> v, bool requires_grad) {
    v.check_finite();
    values_.push_back(std::move(v));
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int constant(TensorT<T> v) { return input(std::move(v), false); }

  int add(int a, int b) { return binary_same(Op::kAdd, a, b); }
  int sub(int a, int b) { return binary_same(Op::kSub, a, b); }

  // Elementwise multiply; either side may be a one-element tensor, which
  // broadcasts against the other.
  int mul(int a, int b) {
    const TensorT<T>& va = val(a);
    const TensorT<T>& vb = val(b);
    if (va.size() != vb.size() && va.size() != 1 && vb.size() != 1) {
      throw Error("ShapeMismatch", "mul operands " + shape_str(va.shape) +
                                       " vs " + shape_str(vb.shape));
    }
    TensorT<T> out = TensorT<T>::zeros(va.size() >= vb.size() ? va.shape
                                                              : vb.shape);
    if (va.size() == vb.size()) {
      for (int64_t i = 0; i < out.size(); ++i)
        out.data[i] = va.data[i] * vb.data[i];
    } else if (vb.size() == 1) {
      const T s = vb.data[0];
      for (int64_t i = 0; i < out.size(); ++i) out.data[i] = va.data[i] * s;
    } else {
      const T s = va.data[0];
      for (int64_t i = 0; i < out.size(); ++i) out.data[i] = vb.data[i] * s;
    }
    return push(Op::kMul, std::move(out), a, b);
  }

  // A [m,k] or [k] times B [k,n]; trans_a/trans_b flag transposed storage of
  // rank-2 operands. Rank-1 A yields a rank-1 result.
  int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
    const TensorT<T>& va = val(a);
    const TensorT<T>& vb = val(b);
    if (vb.rank() != 2) throw Error("ShapeMismatch", "matmul rhs must be rank-2");
    int m, k;
    if (va.rank() == 1) {
      if (trans_a) throw Error("ShapeMismatch", "cannot transpose rank-1 lhs");
      m = 1;
      k = va.dim(0);
    } else if (va.rank() == 2) {
      m = trans_a ? va.dim(1) : va.dim(0);
      k = trans_a ? va.dim(0) : va.dim(1);
    } else {
      throw Error("ShapeMismatch", "matmul lhs must be rank-1 or rank-2");
    }
    const int kb = trans_b ? vb.dim(1) : vb.dim(0);
    const int n = trans_b ? vb.dim(0) : vb.dim(1);
    if (kb != k) {
      throw Error("ShapeMismatch", "matmul inner dims " + std::to_string(k) +
                                       " vs " + std::to_string(kb));
    }
    TensorT<T> out = TensorT<T>::zeros(va.rank() == 1 ? Shape{n} : Shape{m, n});
    gemm(va.data.data(), vb.data.data(), out.data.data(), m, n, k, trans_a,
         trans_b, true);
    int id = push(Op::kMatmul, std::move(out), a, b);
    nodes_[id].i[0] = trans_a ? 1 : 0;
    nodes_[id].i[1] = trans_b ? 1 : 0;
    return id;
  }

  // Non-overlapping square patches of x [C,H,W] flattened (c, py, px)
  // row-major and projected by w [C*p*p, D] -> [tokens, D].
  int patch_embed(int x, int w, int patch) {
    const TensorT<T>& vx = val(x);
    const TensorT<T>& vw = val(w);
    if (vx.rank() != 3) throw Error("ShapeMismatch", "patch_embed input must be [C,H,W]");
    const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    if (H % patch != 0 || W % patch != 0)
      throw Error("ShapeMismatch", "image dims not divisible by patch size");
    const int row = C * patch * patch;
    if (vw.rank() != 2 || vw.dim(0) != row)
      throw Error("ShapeMismatch", "patch weight must be [" + std::to_string(row) + ",D]");
    const int D = vw.dim(1);
    const int th = H / patch, tw = W / patch, tokens = th * tw;
    std::vector<T> col;
    im2col_patches(vx, patch, col);
    TensorT<T> out = TensorT<T>::zeros({tokens, D});
    gemm(col.data(), vw.data.data(), out.data.data(), tokens, D, row, false,
         false, true);
    int id = push(Op::kPatchEmbed, std::move(out), x, w);
    nodes_[id].i[0] = patch;
    return id;
  }

  // x [Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout]; zero padding.
  int conv2d(int x, int w, int bias, int stride, int pad) {
    const TensorT<T>& vx = val(x);
    const TensorT<T>& vw = val(w);
    const TensorT<T>& vb = val(bias);
    if (vx.rank() != 3 || vw.rank() != 4)
      throw Error("ShapeMismatch", "conv2d expects x [C,H,W], w [Co,Ci,kh,kw]");
    const int Ci = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int Co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != Ci) throw Error("ShapeMismatch", "conv2d channel mismatch");
    if (vb.size() != Co) throw Error("ShapeMismatch", "conv2d bias size mismatch");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<T> padded(static_cast<size_t>(Ci) * Hp * Wp, T(0));
    pad_copy(vx, pad, padded);
    TensorT<T> out = TensorT<T>::zeros({Co, Ho, Wo});
    for (int co = 0; co < Co; ++co) {
      T* plane = out.data.data() + static_cast<size_t>(co) * Ho * Wo;
      const T bv = vb.data[static_cast<size_t>(co)];
      for (int i = 0; i < Ho * Wo; ++i) plane[i] = bv;
      for (int ci = 0; ci < Ci; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = vw.data[((static_cast<size_t>(co) * Ci + ci) * kh + ky) * kw + kx];
            for (int y = 0; y < Ho; ++y) {
              const T* in = padded.data() +
                            (static_cast<size_t>(ci) * Hp + y * stride + ky) * Wp + kx;
              T* o = plane + static_cast<size_t>(y) * Wo;
              for (int xo = 0; xo < Wo; ++xo) o[xo] += wv * in[xo * stride];
            }
          }
        }
      }
    }
    int id = push(Op::kConv2d, std::move(out), x, w, bias);
    nodes_[id].i[0] = stride;
    nodes_[id].i[1] = pad;
    return id;
  }

  int bias_add(int x, int b) {
    const TensorT<T>& vx = val(x);
    const TensorT<T>& vb = val(b);
    if (vx.rank() != 2 || vb.rank() != 1 || vb.dim(0) != vx.dim(1))
      throw Error("ShapeMismatch", "bias_add expects [m,n] plus [n]");
    TensorT<T> out = vx;
    const int m = vx.dim(0), n = vx.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out.data[static_cast<size_t>(i) * n + j] += vb.data[static_cast<size_t>(j)];
    return push(Op::kBiasAdd, std::move(out), x, b);
  }

  int relu(int x) {
    TensorT<T> out = val(x);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return push(Op::kRelu, std::move(out), x);
  }

  int gelu(int x) {
    TensorT<T> out = val(x);
    for (T& v : out.data) v = gelu_fwd(v);
    return push(Op::kGelu, std::move(out), x);
  }

  // Row-wise layer normalization of x [m,n] with gain/bias [n], eps 1e-5.
  int layer_norm(int x, int gain, int bias) {
    const TensorT<T>& vx = val(x);
    const TensorT<T>& vg = val(gain);
    const TensorT<T>& vb = val(bias);
    if (vx.rank() != 2 || vg.size() != vx.dim(1) || vb.size() != vx.dim(1))
      throw Error("ShapeMismatch", "layer_norm expects [m,n] with gain/bias [n]");
    const int m = vx.dim(0), n = vx.dim(1);
    TensorT<T> out = TensorT<T>::zeros(vx.shape);
    for (int i = 0; i < m; ++i) {
      const T* row = vx.data.data() + static_cast<size_t>(i) * n;
      T* o = out.data.data() + static_cast<size_t>(i) * n;
      T mu, inv;
      row_stats(row, n, mu, inv);
      for (int j = 0; j < n; ++j)
        o[j] = (row[j] - mu) * inv * vg.data[static_cast<size_t>(j)] +
               vb.data[static_cast<size_t>(j)];
    }
    return push(Op::kLayerNorm, std::move(out), x, gain, bias);
  }

  int softmax_rows(int x) {
    const TensorT<T>& vx = val(x);
    if (vx.rank() != 2) throw Error("ShapeMismatch", "softmax_rows expects [m,n]");
    const int m = vx.dim(0), n = vx.dim(1);
    TensorT<T> out = TensorT<T>::zeros(vx.shape);
    for (int i = 0; i < m; ++i) {
      const T* row = vx.data.data() + static_cast<size_t>(i) * n;
      T* o = out.data.data() + static_cast<size_t>(i) * n;
      T mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (int j = 0; j < n; ++j) {
        o[j] = std::exp(row[j] - mx);
        sum += o[j];
      }
      const T inv = T(1) / sum;
      for (int j = 0; j < n; ++j) o[j] *= inv;
    }
    return push(Op::kSoftmaxRows, std::move(out), x);
  }

  int mean_all(int x) {
    const TensorT<T>& vx = val(x);
    T s = 0;
    for (T v : vx.data) s += v;
    return push(Op::kMeanAll, TensorT<T>::scalar(s / static_cast<T>(vx.size())), x);
  }

  int sum_all(int x) {
    const TensorT<T>& vx = val(x);
    T s = 0;
    for (T v : vx.data) s += v;
    return push(Op::kSumAll, TensorT<T>::scalar(s), x);
  }

  // Column means: [m,n] -> [n].
  int mean_rows(int x) {
    const TensorT<T>& vx = val(x);
    if (vx.rank() != 2) throw Error("ShapeMismatch", "mean_rows expects [m,n]");
    const int m = vx.dim(0), n = vx.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out.data[static_cast<size_t>(j)] += vx.data[static_cast<size_t>(i) * n + j];
    for (T& v : out.data) v /= static_cast<T>(m);
    return push(Op::kMeanRows, std::move(out), x);
  }

  // Spatial mean: [C,H,W] -> [C].
  int mean_hw(int x) {
    const TensorT<T>& vx = val(x);
    if (vx.rank() != 3) throw Error("ShapeMismatch", "mean_hw expects [C,H,W]");
    const int C = vx.dim(0), HW = vx.dim(1) * vx.dim(2);
    TensorT<T> out = TensorT<T>::zeros({C});
    for (int c = 0; c < C; ++c) {
      T s = 0;
      const T* p = vx.data.data() + static_cast<size_t>(c) * HW;
      for (int i = 0; i < HW; ++i) s += p[i];
      out.data[static_cast<size_t>(c)] = s / static_cast<T>(HW);
    }
    return push(Op::kMeanHW, std::move(out), x);
  }

  // Bilinear sampling of the rect [y0,x0]..[y1,x1] (inclusive, continuous
  // pixel coordinates) of x [C,H,W] onto an [C,oh,ow] grid. Corner-aligned:
  // output corners sample the rect corners; a 1-wide output samples the rect
  // midpoint. The full-image rect with oh==H, ow==W is the identity.
  int resize_bilinear(int x, float y0, float x0, float y1, float x1, int oh,
                      int ow) {
    const TensorT<T>& vx = val(x);
    if (vx.rank() != 3) throw Error("ShapeMismatch", "resize expects [C,H,W]");
    if (oh < 1 || ow < 1) throw Error("InvalidValue", "resize output dims must be >= 1");
    const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    TensorT<T> out = TensorT<T>::zeros({C, oh, ow});
    std::vector<int> iy(oh), iy2(oh), ix(ow), ix2(ow);
    std::vector<T> wy(oh), wx(ow);
    sample_axis(y0, y1, oh, H, iy, iy2, wy);
    sample_axis(x0, x1, ow, W, ix, ix2, wx);
    for (int c = 0; c < C; ++c) {
      const T* pl = vx.data.data() + static_cast<size_t>(c) * H * W;
      T* o = out.data.data() + static_cast<size_t>(c) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        const T* r0 = pl + static_cast<size_t>(iy[i]) * W;
        const T* r1 = pl + static_cast<size_t>(iy2[i]) * W;
        const T fy = wy[i];
        for (int j = 0; j < ow; ++j) {
          const T fx = wx[j];
          const T top = r0[ix[j]] * (T(1) - fx) + r0[ix2[j]] * fx;
          const T bot = r1[ix[j]] * (T(1) - fx) + r1[ix2[j]] * fx;
          o[static_cast<size_t>(i) * ow + j] = top * (T(1) - fy) + bot * fy;
        }
      }
    }
    int id = push(Op::kResizeBilinear, std::move(out), x);
    nodes_[id].f[0] = y0;
    nodes_[id].f[1] = x0;
    nodes_[id].f[2] = y1;
    nodes_[id].f[3] = x1;
    nodes_[id].i[0] = oh;
    nodes_[id].i[1] = ow;
    return id;
  }

  int l2_normalize(int x) {
    const TensorT<T>& vx = val(x);
    if (vx.rank() != 1) throw Error("ShapeMismatch", "l2_normalize expects rank-1");
    const T n = vec_norm(vx.data.data(), vx.size());
    if (n == T(0)) throw Error("ZeroNorm", "cannot normalize a zero vector");
    TensorT<T> out = vx;
    const T inv = T(1) / n;
    for (T& v : out.data) v *= inv;
    return push(Op::kL2Normalize, std::move(out), x);
  }

  int cosine_similarity(int a, int b) {
    const TensorT<T>& va = val(a);
    const TensorT<T>& vb = val(b);
    if (va.rank() != 1 || vb.rank() != 1 || va.size() != vb.size())
      throw Error("ShapeMismatch", "cosine_similarity expects equal rank-1 vectors");
    const T na = vec_norm(va.data.data(), va.size());
    const T nb = vec_norm(vb.data.data(), vb.size());
    if (na == T(0) || nb == T(0))
      throw Error("ZeroNorm", "cosine similarity of a zero vector");
    T dot = 0;
    for (int64_t i = 0; i < va.size(); ++i) dot += va.data[i] * vb.data[i];
    return push(Op::kCosine, TensorT<T>::scalar(dot / (na * nb)), a, b);
  }

  // Straight-through inside (lo, hi); zero gradient at and beyond the bounds.
  int clamp(int x, float lo, float hi) {
    TensorT<T> out = val(x);
    for (T& v : out.data) v = std::min(std::max(v, T(lo)), T(hi));
    int id = push(Op::kClamp, std::move(out), x);
    nodes_[id].f[0] = lo;
    nodes_[id].f[1] = hi;
    return id;
  }

  const TensorT<T>& value(int id) const { return values_[static_cast<size_t>(id)]; }
  T scalar_value(int id) const {
    const TensorT<T>& v = value(id);
    if (v.size() != 1) throw Error("NonScalar", "node value is not scalar");
    return v.data[0];
  }

  bool has_grad(int id) const { return has_grad_[static_cast<size_t>(id)] != 0; }
  const TensorT<T>& grad(int id) const {
    if (!has_grad(id)) throw Error("NoGradient", "node has no gradient");
    return grads_[static_cast<size_t>(id)];
  }

  // Reverse-mode sweep from a scalar output with seed gradient 1.
  void backward(int out) {
    const TensorT<T>& v = value(out);
    if (v.size() != 1)
      throw Error("NonScalar", "backward requires a scalar output, got shape " +
                                   shape_str(v.shape));
    backward_from(out, TensorT<T>({}, {T(1)}));
  }

  // Seeds an arbitrary gradient at `out`; used by training losses whose final
  // stage is differentiated in closed form outside the graph.
  void backward_from(int out, TensorT<T> seed) {
    std::vector<std::pair<int, TensorT<T>>> seeds;
    seeds.emplace_back(out, std::move(seed));
    backward_seeds(std::move(seeds));
  }

  // Multi-seed variant: seeds gradients at several nodes (e.g. one embedding
  // per batch sample) and runs a single reverse sweep.
  void backward_seeds(std::vector<std::pair<int, TensorT<T>>> seeds) {
    if (seeds.empty()) throw Error("InvalidValue", "no gradient seeds given");
    grads_.assign(nodes_.size(), TensorT<T>());
    has_grad_.assign(nodes_.size(), 0);
    int top = -1;
    for (auto& [id, seed] : seeds) {
      if (seed.size() != value(id).size())
        throw Error("ShapeMismatch", "seed gradient shape mismatch");
      if (!nodes_[static_cast<size_t>(id)].requires_grad)
        throw Error("DetachedGraph", "seeded node does not depend on any gradient leaf");
      if (has_grad_[static_cast<size_t>(id)]) {
        TensorT<T>& g = grads_[static_cast<size_t>(id)];
        for (int64_t i = 0; i < seed.size(); ++i) g.data[i] += seed.data[i];
      } else {
        grads_[static_cast<size_t>(id)] = std::move(seed);
        has_grad_[static_cast<size_t>(id)] = 1;
      }
      top = std::max(top, id);
    }
    for (int id = top; id >= 0; --id) {
      if (!has_grad_[static_cast<size_t>(id)]) continue;
      const Node& n = nodes_[static_cast<size_t>(id)];
      if (n.op == Op::kLeaf) continue;
      dispatch_backward(id, n);
    }
  }

  // node_id -> gradient for every node reached by the last backward sweep.
  std::map<int, TensorT<T>> gradient_map() const {
    std::map<int, TensorT<T>> m;
    for (size_t i = 0; i < grads_.size(); ++i)
      if (has_grad_[i]) m[static_cast<int>(i)] = grads_[i];
    return m;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<TensorT<T>> values_;
  std::vector<Node> nodes_;
  std::vector<TensorT<T>> grads_;
  std::vector<uint8_t> has_grad_;

  const TensorT<T>& val(int id) const {
    if (id < 0 || id >= static_cast<int>(values_.size()))
      throw Error("BadNode", "node id out of range");
    return values_[static_cast<size_t>(id)];
  }

  int push(Op op, TensorT<T> out, int a, int b = -1, int c = -1) {
    out.check_finite();
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.c = c;
    n.requires_grad = (a >= 0 && nodes_[static_cast<size_t>(a)].requires_grad) ||
                      (b >= 0 && nodes_[static_cast<size_t>(b)].requires_grad) ||
                      (c >= 0 && nodes_[static_cast<size_t>(c)].requires_grad);
    values_.push_back(std::move(out));
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int binary_same(Op op, int a, int b) {
    const TensorT<T>& va = val(a);
    const TensorT<T>& vb = val(b);
    if (va.shape != vb.shape)
      throw Error("ShapeMismatch", std::string(op == Op::kAdd ? "add" : "sub") +
                                       " operands " + shape_str(va.shape) +
                                       " vs " + shape_str(vb.shape));
    TensorT<T> out = va;
    if (op == Op::kAdd) {
      for (int64_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    } else {
      for (int64_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
    }
    return push(op, std::move(out), a, b);
  }

  static T gelu_fwd(T x) {
    const T k = T(0.7978845608028654);
    const T c = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
  }

  static T gelu_bwd(T x) {
    const T k = T(0.7978845608028654);
    const T c = T(0.044715);
    const T t = std::tanh(k * (x + c * x * x * x));
    return T(0.5) * (T(1) + t) +
           T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
  }

  static T vec_norm(const T* v, int64_t n) {
    T s = 0;
    for (int64_t i = 0; i < n; ++i) s += v[i] * v[i];
    return std::sqrt(s);
  }

  static void row_stats(const T* row, int n, T& mu, T& inv) {
    T s = 0;
    for (int j = 0; j < n; ++j) s += row[j];
    mu = s / static_cast<T>(n);
    T v = 0;
    for (int j = 0; j < n; ++j) {
      const T d = row[j] - mu;
      v += d * d;
    }
    inv = T(1) / std::sqrt(v / static_cast<T>(n) + T(1e-5));
  }

  static void sample_axis(float lo, float hi, int count, int limit,
                          std::vector<int>& i0, std::vector<int>& i1,
                          std::vector<T>& w) {
    for (int i = 0; i < count; ++i) {
      double s = count == 1
                     ? (static_cast<double>(lo) + hi) * 0.5
                     : lo + static_cast<double>(i) * (static_cast<double>(hi) - lo) /
                                (count - 1);
      s = std::min(std::max(s, 0.0), static_cast<double>(limit - 1));
      int base = static_cast<int>(std::floor(s));
      if (base > limit - 1) base = limit - 1;
      i0[static_cast<size_t>(i)] = base;
      i1[static_cast<size_t>(i)] = std::min(base + 1, limit - 1);
      w[static_cast<size_t>(i)] = static_cast<T>(s - base);
    }
  }

  static void im2col_patches(const TensorT<T>& x, int patch, std::vector<T>& col) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int th = H / patch, tw = W / patch;
    const int row = C * patch * patch;
    col.assign(static_cast<size_t>(th) * tw * row, T(0));
    for (int ty = 0; ty < th; ++ty) {
      for (int tx = 0; tx < tw; ++tx) {
        T* dst = col.data() + (static_cast<size_t>(ty) * tw + tx) * row;
        for (int c = 0; c < C; ++c)
          for (int py = 0; py < patch; ++py)
            for (int px = 0; px < patch; ++px)
              *dst++ = x.data[(static_cast<size_t>(c) * H + ty * patch + py) * W +
                              tx * patch + px];
      }
    }
  }

  static void pad_copy(const TensorT<T>& x, int pad, std::vector<T>& out) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        std::memcpy(out.data() + (static_cast<size_t>(c) * Hp + y + pad) * Wp + pad,
                    x.data.data() + (static_cast<size_t>(c) * H + y) * W,
                    sizeof(T) * static_cast<size_t>(W));
  }

  TensorT<T>& ensure_grad(int id) {
    if (!has_grad_[static_cast<size_t>(id)]) {
      grads_[static_cast<size_t>(id)] = TensorT<T>::zeros(values_[static_cast<size_t>(id)].shape);
      has_grad_[static_cast<size_t>(id)] = 1;
    }
    return grads_[static_cast<size_t>(id)];
  }

  bool wants(int id) const {
    return id >= 0 && nodes_[static_cast<size_t>(id)].requires_grad;
  }

  void dispatch_backward(int id, const Node& n) {
    const TensorT<T>& g = grads_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::kAdd: {
        if (wants(n.a)) accumulate(n.a, g.data.data(), g.size(), T(1));
        if (wants(n.b)) accumulate(n.b, g.data.data(), g.size(), T(1));
        break;
      }
      case Op::kSub: {
        if (wants(n.a)) accumulate(n.a, g.data.data(), g.size(), T(1));
        if (wants(n.b)) accumulate(n.b, g.data.data(), g.size(), T(-1));
        break;
      }
      case Op::kMul: {
        const TensorT<T>& va = value(n.a);
        const TensorT<T>& vb = value(n.b);
        if (va.size() == vb.size()) {
          if (wants(n.a)) {
            TensorT<T>& da = ensure_grad(n.a);
            for (int64_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * vb.data[i];
          }
          if (wants(n.b)) {
            TensorT<T>& db = ensure_grad(n.b);
            for (int64_t i = 0; i < g.size(); ++i) db.data[i] += g.data[i] * va.data[i];
          }
        } else if (vb.size() == 1) {
          if (wants(n.a)) accumulate(n.a, g.data.data(), g.size(), vb.data[0]);
          if (wants(n.b)) {
            T s = 0;
            for (int64_t i = 0; i < g.size(); ++i) s += g.data[i] * va.data[i];
            ensure_grad(n.b).data[0] += s;
          }
        } else {
          if (wants(n.b)) accumulate(n.b, g.data.data(), g.size(), va.data[0]);
          if (wants(n.a)) {
            T s = 0;
            for (int64_t i = 0; i < g.size(); ++i) s += g.data[i] * vb.data[i];
            ensure_grad(n.a).data[0] += s;
          }
        }
        break;
      }
      case Op::kMatmul:
        matmul_backward(n, g);
        break;
      case Op::kPatchEmbed:
        patch_embed_backward(n, g);
        break;
      case Op::kConv2d:
        conv2d_backward(n, g);
        break;
      case Op::kBiasAdd: {
        const int m = value(n.a).dim(0), cols = value(n.a).dim(1);
        if (wants(n.a)) accumulate(n.a, g.data.data(), g.size(), T(1));
        if (wants(n.b)) {
          TensorT<T>& db = ensure_grad(n.b);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < cols; ++j)
              db.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i) * cols + j];
        }
        break;
      }
      case Op::kRelu: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          TensorT<T>& dx = ensure_grad(n.a);
          for (int64_t i = 0; i < g.size(); ++i)
            if (vx.data[i] > T(0)) dx.data[i] += g.data[i];
        }
        break;
      }
      case Op::kGelu: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          TensorT<T>& dx = ensure_grad(n.a);
          for (int64_t i = 0; i < g.size(); ++i)
            dx.data[i] += g.data[i] * gelu_bwd(vx.data[i]);
        }
        break;
      }
      case Op::kLayerNorm:
        layer_norm_backward(n, g);
        break;
      case Op::kSoftmaxRows: {
        if (wants(n.a)) {
          const TensorT<T>& y = value(id);
          TensorT<T>& dx = ensure_grad(n.a);
          const int m = y.dim(0), cols = y.dim(1);
          for (int i = 0; i < m; ++i) {
            const T* yr = y.data.data() + static_cast<size_t>(i) * cols;
            const T* gr = g.data.data() + static_cast<size_t>(i) * cols;
            T* dr = dx.data.data() + static_cast<size_t>(i) * cols;
            T dot = 0;
            for (int j = 0; j < cols; ++j) dot += yr[j] * gr[j];
            for (int j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::kMeanAll: {
        if (wants(n.a)) {
          const T gv = g.data[0] / static_cast<T>(value(n.a).size());
          TensorT<T>& dx = ensure_grad(n.a);
          for (T& v : dx.data) v += gv;
        }
        break;
      }
      case Op::kSumAll: {
        if (wants(n.a)) {
          const T gv = g.data[0];
          TensorT<T>& dx = ensure_grad(n.a);
          for (T& v : dx.data) v += gv;
        }
        break;
      }
      case Op::kMeanRows: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          const int m = vx.dim(0), cols = vx.dim(1);
          const T inv = T(1) / static_cast<T>(m);
          TensorT<T>& dx = ensure_grad(n.a);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < cols; ++j)
              dx.data[static_cast<size_t>(i) * cols + j] += g.data[static_cast<size_t>(j)] * inv;
        }
        break;
      }
      case Op::kMeanHW: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          const int C = vx.dim(0), HW = vx.dim(1) * vx.dim(2);
          const T inv = T(1) / static_cast<T>(HW);
          TensorT<T>& dx = ensure_grad(n.a);
          for (int c = 0; c < C; ++c) {
            const T gv = g.data[static_cast<size_t>(c)] * inv;
            T* p = dx.data.data() + static_cast<size_t>(c) * HW;
            for (int i = 0; i < HW; ++i) p[i] += gv;
          }
        }
        break;
      }
      case Op::kResizeBilinear:
        resize_backward(n, g);
        break;
      case Op::kL2Normalize: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          const TensorT<T>& u = value(id);
          const T norm = vec_norm(vx.data.data(), vx.size());
          T gu = 0;
          for (int64_t i = 0; i < u.size(); ++i) gu += g.data[i] * u.data[i];
          TensorT<T>& dx = ensure_grad(n.a);
          const T inv = T(1) / norm;
          for (int64_t i = 0; i < u.size(); ++i)
            dx.data[i] += (g.data[i] - gu * u.data[i]) * inv;
        }
        break;
      }
      case Op::kCosine: {
        const TensorT<T>& va = value(n.a);
        const TensorT<T>& vb = value(n.b);
        const T na = vec_norm(va.data.data(), va.size());
        const T nb = vec_norm(vb.data.data(), vb.size());
        const T cosv = value(id).data[0];
        const T gv = g.data[0];
        if (wants(n.a)) {
          TensorT<T>& da = ensure_grad(n.a);
          const T s1 = T(1) / (na * nb), s2 = cosv / (na * na);
          for (int64_t i = 0; i < va.size(); ++i)
            da.data[i] += gv * (vb.data[i] * s1 - va.data[i] * s2);
        }
        if (wants(n.b)) {
          TensorT<T>& db = ensure_grad(n.b);
          const T s1 = T(1) / (na * nb), s2 = cosv / (nb * nb);
          for (int64_t i = 0; i < vb.size(); ++i)
            db.data[i] += gv * (va.data[i] * s1 - vb.data[i] * s2);
        }
        break;
      }
      case Op::kClamp: {
        if (wants(n.a)) {
          const TensorT<T>& vx = value(n.a);
          const T lo = T(n.f[0]), hi = T(n.f[1]);
          TensorT<T>& dx = ensure_grad(n.a);
          for (int64_t i = 0; i < g.size(); ++i)
            if (vx.data[i] > lo && vx.data[i] < hi) dx.data[i] += g.data[i];
        }
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  void accumulate(int id, const T* src, int64_t n, T scale) {
    TensorT<T>& dst = ensure_grad(id);
    for (int64_t i = 0; i < n; ++i) dst.data[i] += src[i] * scale;
  }

  void matmul_backward(const Node& n, const TensorT<T>& g) {
    const TensorT<T>& va = value(n.a);
    const TensorT<T>& vb = value(n.b);
    const bool ta = n.i[0] != 0, tb = n.i[1] != 0;
    int m, k;
    if (va.rank() == 1) {
      m = 1;
      k = va.dim(0);
    } else {
      m = ta ? va.dim(1) : va.dim(0);
      k = ta ? va.dim(0) : va.dim(1);
    }
    const int cols = tb ? vb.dim(0) : vb.dim(1);
    if (wants(n.a)) {
      TensorT<T>& da = ensure_grad(n.a);
      if (!ta) {
        gemm(g.data.data(), vb.data.data(), da.data.data(), m, k, cols, false,
             !tb, true);
      } else {
        gemm(vb.data.data(), g.data.data(), da.data.data(), k, m, cols, tb,
             true, true);
      }
    }
    if (wants(n.b)) {
      TensorT<T>& db = ensure_grad(n.b);
      if (!tb) {
        gemm(va.data.data(), g.data.data(), db.data.data(), k, cols, m, !ta,
             false, true);
      } else {
        gemm(g.data.data(), va.data.data(), db.data.data(), cols, k, m, true,
             ta, true);
      }
    }
  }

  void patch_embed_backward(const Node& n, const TensorT<T>& g) {
    const TensorT<T>& vx = value(n.a);
    const TensorT<T>& vw = value(n.b);
    const int patch = n.i[0];
    const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int th = H / patch, tw = W / patch, tokens = th * tw;
    const int row = C * patch * patch;
    const int D = vw.dim(1);
    if (wants(n.b)) {
      std::vector<T> col;
      im2col_patches(vx, patch, col);
      gemm(col.data(), g.data.data(), ensure_grad(n.b).data.data(), row, D,
           tokens, true, false, true);
    }
    if (wants(n.a)) {
      std::vector<T> dcol(static_cast<size_t>(tokens) * row, T(0));
      gemm(g.data.data(), vw.data.data(), dcol.data(), tokens, row, D, false,
           true, true);
      TensorT<T>& dx = ensure_grad(n.a);
      for (int ty = 0; ty < th; ++ty)
        for (int tx = 0; tx < tw; ++tx) {
          const T* src = dcol.data() + (static_cast<size_t>(ty) * tw + tx) * row;
          for (int c = 0; c < C; ++c)
            for (int py = 0; py < patch; ++py)
              for (int px = 0; px < patch; ++px)
                dx.data[(static_cast<size_t>(c) * H + ty * patch + py) * W +
                        tx * patch + px] += *src++;
        }
    }
  }

  void conv2d_backward(const Node& n, const TensorT<T>& g) {
    const TensorT<T>& vx = value(n.a);
    const TensorT<T>& vw = value(n.b);
    const int stride = n.i[0], pad = n.i[1];
    const int Ci = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int Co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    if (wants(n.c)) {
      TensorT<T>& db = ensure_grad(n.c);
      for (int co = 0; co < Co; ++co) {
        T s = 0;
        const T* p = g.data.data() + static_cast<size_t>(co) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) s += p[i];
        db.data[static_cast<size_t>(co)] += s;
      }
    }
    std::vector<T> padded;
    if (wants(n.b)) {
      padded.assign(static_cast<size_t>(Ci) * Hp * Wp, T(0));
      pad_copy(vx, pad, padded);
      TensorT<T>& dw = ensure_grad(n.b);
      for (int co = 0; co < Co; ++co) {
        const T* gp = g.data.data() + static_cast<size_t>(co) * Ho * Wo;
        for (int ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              T s = 0;
              for (int y = 0; y < Ho; ++y) {
                const T* in = padded.data() +
                              (static_cast<size_t>(ci) * Hp + y * stride + ky) * Wp + kx;
                const T* gr = gp + static_cast<size_t>(y) * Wo;
                for (int xo = 0; xo < Wo; ++xo) s += in[xo * stride] * gr[xo];
              }
              dw.data[((static_cast<size_t>(co) * Ci + ci) * kh + ky) * kw + kx] += s;
            }
      }
    }
    if (wants(n.a)) {
      std::vector<T> dpad(static_cast<size_t>(Ci) * Hp * Wp, T(0));
      for (int co = 0; co < Co; ++co) {
        const T* gp = g.data.data() + static_cast<size_t>(co) * Ho * Wo;
        for (int ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = vw.data[((static_cast<size_t>(co) * Ci + ci) * kh + ky) * kw + kx];
              for (int y = 0; y < Ho; ++y) {
                T* dp = dpad.data() +
                        (static_cast<size_t>(ci) * Hp + y * stride + ky) * Wp + kx;
                const T* gr = gp + static_cast<size_t>(y) * Wo;
                for (int xo = 0; xo < Wo; ++xo) dp[xo * stride] += wv * gr[xo];
              }
            }
      }
      TensorT<T>& dx = ensure_grad(n.a);
      for (int ci = 0; ci < Ci; ++ci)
        for (int y = 0; y < H; ++y) {
          const T* src = dpad.data() + (static_cast<size_t>(ci) * Hp + y + pad) * Wp + pad;
          T* dst = dx.data.data() + (static_cast<size_t>(ci) * H + y) * W;
          for (int x = 0; x < W; ++x) dst[x] += src[x];
        }
    }
  }

  void layer_norm_backward(const Node& n, const TensorT<T>& g) {
    const TensorT<T>& vx = value(n.a);
    const TensorT<T>& vg = value(n.b);
    const int m = vx.dim(0), cols = vx.dim(1);
    TensorT<T>* dx = wants(n.a) ? &ensure_grad(n.a) : nullptr;
    TensorT<T>* dgain = wants(n.b) ? &ensure_grad(n.b) : nullptr;
    TensorT<T>* dbias = wants(n.c) ? &ensure_grad(n.c) : nullptr;
    std::vector<T> xhat(static_cast<size_t>(cols));
    for (int i = 0; i < m; ++i) {
      const T* row = vx.data.data() + static_cast<size_t>(i) * cols;
      const T* gr = g.data.data() + static_cast<size_t>(i) * cols;
      T mu, inv;
      row_stats(row, cols, mu, inv);
      for (int j = 0; j < cols; ++j) xhat[static_cast<size_t>(j)] = (row[j] - mu) * inv;
      if (dgain || dbias) {
        for (int j = 0; j < cols; ++j) {
          if (dgain) dgain->data[static_cast<size_t>(j)] += gr[j] * xhat[static_cast<size_t>(j)];
          if (dbias) dbias->data[static_cast<size_t>(j)] += gr[j];
        }
      }
      if (dx) {
        T m1 = 0, m2 = 0;
        for (int j = 0; j < cols; ++j) {
          const T h = gr[j] * vg.data[static_cast<size_t>(j)];
          m1 += h;
          m2 += h * xhat[static_cast<size_t>(j)];
        }
        m1 /= static_cast<T>(cols);
        m2 /= static_cast<T>(cols);
        T* dr = dx->data.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
          const T h = gr[j] * vg.data[static_cast<size_t>(j)];
          dr[j] += inv * (h - m1 - xhat[static_cast<size_t>(j)] * m2);
        }
      }
    }
  }

  void resize_backward(const Node& n, const TensorT<T>& g) {
    if (!wants(n.a)) return;
    const TensorT<T>& vx = value(n.a);
    const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int oh = n.i[0], ow = n.i[1];
    std::vector<int> iy(static_cast<size_t>(oh)), iy2(static_cast<size_t>(oh));
    std::vector<int> ix(static_cast<size_t>(ow)), ix2(static_cast<size_t>(ow));
    std::vector<T> wy(static_cast<size_t>(oh)), wx(static_cast<size_t>(ow));
    sample_axis(n.f[0], n.f[2], oh, H, iy, iy2, wy);
    sample_axis(n.f[1], n.f[3], ow, W, ix, ix2, wx);
    TensorT<T>& dx = ensure_grad(n.a);
    for (int c = 0; c < C; ++c) {
      T* dp = dx.data.data() + static_cast<size_t>(c) * H * W;
      const T* gp = g.data.data() + static_cast<size_t>(c) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        const T fy = wy[static_cast<size_t>(i)];
        for (int j = 0; j < ow; ++j) {
          const T fx = wx[static_cast<size_t>(j)];
          const T gv = gp[static_cast<size_t>(i) * ow + j];
          dp[static_cast<size_t>(iy[static_cast<size_t>(i)]) * W + ix[static_cast<size_t>(j)]] +=
              gv * (T(1) - fy) * (T(1) - fx);
          dp[static_cast<size_t>(iy[static_cast<size_t>(i)]) * W + ix2[static_cast<size_t>(j)]] +=
              gv * (T(1) - fy) * fx;
          dp[static_cast<size_t>(iy2[static_cast<size_t>(i)]) * W + ix[static_cast<size_t>(j)]] +=
              gv * fy * (T(1) - fx);
          dp[static_cast<size_t>(iy2[static_cast<size_t>(i)]) * W + ix2[static_cast<size_t>(j)]] +=
              gv * fy * fx;
        }
      }
    }
  }
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;

}  // namespace emblaunder
