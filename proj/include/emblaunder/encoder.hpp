#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "emblaunder/dataset.hpp"
#include "emblaunder/graph.hpp"
#include "emblaunder/image.hpp"
#include "emblaunder/rng.hpp"
#include "emblaunder/threads.hpp"

namespace emblaunder {

// Differentiable image encoder: maps a [3,res,res] tensor node to a unit-norm
// embedding node. Implementations must be usable in both float and double
// graphs so finite-difference oracles can evaluate them at full precision.
class IEncoder {
 public:
  virtual ~IEncoder() = default;
  virtual std::string id() const = 0;
  virtual int resolution() const = 0;
  virtual int embed_dim() const = 0;
  virtual int build_embed(Graph& g, int x) const = 0;
  virtual int build_embed(GraphD& g, int x) const = 0;

  // Forward-only embedding. The image must already be at the encoder
  // resolution; resize first otherwise.
  Tensor embed(const Image& img) const {
    if (img.height != resolution() || img.width != resolution())
      throw Error("ResolutionMismatch",
                  id() + " expects " + std::to_string(resolution()) + "x" +
                      std::to_string(resolution()) + ", got " +
                      std::to_string(img.height) + "x" + std::to_string(img.width));
    Graph g;
    return g.value(build_embed(g, g.constant(image_to_chw(img))));
  }

  Tensor embed_resized(const Image& img) const {
    return embed(resize_bilinear_eval(img, resolution(), resolution()));
  }
};

enum class Arch : uint8_t { kTinyVit = 1, kTinyCnn = 2 };

inline std::string arch_name(Arch a) {
  return a == Arch::kTinyVit ? "tiny_vit" : "tiny_cnn";
}

inline Arch arch_from_name(const std::string& s) {
  if (s == "tiny_vit") return Arch::kTinyVit;
  if (s == "tiny_cnn") return Arch::kTinyCnn;
  throw Error("UnknownArch", "unknown architecture '" + s + "'");
}

namespace enc_detail {

// tiny_vit: 4x4 patches, 2 transformer blocks, width 64, single attention
// head, 2x MLP, mean-pool head. tiny_cnn: 3 conv blocks, global average
// pool, linear head.
constexpr int kVitPatch = 4;
constexpr int kVitWidth = 64;
constexpr int kVitBlocks = 2;
constexpr int kVitMlp = 128;
constexpr int kRes = kWorkingRes;
constexpr int kVitTokens = (kRes / kVitPatch) * (kRes / kVitPatch);

enum class Init { kFanIn, kConvHe, kZero, kOne, kSmallNormal };

struct ParamSpec {
  Shape shape;
  Init init;
};

inline std::vector<ParamSpec> param_specs(Arch arch, int dim) {
  std::vector<ParamSpec> ps;
  if (arch == Arch::kTinyVit) {
    const int w = kVitWidth;
    ps.push_back({{3 * kVitPatch * kVitPatch, w}, Init::kFanIn});  // patch proj
    ps.push_back({{w}, Init::kZero});
    ps.push_back({{kVitTokens, w}, Init::kSmallNormal});  // positional table
    for (int b = 0; b < kVitBlocks; ++b) {
      ps.push_back({{w}, Init::kOne});   // ln1 gain
      ps.push_back({{w}, Init::kZero});  // ln1 bias
      ps.push_back({{w, w}, Init::kFanIn});  // wq
      ps.push_back({{w}, Init::kZero});
      ps.push_back({{w, w}, Init::kFanIn});  // wk
      ps.push_back({{w}, Init::kZero});
      ps.push_back({{w, w}, Init::kFanIn});  // wv
      ps.push_back({{w}, Init::kZero});
      ps.push_back({{w, w}, Init::kFanIn});  // wo
      ps.push_back({{w}, Init::kZero});
      ps.push_back({{w}, Init::kOne});   // ln2 gain
      ps.push_back({{w}, Init::kZero});  // ln2 bias
      ps.push_back({{w, kVitMlp}, Init::kFanIn});
      ps.push_back({{kVitMlp}, Init::kZero});
      ps.push_back({{kVitMlp, w}, Init::kFanIn});
      ps.push_back({{w}, Init::kZero});
    }
    ps.push_back({{w}, Init::kOne});   // final ln gain
    ps.push_back({{w}, Init::kZero});  // final ln bias
    ps.push_back({{w, dim}, Init::kFanIn});  // head
    ps.push_back({{dim}, Init::kZero});
  } else {
    ps.push_back({{12, 3, 3, 3}, Init::kConvHe});
    ps.push_back({{12}, Init::kZero});
    ps.push_back({{24, 12, 3, 3}, Init::kConvHe});
    ps.push_back({{24}, Init::kZero});
    ps.push_back({{48, 24, 3, 3}, Init::kConvHe});
    ps.push_back({{48}, Init::kZero});
    ps.push_back({{48, dim}, Init::kFanIn});  // head
    ps.push_back({{dim}, Init::kZero});
  }
  return ps;
}

inline int64_t fan_in(const Shape& s) {
  if (s.size() == 4) return static_cast<int64_t>(s[1]) * s[2] * s[3];
  if (s.size() == 2) return s[0];
  return s.empty() ? 1 : s[0];
}

inline Tensor init_tensor(const ParamSpec& spec, uint64_t seed) {
  Tensor t = Tensor::zeros(spec.shape);
  Rng rng(seed);
  switch (spec.init) {
    case Init::kZero:
      break;
    case Init::kOne:
      for (float& v : t.data) v = 1.0f;
      break;
    case Init::kFanIn: {
      const float std = 1.0f / std::sqrt(static_cast<float>(fan_in(spec.shape)));
      for (float& v : t.data) v = rng.normal_f(std);
      break;
    }
    case Init::kConvHe: {
      const float std = std::sqrt(2.0f / static_cast<float>(fan_in(spec.shape)));
      for (float& v : t.data) v = rng.normal_f(std);
      break;
    }
    case Init::kSmallNormal:
      for (float& v : t.data) v = rng.normal_f(0.02f);
      break;
  }
  return t;
}

}  // namespace enc_detail

// Contrastively trainable encoder with a 32-row label head (the toy analogue
// of a text encoder over a fixed label vocabulary).
class ShapeEncoder : public IEncoder {
 public:
  ShapeEncoder(Arch arch, int dim, uint64_t seed, std::string name = "")
      : arch_(arch), dim_(dim), init_seed_(seed),
        id_(name.empty() ? arch_name(arch) + "_seed" + std::to_string(seed) : std::move(name)) {
    if (dim < 1) throw Error("InvalidValue", "embedding dim must be >= 1");
    const auto specs = enc_detail::param_specs(arch, dim);
    params_.reserve(specs.size());
    for (size_t i = 0; i < specs.size(); ++i)
      params_.push_back(enc_detail::init_tensor(specs[i], mix_seed(seed, 1000 + i)));
    label_head_ = Tensor::zeros({kNumClasses, dim});
    Rng rng(mix_seed(seed, 999));
    for (float& v : label_head_.data) v = rng.normal_f(1.0f);
    renormalize_label_head();
  }

  std::string id() const override { return id_; }
  int resolution() const override { return enc_detail::kRes; }
  int embed_dim() const override { return dim_; }
  Arch arch() const { return arch_; }
  uint64_t init_seed() const { return init_seed_; }
  uint64_t train_seed() const { return train_seed_; }

  int build_embed(Graph& g, int x) const override { return build_embed_t(g, x); }
  int build_embed(GraphD& g, int x) const override { return build_embed_t(g, x); }

  // Builds the encoder over externally supplied parameter nodes (training
  // marks them requires_grad; evaluation passes constants).
  template <typename T>
  int build_from_nodes(GraphT<T>& g, int x, const std::vector<int>& p) const {
    if (arch_ == Arch::kTinyVit) return build_vit(g, x, p);
    return build_cnn(g, x, p);
  }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  Tensor& label_head() { return label_head_; }
  const Tensor& label_head() const { return label_head_; }

  // Unit-norm label embedding for a class id.
  Tensor embed_label(int class_id) const {
    if (class_id < 0 || class_id >= kNumClasses)
      throw Error("InvalidValue", "label id " + std::to_string(class_id) + " out of range [0,32)");
    Tensor row = Tensor::zeros({dim_});
    for (int j = 0; j < dim_; ++j)
      row.data[static_cast<size_t>(j)] =
          label_head_.data[static_cast<size_t>(class_id) * dim_ + j];
    return row;
  }

  void renormalize_label_head() {
    for (int c = 0; c < kNumClasses; ++c) {
      float s = 0.0f;
      float* row = label_head_.data.data() + static_cast<size_t>(c) * dim_;
      for (int j = 0; j < dim_; ++j) s += row[j] * row[j];
      const float n = std::sqrt(s);
      if (n == 0.0f) throw Error("ZeroNorm", "label head row collapsed to zero");
      for (int j = 0; j < dim_; ++j) row[j] /= n;
    }
  }

  void set_train_seed(uint64_t s) { train_seed_ = s; }

 private:
  Arch arch_;
  int dim_;
  uint64_t init_seed_;
  uint64_t train_seed_ = 0;
  std::string id_;
  std::vector<Tensor> params_;
  Tensor label_head_;  // [32, dim], rows kept unit-norm

  template <typename T>
  int build_embed_t(GraphT<T>& g, int x) const {
    std::vector<int> p;
    p.reserve(params_.size());
    for (const Tensor& t : params_) p.push_back(g.constant(t.template cast<T>()));
    return build_from_nodes(g, x, p);
  }

  template <typename T>
  int build_vit(GraphT<T>& g, int x, const std::vector<int>& p) const {
    using enc_detail::kVitBlocks;
    using enc_detail::kVitPatch;
    using enc_detail::kVitWidth;
    int tok = g.patch_embed(x, p[0], kVitPatch);
    tok = g.bias_add(tok, p[1]);
    tok = g.add(tok, p[2]);
    const int scale = g.constant(TensorT<T>::scalar(
        T(1) / std::sqrt(static_cast<T>(kVitWidth))));
    for (int b = 0; b < kVitBlocks; ++b) {
      const size_t o = 3 + static_cast<size_t>(b) * 16;
      int h = g.layer_norm(tok, p[o], p[o + 1]);
      int q = g.bias_add(g.matmul(h, p[o + 2]), p[o + 3]);
      int k = g.bias_add(g.matmul(h, p[o + 4]), p[o + 5]);
      int v = g.bias_add(g.matmul(h, p[o + 6]), p[o + 7]);
      int att = g.softmax_rows(g.mul(g.matmul(q, k, false, true), scale));
      int ctx = g.bias_add(g.matmul(g.matmul(att, v), p[o + 8]), p[o + 9]);
      tok = g.add(tok, ctx);
      int h2 = g.layer_norm(tok, p[o + 10], p[o + 11]);
      int mh = g.gelu(g.bias_add(g.matmul(h2, p[o + 12]), p[o + 13]));
      int mo = g.bias_add(g.matmul(mh, p[o + 14]), p[o + 15]);
      tok = g.add(tok, mo);
    }
    const size_t f = 3 + static_cast<size_t>(kVitBlocks) * 16;
    int h = g.layer_norm(tok, p[f], p[f + 1]);
    int pooled = g.mean_rows(h);
    int z = g.add(g.matmul(pooled, p[f + 2]), p[f + 3]);
    return g.l2_normalize(z);
  }

  template <typename T>
  int build_cnn(GraphT<T>& g, int x, const std::vector<int>& p) const {
    int h = g.relu(g.conv2d(x, p[0], p[1], 1, 1));
    h = g.relu(g.conv2d(h, p[2], p[3], 2, 1));
    h = g.relu(g.conv2d(h, p[4], p[5], 2, 1));
    int pooled = g.mean_hw(h);
    int z = g.add(g.matmul(pooled, p[6]), p[7]);
    return g.l2_normalize(z);
  }
};

struct TrainConfig {
  int epochs = 30;
  float temperature = 0.07f;
  float lr = 0.05f;
  float momentum = 0.9f;
  int batch_classes = 32;  // distinct classes per batch; one sample each
  uint64_t seed = 0;
};

struct TrainStats {
  std::vector<double> epoch_loss;
};

// Symmetric InfoNCE between image embeddings and the label head over batches
// holding one sample per class. The cross-entropy head is differentiated in
// closed form and seeded into the graph at the embedding nodes, which keeps
// the autodiff op set limited to what the encoders themselves need.
inline ShapeEncoder train_contrastive(const ShapeEncoder& enc, const ShapeDataset& data,
                                      const TrainConfig& cfg, TrainStats* stats = nullptr) {
  if (data.samples.empty()) throw Error("InvalidValue", "training dataset is empty");
  ShapeEncoder out = enc;
  out.set_train_seed(cfg.seed);
  if (cfg.epochs == 0) return out;

  std::vector<std::vector<size_t>> by_class(kNumClasses);
  for (size_t i = 0; i < data.samples.size(); ++i)
    by_class[static_cast<size_t>(data.samples[i].class_id)].push_back(i);
  std::vector<int> present;
  size_t sweeps = 0;
  for (int c = 0; c < kNumClasses; ++c)
    if (!by_class[static_cast<size_t>(c)].empty()) {
      present.push_back(c);
      sweeps = std::max(sweeps, by_class[static_cast<size_t>(c)].size());
    }
  const int batch_cap = std::min<int>(std::max(cfg.batch_classes, 1),
                                      static_cast<int>(present.size()));
  const size_t batches_per_sweep =
      (present.size() + static_cast<size_t>(batch_cap) - 1) / static_cast<size_t>(batch_cap);
  const int dim = out.embed_dim();
  const float inv_tau = 1.0f / cfg.temperature;

  std::vector<Tensor> vel;
  for (const Tensor& t : out.params()) vel.push_back(Tensor::zeros(t.shape));
  Tensor vel_label = Tensor::zeros(out.label_head().shape);

  Rng shuffle_rng(mix_seed(cfg.seed, 0xB0));
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) *
                              static_cast<int64_t>(sweeps) *
                              static_cast<int64_t>(batches_per_sweep);
  int64_t step = 0;

  std::vector<std::vector<size_t>> perm(by_class.size());
  std::vector<int> class_order = present;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int c : present) {
      auto& p = perm[static_cast<size_t>(c)];
      p = by_class[static_cast<size_t>(c)];
      for (size_t i = p.size(); i > 1; --i)
        std::swap(p[i - 1], p[shuffle_rng.below(i)]);
    }
    double epoch_loss = 0.0;
    size_t batch_count = 0;
    for (size_t sweep = 0; sweep < sweeps; ++sweep)
    for (size_t chunk = 0; chunk < batches_per_sweep; ++chunk, ++step, ++batch_count) {
      if (chunk == 0)
        for (size_t i = class_order.size(); i > 1; --i)
          std::swap(class_order[i - 1], class_order[shuffle_rng.below(i)]);
      std::vector<int> classes;
      for (size_t i = chunk * static_cast<size_t>(batch_cap);
           i < std::min(present.size(), (chunk + 1) * static_cast<size_t>(batch_cap)); ++i)
        classes.push_back(class_order[i]);
      const int B = static_cast<int>(classes.size());

      Graph g;
      std::vector<int> pid;
      pid.reserve(out.params().size());
      for (Tensor& t : out.params()) pid.push_back(g.input(t, true));
      std::vector<int> znode(static_cast<size_t>(B));
      std::vector<float> Z(static_cast<size_t>(B) * dim);
      for (int i = 0; i < B; ++i) {
        const int c = classes[static_cast<size_t>(i)];
        const auto& p = perm[static_cast<size_t>(c)];
        const Image& img = data.samples[p[sweep % p.size()]].image;
        const int x = g.constant(image_to_chw(img));
        znode[static_cast<size_t>(i)] = out.build_from_nodes(g, x, pid);
        const Tensor& z = g.value(znode[static_cast<size_t>(i)]);
        std::copy(z.data.begin(), z.data.end(), Z.begin() + static_cast<size_t>(i) * dim);
      }

      // logits[i][j] = <z_i, l_j> / tau over all 32 label rows
      const Tensor& L = out.label_head();
      std::vector<float> logits(static_cast<size_t>(B) * kNumClasses);
      gemm(Z.data(), L.data.data(), logits.data(), B, kNumClasses, dim, false, true, false);
      for (float& v : logits) v *= inv_tau;

      std::vector<float> prow(logits.size()), pcol(logits.size());
      for (int i = 0; i < B; ++i) {  // row softmax
        const float* r = logits.data() + static_cast<size_t>(i) * kNumClasses;
        float* o = prow.data() + static_cast<size_t>(i) * kNumClasses;
        float mx = r[0];
        for (int j = 1; j < kNumClasses; ++j) mx = std::max(mx, r[j]);
        float s = 0;
        for (int j = 0; j < kNumClasses; ++j) { o[j] = std::exp(r[j] - mx); s += o[j]; }
        for (int j = 0; j < kNumClasses; ++j) o[j] /= s;
      }
      for (int j = 0; j < kNumClasses; ++j) {  // column softmax over the batch
        float mx = logits[static_cast<size_t>(j)];
        for (int i = 1; i < B; ++i)
          mx = std::max(mx, logits[static_cast<size_t>(i) * kNumClasses + j]);
        float s = 0;
        for (int i = 0; i < B; ++i) {
          float e = std::exp(logits[static_cast<size_t>(i) * kNumClasses + j] - mx);
          pcol[static_cast<size_t>(i) * kNumClasses + j] = e;
          s += e;
        }
        for (int i = 0; i < B; ++i) pcol[static_cast<size_t>(i) * kNumClasses + j] /= s;
      }

      // Each present class has exactly one sample per batch; absent classes
      // contribute no column term.
      std::array<int, kNumClasses> sample_of_class;
      sample_of_class.fill(-1);
      for (int i = 0; i < B; ++i) sample_of_class[static_cast<size_t>(classes[static_cast<size_t>(i)])] = i;

      double loss = 0.0;
      std::vector<float> grad_logits(logits.size(), 0.0f);
      const float invB = 1.0f / static_cast<float>(B);
      for (int i = 0; i < B; ++i) {
        const int ci = classes[static_cast<size_t>(i)];
        loss -= 0.5 * std::log(std::max(
            static_cast<double>(prow[static_cast<size_t>(i) * kNumClasses + ci]), 1e-30));
        loss -= 0.5 * std::log(std::max(
            static_cast<double>(pcol[static_cast<size_t>(i) * kNumClasses + ci]), 1e-30));
        for (int j = 0; j < kNumClasses; ++j) {
          const size_t e = static_cast<size_t>(i) * kNumClasses + j;
          const float y = j == ci ? 1.0f : 0.0f;
          grad_logits[e] = 0.5f * invB * (prow[e] - y);
          if (sample_of_class[static_cast<size_t>(j)] >= 0)
            grad_logits[e] += 0.5f * invB *
                              (pcol[e] - (sample_of_class[static_cast<size_t>(j)] == i ? 1.0f : 0.0f));
        }
      }
      loss *= invB;
      if (!(loss == loss)) throw Error("Divergence", "training loss became NaN");
      epoch_loss += loss;

      // dZ = (G @ L) / tau ; dL = (G^T @ Z) / tau
      std::vector<float> dZ(Z.size());
      gemm(grad_logits.data(), L.data.data(), dZ.data(), B, dim, kNumClasses, false, false, false);
      for (float& v : dZ) v *= inv_tau;
      Tensor dLabel = Tensor::zeros(L.shape);
      gemm(grad_logits.data(), Z.data(), dLabel.data.data(), kNumClasses, dim, B, true, false, false);
      for (float& v : dLabel.data) v *= inv_tau;

      std::vector<std::pair<int, Tensor>> seeds;
      seeds.reserve(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) {
        Tensor s = Tensor::zeros({dim});
        std::copy(dZ.begin() + static_cast<size_t>(i) * dim,
                  dZ.begin() + static_cast<size_t>(i + 1) * dim, s.data.begin());
        seeds.emplace_back(znode[static_cast<size_t>(i)], std::move(s));
      }
      g.backward_seeds(std::move(seeds));

      const float lr_t = cfg.lr * 0.5f *
                         (1.0f + std::cos(3.14159265f * static_cast<float>(step) /
                                          static_cast<float>(total_steps)));
      for (size_t pi = 0; pi < out.params().size(); ++pi) {
        if (!g.has_grad(pid[pi])) continue;
        const Tensor& grads = g.grad(pid[pi]);
        Tensor& v = vel[pi];
        Tensor& theta = out.params()[pi];
        for (int64_t e = 0; e < theta.size(); ++e) {
          v.data[e] = cfg.momentum * v.data[e] - lr_t * grads.data[e];
          theta.data[e] += v.data[e];
        }
      }
      for (int64_t e = 0; e < dLabel.size(); ++e) {
        vel_label.data[e] = cfg.momentum * vel_label.data[e] - lr_t * dLabel.data[e];
        out.label_head().data[e] += vel_label.data[e];
      }
      out.renormalize_label_head();
    }
    if (stats) stats->epoch_loss.push_back(epoch_loss / static_cast<double>(batch_count));
  }
  return out;
}

// Top-1 label retrieval accuracy of an encoder on a labeled set.
inline double retrieval_accuracy(const ShapeEncoder& enc, const ShapeDataset& eval) {
  if (eval.samples.empty()) return 0.0;
  int hits = 0;
  for (const LabeledImage& s : eval.samples) {
    const Tensor z = enc.embed(s.image);
    int best = 0;
    float best_dot = -2.0f;
    for (int c = 0; c < kNumClasses; ++c) {
      float d = 0;
      for (int j = 0; j < enc.embed_dim(); ++j)
        d += z.data[static_cast<size_t>(j)] *
             enc.label_head().data[static_cast<size_t>(c) * enc.embed_dim() + j];
      if (d > best_dot) {
        best_dot = d;
        best = c;
      }
    }
    if (best == s.class_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval.samples.size());
}

// --- weight file format (EZW1) ---------------------------------------------
// magic "EZW1" | version u16 | arch u8 | dim u16 | resolution u16 |
// tensor count u32 | { rank u8, dims u32[rank] }* | f32 payload |
// FNV-1a 64 checksum over all preceding bytes. All integers and floats are
// little-endian.

namespace enc_detail {

inline void put_u16le(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}
inline void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_u64le(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_f32le(std::vector<uint8_t>& out, float f) {
  put_u32le(out, std::bit_cast<uint32_t>(f));
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;
  uint8_t u8() {
    if (pos + 1 > b.size()) throw Error("Malformed", "weight file truncated");
    return b[pos++];
  }
  uint16_t u16() { uint16_t v = u8(); return static_cast<uint16_t>(v | (u8() << 8)); }
  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
    return v;
  }
  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
};

inline uint64_t fnv1a64(const uint8_t* p, size_t n) {
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace enc_detail

inline std::vector<uint8_t> save_weights(const ShapeEncoder& enc) {
  using namespace enc_detail;
  std::vector<uint8_t> out = {'E', 'Z', 'W', '1'};
  put_u16le(out, 1);  // version
  out.push_back(static_cast<uint8_t>(enc.arch()));
  put_u16le(out, static_cast<uint16_t>(enc.embed_dim()));
  put_u16le(out, static_cast<uint16_t>(enc.resolution()));
  std::vector<const Tensor*> tensors;
  for (const Tensor& t : enc.params()) tensors.push_back(&t);
  tensors.push_back(&enc.label_head());
  put_u32le(out, static_cast<uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    out.push_back(static_cast<uint8_t>(t->rank()));
    for (int d : t->shape) put_u32le(out, static_cast<uint32_t>(d));
  }
  for (const Tensor* t : tensors)
    for (float v : t->data) put_f32le(out, v);
  put_u64le(out, fnv1a64(out.data(), out.size()));
  return out;
}

inline ShapeEncoder load_weights(const std::vector<uint8_t>& bytes, std::string name = "") {
  using namespace enc_detail;
  if (bytes.size() < 12 + 8) throw Error("Malformed", "weight file too short");
  if (bytes[0] != 'E' || bytes[1] != 'Z' || bytes[2] != 'W' || bytes[3] != '1')
    throw Error("Malformed", "wrong magic (expected EZW1)");
  const uint64_t stored = [&] {
    Reader r{bytes, bytes.size() - 8};
    return r.u64();
  }();
  if (fnv1a64(bytes.data(), bytes.size() - 8) != stored)
    throw Error("ChecksumMismatch", "weight file checksum does not validate");
  Reader r{bytes, 4};
  const uint16_t version = r.u16();
  if (version != 1)
    throw Error("VersionMismatch", "unsupported weight version " + std::to_string(version));
  const uint8_t arch_tag = r.u8();
  if (arch_tag != static_cast<uint8_t>(Arch::kTinyVit) &&
      arch_tag != static_cast<uint8_t>(Arch::kTinyCnn))
    throw Error("UnknownArch", "unknown architecture tag " + std::to_string(arch_tag));
  const Arch arch = static_cast<Arch>(arch_tag);
  const int dim = r.u16();
  const int res = r.u16();
  if (res != kWorkingRes) throw Error("Malformed", "unsupported encoder resolution");
  const uint32_t count = r.u32();
  const auto specs = enc_detail::param_specs(arch, dim);
  if (count != specs.size() + 1) throw Error("Malformed", "unexpected tensor count");
  std::vector<Shape> shapes;
  for (uint32_t i = 0; i < count; ++i) {
    const uint8_t rank = r.u8();
    Shape s;
    for (uint8_t d = 0; d < rank; ++d) s.push_back(static_cast<int>(r.u32()));
    shapes.push_back(std::move(s));
  }
  for (size_t i = 0; i < specs.size(); ++i)
    if (shapes[i] != specs[i].shape)
      throw Error("Malformed", "tensor " + std::to_string(i) + " shape mismatch");
  if (shapes.back() != Shape{kNumClasses, dim})
    throw Error("Malformed", "label head shape mismatch");

  ShapeEncoder enc(arch, dim, 0, name.empty() ? "loaded_" + arch_name(arch) : name);
  for (size_t i = 0; i < specs.size(); ++i) {
    Tensor t = Tensor::zeros(shapes[i]);
    for (int64_t e = 0; e < t.size(); ++e) t.data[e] = r.f32();
    t.check_finite();
    enc.params()[i] = std::move(t);
  }
  Tensor lh = Tensor::zeros(shapes.back());
  for (int64_t e = 0; e < lh.size(); ++e) lh.data[e] = r.f32();
  lh.check_finite();
  enc.label_head() = std::move(lh);
  if (r.pos != bytes.size() - 8) throw Error("Malformed", "trailing bytes in weight file");
  return enc;
}

// Standard zoo: three white-box surrogates plus one held-out encoder trained
// on a disjoint data seed. The held-out encoder never sees attack gradients.
struct EncoderZoo {
  std::vector<std::unique_ptr<ShapeEncoder>> surrogates;
  std::unique_ptr<ShapeEncoder> held_out;

  std::vector<const IEncoder*> surrogate_ptrs() const {
    std::vector<const IEncoder*> out;
    for (const auto& e : surrogates) out.push_back(e.get());
    return out;
  }
};

struct ZooConfig {
  int embed_dim = 64;
  int n_per_class = 20;
  TrainConfig train;
  uint64_t surrogate_data_seed = 0;
  uint64_t heldout_data_seed = 0;
};

inline EncoderZoo build_standard_zoo(const ZooConfig& cfg,
                                     std::vector<TrainStats>* stats_out = nullptr) {
  const ShapeDataset surrogate_data = generate_shape_dataset(cfg.surrogate_data_seed, cfg.n_per_class);
  const ShapeDataset heldout_data = generate_shape_dataset(cfg.heldout_data_seed, cfg.n_per_class);

  struct Plan {
    Arch arch;
    uint64_t seed;
    const ShapeDataset* data;
    std::string name;
  };
  const Plan plans[4] = {
      {Arch::kTinyVit, 1, &surrogate_data, "s1_tiny_vit"},
      {Arch::kTinyVit, 2, &surrogate_data, "s2_tiny_vit"},
      {Arch::kTinyCnn, 3, &surrogate_data, "s3_tiny_cnn"},
      {Arch::kTinyCnn, 4, &heldout_data, "h_tiny_cnn"},
  };
  std::vector<std::unique_ptr<ShapeEncoder>> trained(4);
  std::vector<TrainStats> stats(4);
  parallel_for(4, [&](int64_t i) {
    const Plan& pl = plans[i];
    ShapeEncoder init(pl.arch, cfg.embed_dim, pl.seed, pl.name);
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.train.seed, pl.seed);
    trained[static_cast<size_t>(i)] = std::make_unique<ShapeEncoder>(
        train_contrastive(init, *pl.data, tc, &stats[static_cast<size_t>(i)]));
  });
  EncoderZoo zoo;
  zoo.surrogates.push_back(std::move(trained[0]));
  zoo.surrogates.push_back(std::move(trained[1]));
  zoo.surrogates.push_back(std::move(trained[2]));
  zoo.held_out = std::move(trained[3]);
  if (stats_out) *stats_out = std::move(stats);
  return zoo;
}

}  // namespace emblaunder
