#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "emblaunder/image.hpp"
#include "emblaunder/rng.hpp"

namespace emblaunder {

// 32 classes: 4 shapes x 8 colors. class_id = shape * 8 + color.
constexpr int kNumShapes = 4;
constexpr int kNumColors = 8;
constexpr int kNumClasses = kNumShapes * kNumColors;
constexpr int kWorkingRes = 32;

enum class ShapeKind : int { kCircle = 0, kSquare = 1, kTriangle = 2, kCross = 3 };

inline const std::array<std::array<float, 3>, kNumColors>& class_colors() {
  static const std::array<std::array<float, 3>, kNumColors> kColors = {{
      {1.00f, 0.15f, 0.15f},  // red
      {1.00f, 0.55f, 0.10f},  // orange
      {1.00f, 1.00f, 0.20f},  // yellow
      {0.20f, 0.90f, 0.25f},  // green
      {0.15f, 0.90f, 0.90f},  // cyan
      {0.25f, 0.40f, 1.00f},  // blue
      {0.90f, 0.20f, 0.90f},  // magenta
      {0.95f, 0.95f, 0.95f},  // white
  }};
  return kColors;
}

struct LabeledImage {
  Image image;
  int class_id = 0;
};

struct ShapeDataset {
  uint64_t seed = 0;
  int n_per_class = 0;
  std::vector<LabeledImage> samples;  // ordered by (class, instance)

  std::vector<const LabeledImage*> of_class(int c) const {
    std::vector<const LabeledImage*> out;
    for (const LabeledImage& s : samples)
      if (s.class_id == c) out.push_back(&s);
    return out;
  }
};

namespace detail {

inline float sd_circle(float u, float v, float r) {
  return std::sqrt(u * u + v * v) - r;
}

inline float sd_square(float u, float v, float r) {
  return std::max(std::fabs(u), std::fabs(v)) - r * 0.82f;
}

inline float sd_triangle(float u, float v, float r) {
  const float k = 1.7320508f;
  float px = std::fabs(u) - r;
  float py = v + r / k;
  if (px + k * py > 0.0f) {
    const float nx = (px - k * py) * 0.5f;
    const float ny = (-k * px - py) * 0.5f;
    px = nx;
    py = ny;
  }
  px -= std::min(std::max(px, -2.0f * r), 0.0f);
  const float len = std::sqrt(px * px + py * py);
  return py > 0.0f ? -len : len;
}

inline float sd_cross(float u, float v, float r) {
  const float w = r * 0.38f;
  const float au = std::fabs(u), av = std::fabs(v);
  const float horiz = std::max(au - r, av - w);
  const float vert = std::max(av - r, au - w);
  return std::min(horiz, vert);
}

}  // namespace detail

// One anti-aliased shape on a textured gray background. Fully determined by
// the sample seed; the draw order of random parameters is pinned.
inline Image render_shape_sample(uint64_t sample_seed, int class_id, int res = kWorkingRes) {
  if (class_id < 0 || class_id >= kNumClasses)
    throw Error("InvalidValue", "class id out of range [0,32)");
  Rng rng(sample_seed);
  const float scale = static_cast<float>(res) / 32.0f;
  const float bg_base = rng.uniform_f(0.15f, 0.40f);
  const float grad_amp = rng.uniform_f(-0.06f, 0.06f);
  const float grad_dir = rng.uniform_f(0.0f, 6.2831853f);
  const float cx = rng.uniform_f(14.5f, 17.5f) * scale;
  const float cy = rng.uniform_f(14.5f, 17.5f) * scale;
  const float radius = rng.uniform_f(9.0f, 10.5f) * scale;
  const float rot = rng.uniform_f(-0.06f, 0.06f);
  const float fill_jitter = rng.uniform_f(0.94f, 1.06f);

  const int shape = class_id / kNumColors;
  const int color = class_id % kNumColors;
  const auto& hue = class_colors()[static_cast<size_t>(color)];
  const float cosr = std::cos(rot), sinr = std::sin(rot);
  const float gx = std::cos(grad_dir), gy = std::sin(grad_dir);

  Image img(res, res);
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const float nx = (2.0f * x / (res - 1)) - 1.0f;
      const float ny = (2.0f * y / (res - 1)) - 1.0f;
      float bg = bg_base + grad_amp * (nx * gx + ny * gy) + rng.uniform_f(-0.03f, 0.03f);
      bg = std::min(std::max(bg, 0.0f), 1.0f);

      const float dx = static_cast<float>(x) - cx;
      const float dy = static_cast<float>(y) - cy;
      const float u = dx * cosr + dy * sinr;
      const float v = -dx * sinr + dy * cosr;
      float sd = 0.0f;
      switch (static_cast<ShapeKind>(shape)) {
        case ShapeKind::kCircle: sd = detail::sd_circle(u, v, radius); break;
        case ShapeKind::kSquare: sd = detail::sd_square(u, v, radius); break;
        case ShapeKind::kTriangle: sd = detail::sd_triangle(u, v, radius); break;
        case ShapeKind::kCross: sd = detail::sd_cross(u, v, radius); break;
      }
      const float cov = std::min(std::max(0.5f - sd, 0.0f), 1.0f);
      for (int c = 0; c < 3; ++c) {
        const float fill = std::min(std::max(hue[static_cast<size_t>(c)] * fill_jitter, 0.0f), 1.0f);
        img.at(y, x, c) = bg * (1.0f - cov) + fill * cov;
      }
    }
  }
  return img;
}

// 32 * n_per_class samples; sample (c, k) depends only on (seed, c, k), so a
// dataset is byte-identical for a given seed regardless of generation order.
inline ShapeDataset generate_shape_dataset(uint64_t seed, int n_per_class,
                                           int res = kWorkingRes) {
  if (n_per_class < 0) throw Error("InvalidValue", "n_per_class must be >= 0");
  ShapeDataset ds;
  ds.seed = seed;
  ds.n_per_class = n_per_class;
  ds.samples.reserve(static_cast<size_t>(kNumClasses) * n_per_class);
  for (int c = 0; c < kNumClasses; ++c)
    for (int k = 0; k < n_per_class; ++k)
      ds.samples.push_back({render_shape_sample(mix_seed(seed, static_cast<uint64_t>(c),
                                                         static_cast<uint64_t>(k)),
                                                c, res),
                            c});
  return ds;
}

}  // namespace emblaunder
