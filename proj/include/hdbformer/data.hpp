#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hdbformer/metrics.hpp"
#include "hdbformer/nn.hpp"

namespace hdbf {

/// One RGB-D scene: rgb 3×H×W and depth 1×H×W in [0,1], labels H×W.
struct SegSample {
  Tensor<float> rgb;
  Tensor<float> depth;
  LabelMap labels;  // n = 1

  std::size_t height() const { return labels.h; }
  std::size_t width() const { return labels.w; }
};

/// Depth value of the empty background (inverse of the far-plane distance).
inline constexpr float kBackgroundDepth = 0.1f;

struct SceneOptions {
  int min_shapes = 3;
  int max_shapes = 8;
  int force_shape_count = -1;  // test hook: exact number of shapes when ≥ 0
  double noise_sigma = 0.05;
};

/// Class colour. Class 0 is background; the first classes use well-separated
/// fixed colours, later ones a deterministic hash.
inline std::array<float, 3> class_color(std::size_t cls) {
  static constexpr std::array<std::array<float, 3>, 8> kPalette{{
      {0.45f, 0.45f, 0.45f},
      {0.90f, 0.15f, 0.15f},
      {0.15f, 0.75f, 0.20f},
      {0.20f, 0.30f, 0.90f},
      {0.95f, 0.85f, 0.15f},
      {0.85f, 0.20f, 0.85f},
      {0.15f, 0.85f, 0.85f},
      {0.95f, 0.55f, 0.10f},
  }};
  if (cls < kPalette.size()) return kPalette[cls];
  std::uint64_t h = cls * 0x9E3779B97F4A7C15ull;
  std::array<float, 3> c{};
  for (auto& v : c) {
    h ^= h >> 29;
    h *= 0xBF58476D1CE4E5B9ull;
    v = 0.1f + 0.8f * static_cast<float>(h >> 40) / static_cast<float>(1ull << 24);
  }
  return c;
}

enum class ShapeKind { rectangle, circle, triangle };

/// Synthetic scene of 3–8 random rectangles, circles, and triangles at random
/// distances, painted far-to-near so nearer shapes occlude farther ones.
/// Depth is inverse distance: shapes lie at distances in [1.5, 8], the
/// background at 10. Deterministic in `seed`.
inline SegSample gen_scene(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t K,
                           const SceneOptions& opt = {}) {
  if (K < 2) throw ConfigError("gen_scene needs at least 2 classes");
  if (H == 0 || W == 0) throw ConfigError("gen_scene needs positive extents");
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  struct Item {
    ShapeKind kind;
    std::uint8_t cls;
    double distance;
    double cy, cx, a, b;          // rectangle half-extents or circle radius
    std::array<double, 6> tri{};  // triangle vertices (y, x) × 3
  };
  const int count = opt.force_shape_count >= 0
                        ? opt.force_shape_count
                        : static_cast<int>(pick(static_cast<std::size_t>(opt.min_shapes),
                                                static_cast<std::size_t>(opt.max_shapes)));
  const double S = static_cast<double>(std::min(H, W));
  std::vector<Item> items;
  for (int i = 0; i < count; ++i) {
    Item it{};
    it.kind = static_cast<ShapeKind>(pick(0, 2));
    it.cls = static_cast<std::uint8_t>(pick(1, K - 1));
    it.distance = uni(1.5, 8.0);
    it.cy = uni(0, static_cast<double>(H));
    it.cx = uni(0, static_cast<double>(W));
    switch (it.kind) {
      case ShapeKind::rectangle:
        it.a = uni(S / 12, S / 4);
        it.b = uni(S / 12, S / 4);
        break;
      case ShapeKind::circle:
        it.a = uni(S / 10, S / 4);
        break;
      case ShapeKind::triangle: {
        const double r = uni(S / 8, S / 3);
        const double phase = uni(0, 2 * M_PI);
        for (int v = 0; v < 3; ++v) {
          const double ang = phase + v * 2 * M_PI / 3 + uni(-0.4, 0.4);
          it.tri[2 * v] = it.cy + r * std::sin(ang);
          it.tri[2 * v + 1] = it.cx + r * std::cos(ang);
        }
        break;
      }
    }
    items.push_back(it);
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& l, const Item& r) { return l.distance > r.distance; });

  auto inside = [](const Item& it, double y, double x) {
    switch (it.kind) {
      case ShapeKind::rectangle:
        return std::abs(y - it.cy) <= it.a && std::abs(x - it.cx) <= it.b;
      case ShapeKind::circle:
        return (y - it.cy) * (y - it.cy) + (x - it.cx) * (x - it.cx) <= it.a * it.a;
      case ShapeKind::triangle: {
        const auto& t = it.tri;
        auto edge = [&](int i, int j) {
          return (t[2 * j + 1] - t[2 * i + 1]) * (y - t[2 * i]) -
                 (t[2 * j] - t[2 * i]) * (x - t[2 * i + 1]);
        };
        const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
    return false;
  };

  SegSample s;
  s.labels = LabelMap(1, H, W, 0);
  std::vector<float> depth(H * W, kBackgroundDepth);
  for (const auto& it : items) {
    const float dv = static_cast<float>(1.0 / it.distance);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (inside(it, y + 0.5, x + 0.5)) {
          s.labels.at(0, y, x) = it.cls;
          depth[y * W + x] = dv;
        }
  }
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  std::vector<float> rgb(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < H * W; ++p) {
      const double v = class_color(s.labels.data[p])[c] + noise(rng);
      rgb[c * H * W + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  s.rgb = Tensor<float>({3, H, W}, std::move(rgb));
  s.depth = Tensor<float>({1, H, W}, std::move(depth));
  return s;
}

struct AugmentParams {
  bool flip = false;
  double scale = 1.0;
  std::size_t offset_y = 0;  // crop start (scaled ≥ target) or paste position (scaled < target)
  std::size_t offset_x = 0;
};

inline constexpr double kAugmentMinScale = 0.5;
inline constexpr double kAugmentMaxScale = 1.75;

/// Draws flip (p = 0.5), scale U[0.5, 1.75], and a uniform crop/paste offset.
inline AugmentParams draw_augment(std::uint64_t seed, std::size_t H, std::size_t W) {
  std::mt19937_64 rng(seed);
  AugmentParams p;
  p.flip = std::bernoulli_distribution(0.5)(rng);
  p.scale = std::uniform_real_distribution<double>(kAugmentMinScale, kAugmentMaxScale)(rng);
  const std::size_t sh = std::max<std::size_t>(1, std::lround(H * p.scale));
  const std::size_t sw = std::max<std::size_t>(1, std::lround(W * p.scale));
  const std::size_t dy = sh > H ? sh - H : H - sh, dx = sw > W ? sw - W : W - sw;
  p.offset_y = std::uniform_int_distribution<std::size_t>(0, dy)(rng);
  p.offset_x = std::uniform_int_distribution<std::size_t>(0, dx)(rng);
  return p;
}

/// Applies flip, rescale (bilinear for images, nearest for labels), then
/// crops or pads back to the original size. Padding is 0 for images and the
/// ignore label for labels.
inline SegSample augment_with(const SegSample& s, const AugmentParams& p) {
  NoGradGuard no_grad;
  const std::size_t H = s.height(), W = s.width();
  const std::size_t sh = std::max<std::size_t>(1, std::lround(H * p.scale));
  const std::size_t sw = std::max<std::size_t>(1, std::lround(W * p.scale));

  auto as_batch = [](const Tensor<float>& t) {
    return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
  };
  Tensor<float> rgb = as_batch(s.rgb), depth = as_batch(s.depth);
  LabelMap lab = s.labels;
  if (p.flip) {
    rgb = flip_last(rgb);
    depth = flip_last(depth);
    for (std::size_t y = 0; y < H; ++y) std::reverse(lab.data.begin() + y * W, lab.data.begin() + (y + 1) * W);
  }
  rgb = bilinear_resize(rgb, sh, sw);
  depth = bilinear_resize(depth, sh, sw);
  lab = resize_labels_nearest(lab, sh, sw);

  auto place = [&](std::size_t src_extent, std::size_t dst_extent, std::size_t offset,
                   std::size_t dst) -> long {
    // Source coordinate for destination index, or −1 when it falls in padding.
    if (src_extent >= dst_extent) return static_cast<long>(dst + offset);
    if (dst < offset || dst >= offset + src_extent) return -1;
    return static_cast<long>(dst - offset);
  };
  SegSample out;
  out.labels = LabelMap(1, H, W, kIgnoreLabel);
  std::vector<float> orgb(3 * H * W, 0.0f), odepth(H * W, 0.0f);
  for (std::size_t y = 0; y < H; ++y) {
    const long sy = place(sh, H, p.offset_y, y);
    if (sy < 0 || sy >= static_cast<long>(sh)) continue;
    for (std::size_t x = 0; x < W; ++x) {
      const long sx = place(sw, W, p.offset_x, x);
      if (sx < 0 || sx >= static_cast<long>(sw)) continue;
      const std::size_t src = static_cast<std::size_t>(sy) * sw + static_cast<std::size_t>(sx);
      for (std::size_t c = 0; c < 3; ++c) orgb[c * H * W + y * W + x] = rgb[c * sh * sw + src];
      odepth[y * W + x] = depth[src];
      out.labels.data[y * W + x] = lab.data[src];
    }
  }
  out.rgb = Tensor<float>({3, H, W}, std::move(orgb));
  out.depth = Tensor<float>({1, H, W}, std::move(odepth));
  return out;
}

inline SegSample augment(const SegSample& s, std::uint64_t seed) {
  return augment_with(s, draw_augment(seed, s.height(), s.width()));
}

struct Batch {
  Tensor<float> rgb;    // N×3×H×W
  Tensor<float> depth;  // N×1×H×W
  LabelMap labels;      // N×H×W
};

inline Batch make_batch(const std::vector<SegSample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  const std::size_t N = samples.size(), H = samples[0].height(), W = samples[0].width();
  std::vector<float> rgb, depth;
  rgb.reserve(N * 3 * H * W);
  depth.reserve(N * H * W);
  Batch b;
  b.labels = LabelMap(N, H, W);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& s = samples[i];
    if (s.height() != H || s.width() != W) throw ShapeError("make_batch: mixed sample sizes");
    rgb.insert(rgb.end(), s.rgb.values().begin(), s.rgb.values().end());
    depth.insert(depth.end(), s.depth.values().begin(), s.depth.values().end());
    std::copy(s.labels.data.begin(), s.labels.data.end(), b.labels.data.begin() + i * H * W);
  }
  b.rgb = Tensor<float>({N, 3, H, W}, std::move(rgb));
  b.depth = Tensor<float>({N, 1, H, W}, std::move(depth));
  return b;
}

}  // namespace hdbf
