#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hdbformer/errors.hpp"
#include "hdbformer/nn.hpp"

namespace hdbf {

/// Batch of integer label maps, N×H×W row-major.
struct LabelMap {
  std::size_t n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), data(n_ * h_ * w_, fill) {}

  std::uint8_t& at(std::size_t i, std::size_t y, std::size_t x) { return data[(i * h + y) * w + x]; }
  std::uint8_t at(std::size_t i, std::size_t y, std::size_t x) const {
    return data[(i * h + y) * w + x];
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(data).subspan(i * h * w, h * w);
  }
  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour label resampling: source index floor((i+0.5)·in/out).
inline LabelMap resize_labels_nearest(const LabelMap& src, std::size_t h, std::size_t w) {
  if (src.h == h && src.w == w) return src;
  LabelMap out(src.n, h, w);
  std::vector<std::size_t> ys(h), xs(w);
  for (std::size_t y = 0; y < h; ++y)
    ys[y] = std::min(src.h - 1, static_cast<std::size_t>((y + 0.5) * src.h / h));
  for (std::size_t x = 0; x < w; ++x)
    xs[x] = std::min(src.w - 1, static_cast<std::size_t>((x + 0.5) * src.w / w));
  for (std::size_t n = 0; n < src.n; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(n, y, x) = src.at(n, ys[y], xs[x]);
  return out;
}

/// K×K counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
           std::uint8_t ignore = kIgnoreLabel) {
    if (pred.size() != gt.size()) {
      throw ShapeError("confusion matrix: " + std::to_string(pred.size()) + " predictions vs " +
                       std::to_string(gt.size()) + " labels");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (gt[i] >= k_ || pred[i] >= k_) {
        throw DataError("label " + std::to_string(std::max(gt[i], pred[i])) +
                        " out of range for " + std::to_string(k_) + " classes");
      }
      ++counts_[gt[i] * k_ + pred[i]];
    }
  }

  std::size_t num_classes() const { return k_; }
  std::uint64_t count(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }

  /// Per-class IoU; NaN for classes absent from both prediction and truth.
  std::vector<double> class_iou() const {
    std::vector<double> iou(k_, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < k_; ++c) {
      std::uint64_t row = 0, col = 0;
      for (std::size_t j = 0; j < k_; ++j) {
        row += count(c, j);
        col += count(j, c);
      }
      const std::uint64_t inter = count(c, c);
      const std::uint64_t uni = row + col - inter;
      if (uni > 0) iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
    }
    return iou;
  }

  /// Mean IoU over classes present in prediction or truth; 0 when none are.
  double miou() const {
    double s = 0;
    std::size_t n = 0;
    for (double v : class_iou()) {
      if (std::isnan(v)) continue;
      s += v;
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  /// Fraction of non-ignored pixels predicted correctly; 0 when none counted.
  double pixel_acc() const {
    std::uint64_t correct = 0, total = 0;
    for (std::size_t i = 0; i < k_; ++i) {
      correct += count(i, i);
      for (std::size_t j = 0; j < k_; ++j) total += count(i, j);
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  double miou = 0;
  std::vector<double> per_class;  // NaN marks classes excluded from the mean
};

inline MiouResult miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                       std::size_t num_classes, std::uint8_t ignore = kIgnoreLabel) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt, ignore);
  return {cm.miou(), cm.class_iou()};
}

inline double pixel_acc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                        std::uint8_t ignore = kIgnoreLabel) {
  if (pred.size() != gt.size()) throw ShapeError("pixel_acc: size mismatch");
  std::uint64_t correct = 0, total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    ++total;
    correct += pred[i] == gt[i];
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace hdbf
