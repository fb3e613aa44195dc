#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hdbformer/ops.hpp"
#include "hdbformer/tensor.hpp"

namespace hdbf {

/// Ignored label value in segmentation maps.
inline constexpr std::uint8_t kIgnoreLabel = 255;

namespace detail {

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " input, got " + to_string(s));
  }
}

/// Output positions whose input column ow*stride + offset falls in [0, extent).
inline std::pair<long, long> valid_range(long out_extent, long stride, long offset,
                                         long extent) {
  long lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  long hi_num = extent - 1 - offset;
  long hi = hi_num < 0 ? 0 : hi_num / stride + 1;
  return {std::min(lo, out_extent), std::min(hi, out_extent)};
}

}  // namespace detail

namespace kernels {

/// Unfolds N×Cin×H×W input into a (Cin·k·k)×(N·OH·OW) column matrix with
/// rows ordered (ci, kh, kw). Padded taps hold zero.
template <typename T>
void im2col(const T* x, std::size_t N, std::size_t Cin, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
            T* col) {
  const std::size_t P = OH * OW, NP = N * P;
  const long s = static_cast<long>(stride), p = static_cast<long>(pad);
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t kh = 0; kh < k; ++kh)
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* row = col + ((ci * k + kh) * k + kw) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          const T* xp = x + (n * Cin + ci) * H * W;
          for (std::size_t oh = 0; oh < OH; ++oh) {
            const long ih = static_cast<long>(oh) * s + static_cast<long>(kh) - p;
            T* dst = row + n * P + oh * OW;
            if (ih < 0 || ih >= static_cast<long>(H)) {
              std::fill(dst, dst + OW, T(0));
              continue;
            }
            const T* xr = xp + ih * static_cast<long>(W);
            for (std::size_t ow = 0; ow < OW; ++ow) {
              const long iw = static_cast<long>(ow) * s + static_cast<long>(kw) - p;
              dst[ow] = (iw < 0 || iw >= static_cast<long>(W)) ? T(0) : xr[iw];
            }
          }
        }
      }
}

/// Adjoint of im2col: scatter-adds columns back into an N×Cin×H×W buffer.
template <typename T>
void col2im(const T* col, std::size_t N, std::size_t Cin, std::size_t H, std::size_t W,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
            T* x) {
  const std::size_t P = OH * OW, NP = N * P;
  const long s = static_cast<long>(stride), p = static_cast<long>(pad);
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t kh = 0; kh < k; ++kh)
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((ci * k + kh) * k + kw) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          T* xp = x + (n * Cin + ci) * H * W;
          for (std::size_t oh = 0; oh < OH; ++oh) {
            const long ih = static_cast<long>(oh) * s + static_cast<long>(kh) - p;
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            const T* src = row + n * P + oh * OW;
            T* xr = xp + ih * static_cast<long>(W);
            for (std::size_t ow = 0; ow < OW; ++ow) {
              const long iw = static_cast<long>(ow) * s + static_cast<long>(kw) - p;
              if (iw >= 0 && iw < static_cast<long>(W)) xr[iw] += src[ow];
            }
          }
        }
      }
}

}  // namespace kernels

/// Cross-correlation of N×Cin×H×W input with Cout×Cin×k×k weights plus
/// optional bias (pass an undefined tensor for none). `pad` zeros precede
/// each spatial axis and `pad_end` (default: same as `pad`) follow it; the
/// output extent (H + pad + pad_end − k)/stride + 1 must be integral.
/// Each output accumulates bias, then taps in (ci, kh, kw) order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t pad = 0, long pad_end = -1) {
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", w.shape(), 4);
  const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin || w.dim(3) != k) {
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias " + to_string(b.shape()) + " for " + std::to_string(Cout) +
                     " output channels");
  }
  const std::size_t pads = pad + (pad_end < 0 ? pad : static_cast<std::size_t>(pad_end));
  if (stride == 0 || H + pads < k || W + pads < k || (H + pads - k) % stride != 0 ||
      (W + pads - k) % stride != 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " stride " +
                     std::to_string(stride) + " pad " + std::to_string(pad) +
                     " gives non-integral output for input " + to_string(x.shape()));
  }
  const std::size_t OH = (H + pads - k) / stride + 1;
  const std::size_t OW = (W + pads - k) / stride + 1;
  const std::size_t P = OH * OW, NP = N * P, R = Cin * k * k;

  const bool direct = k == 1 && stride == 1 && pad == 0;
  std::shared_ptr<std::vector<T>> col;
  if (!direct) {
    col = std::make_shared<std::vector<T>>(R * NP);
    kernels::im2col(x.data().data(), N, Cin, H, W, k, stride, pad, OH, OW, col->data());
  }

  std::vector<T> out(N * Cout * P);
  std::vector<T> tmp(direct ? 0 : Cout * NP);
  for (std::size_t co = 0; co < Cout; ++co) {
    const T bias = b.defined() ? b[co] : T(0);
    if (direct) {
      for (std::size_t n = 0; n < N; ++n)
        std::fill_n(out.data() + (n * Cout + co) * P, P, bias);
    } else {
      std::fill_n(tmp.data() + co * NP, NP, bias);
    }
  }
  if (direct) {
    for (std::size_t n = 0; n < N; ++n)
      kernels::gemm(Cout, P, Cin, w.data().data(), false, x.data().data() + n * Cin * P, false,
                    out.data() + n * Cout * P);
  } else {
    kernels::gemm(Cout, NP, R, w.data().data(), false, col->data(), false, tmp.data());
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t n = 0; n < N; ++n)
        std::copy_n(tmp.data() + co * NP + n * P, P, out.data() + (n * Cout + co) * P);
  }
  detail::count_macs("conv2d", static_cast<std::uint64_t>(NP) * Cout * R);

  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::record<T>(
      "conv2d", Shape{N, Cout, OH, OW}, std::move(out), inputs,
      [x, w, col, direct, N, Cin, H, W, Cout, k, stride, pad, OH, OW, P, NP, R](
          const std::vector<T>&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        T* dx = gin[0] ? gin[0]->data() : nullptr;
        T* dw = gin[1] ? gin[1]->data() : nullptr;
        T* db = gin.size() > 2 && gin[2] ? gin[2]->data() : nullptr;
        if (db) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Cout; ++co) {
              const T* go = g.data() + (n * Cout + co) * P;
              T acc = T(0);
              for (std::size_t i = 0; i < P; ++i) acc += go[i];
              db[co] += acc;
            }
        }
        if (direct) {
          for (std::size_t n = 0; n < N; ++n) {
            const T* gn = g.data() + n * Cout * P;
            const T* xn = x.data().data() + n * Cin * P;
            if (dx) kernels::gemm(Cin, P, Cout, w.data().data(), true, gn, false, dx + n * Cin * P);
            if (dw) kernels::gemm(Cout, Cin, P, gn, false, xn, true, dw);
          }
          return;
        }
        // Gradient regrouped as Cout×(N·P) to match the column layout.
        std::vector<T> gm(Cout * NP);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t co = 0; co < Cout; ++co)
            std::copy_n(g.data() + (n * Cout + co) * P, P, gm.data() + co * NP + n * P);
        if (dw) kernels::gemm(Cout, R, NP, gm.data(), false, col->data(), true, dw);
        if (dx) {
          std::vector<T> dcol(R * NP, T(0));
          kernels::gemm(R, NP, Cout, w.data().data(), true, gm.data(), false, dcol.data());
          kernels::col2im(dcol.data(), N, Cin, H, W, k, stride, pad, OH, OW, dx);
        }
      });
}

/// Per-channel k×k convolution, stride 1, same padding. Weights C×1×k×k.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t pad = 1) {
  detail::require_rank("depthwise_conv2d", x.shape(), 4);
  detail::require_rank("depthwise_conv2d", w.shape(), 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = w.dim(2);
  if (w.dim(0) != C || w.dim(1) != 1 || w.dim(3) != k) {
    throw ShapeError("depthwise_conv2d: weight " + to_string(w.shape()) +
                     " needs one kernel per channel of " + to_string(x.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != C)) {
    throw ShapeError("depthwise_conv2d: bias " + to_string(b.shape()) + " for " +
                     std::to_string(C) + " channels");
  }
  if (H + 2 * pad < k || W + 2 * pad < k) {
    throw ShapeError("depthwise_conv2d: kernel larger than padded input " + to_string(x.shape()));
  }
  const std::size_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
  const long p = static_cast<long>(pad);
  std::vector<std::pair<long, long>> cols(k), rows(k);
  for (std::size_t t = 0; t < k; ++t) {
    cols[t] = detail::valid_range(static_cast<long>(OW), 1, static_cast<long>(t) - p,
                                  static_cast<long>(W));
    rows[t] = detail::valid_range(static_cast<long>(OH), 1, static_cast<long>(t) - p,
                                  static_cast<long>(H));
  }
  std::vector<T> out(N * C * OH * OW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.data() + (n * C + c) * OH * OW;
      const T* xp = x.data().data() + (n * C + c) * H * W;
      std::fill(o, o + OH * OW, b.defined() ? b[c] : T(0));
      for (std::size_t kh = 0; kh < k; ++kh) {
        for (std::size_t kw = 0; kw < k; ++kw) {
          const T wv = w[(c * k + kh) * k + kw];
          const auto [lo, hi] = cols[kw];
          const long off = static_cast<long>(kw) - p;
          for (long oh = rows[kh].first; oh < rows[kh].second; ++oh) {
            const T* xr = xp + (oh + static_cast<long>(kh) - p) * static_cast<long>(W);
            T* orow = o + oh * static_cast<long>(OW);
            for (long ow = lo; ow < hi; ++ow) orow[ow] += wv * xr[ow + off];
          }
        }
      }
    }
  }
  // Padded taps are counted, matching conv2d and the analytic cost model.
  detail::count_macs("depthwise_conv2d", static_cast<std::uint64_t>(N) * C * OH * OW * k * k);

  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::record<T>(
      "depthwise_conv2d", Shape{N, C, OH, OW}, std::move(out), inputs,
      [x, w, N, C, H, W, k, OH, OW, p, cols, rows](const std::vector<T>&, std::span<const T> g,
                                                    std::span<std::vector<T>* const> gin) {
        T* dx = gin[0] ? gin[0]->data() : nullptr;
        T* dw = gin[1] ? gin[1]->data() : nullptr;
        T* db = gin.size() > 2 && gin[2] ? gin[2]->data() : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* go = g.data() + (n * C + c) * OH * OW;
            const T* xp = x.data().data() + (n * C + c) * H * W;
            T* dxp = dx ? dx + (n * C + c) * H * W : nullptr;
            if (db) {
              T acc = T(0);
              for (std::size_t i = 0; i < OH * OW; ++i) acc += go[i];
              db[c] += acc;
            }
            for (std::size_t kh = 0; kh < k; ++kh) {
              for (std::size_t kw = 0; kw < k; ++kw) {
                const std::size_t widx = (c * k + kh) * k + kw;
                const T wv = w[widx];
                const auto [lo, hi] = cols[kw];
                const long off = static_cast<long>(kw) - p;
                T wacc = T(0);
                for (long oh = rows[kh].first; oh < rows[kh].second; ++oh) {
                  const long row = (oh + static_cast<long>(kh) - p) * static_cast<long>(W);
                  const T* grow = go + oh * static_cast<long>(OW);
                  if (dxp)
                    for (long ow = lo; ow < hi; ++ow) dxp[row + ow + off] += wv * grow[ow];
                  if (dw)
                    for (long ow = lo; ow < hi; ++ow) wacc += grow[ow] * xp[row + ow + off];
                }
                if (dw) dw[widx] += wacc;
              }
            }
          }
        }
      });
}

/// 1×1 convolution; weights Cout×Cin×1×1.
template <typename T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank("pointwise_conv2d", w.shape(), 4);
  if (w.dim(2) != 1 || w.dim(3) != 1) {
    throw ShapeError("pointwise_conv2d: expected 1×1 kernel, got " + to_string(w.shape()));
  }
  return conv2d(x, w, b, 1, 0);
}

/// 2×2 max pooling, stride 2. Ties go to the first element in scan order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  detail::require_rank("maxpool2", x.shape(), 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) {
    throw ShapeError("maxpool2: odd spatial extent in " + to_string(x.shape()));
  }
  const std::size_t OH = H / 2, OW = W / 2;
  std::vector<T> out(N * C * OH * OW);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& in = x.values();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const std::size_t ib = plane * H * W, ob = plane * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::size_t best = ib + 2 * oh * W + 2 * ow;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ib + (2 * oh + dy) * W + 2 * ow + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[ob + oh * OW + ow] = in[best];
        (*argmax)[ob + oh * OW + ow] = best;
      }
    }
  }
  return detail::record<T>("maxpool2", Shape{N, C, OH, OW}, std::move(out), {x},
                           [argmax](const std::vector<T>&, std::span<const T> g,
                                    std::span<std::vector<T>* const> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*gin[0])[(*argmax)[i]] += g[i];
                           });
}

/// Half-open input bins for adaptive pooling of `in` cells into `out` cells:
/// [floor(i·in/out), floor((i+1)·in/out)), widened to one cell when empty.
inline std::vector<std::pair<std::size_t, std::size_t>> adaptive_bins(std::size_t in,
                                                                      std::size_t out) {
  std::vector<std::pair<std::size_t, std::size_t>> bins(out);
  for (std::size_t i = 0; i < out; ++i) {
    std::size_t start = i * in / out;
    std::size_t end = (i + 1) * in / out;
    if (end <= start) end = start + 1;
    bins[i] = {start, end};
  }
  return bins;
}

template <typename T>
Tensor<T> adaptive_avgpool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank("adaptive_avgpool", x.shape(), 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == 0 || W == 0 || out_h == 0 || out_w == 0) {
    throw ShapeError("adaptive_avgpool: empty extent in " + to_string(x.shape()));
  }
  const auto rb = adaptive_bins(H, out_h);
  const auto cb = adaptive_bins(W, out_w);
  std::vector<T> out(N * C * out_h * out_w);
  const auto& in = x.values();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        T acc = T(0);
        for (std::size_t r = rb[i].first; r < rb[i].second; ++r)
          for (std::size_t c = cb[j].first; c < cb[j].second; ++c) acc += in[(plane * H + r) * W + c];
        const std::size_t count = (rb[i].second - rb[i].first) * (cb[j].second - cb[j].first);
        out[(plane * out_h + i) * out_w + j] = acc / static_cast<T>(count);
      }
    }
  }
  return detail::record<T>(
      "adaptive_avgpool", Shape{N, C, out_h, out_w}, std::move(out), {x},
      [N, C, H, W, out_h, out_w, rb, cb](const std::vector<T>&, std::span<const T> g,
                                          std::span<std::vector<T>* const> gin) {
        auto& dx = *gin[0];
        for (std::size_t plane = 0; plane < N * C; ++plane) {
          for (std::size_t i = 0; i < out_h; ++i) {
            for (std::size_t j = 0; j < out_w; ++j) {
              const std::size_t count =
                  (rb[i].second - rb[i].first) * (cb[j].second - cb[j].first);
              const T share = g[(plane * out_h + i) * out_w + j] / static_cast<T>(count);
              for (std::size_t r = rb[i].first; r < rb[i].second; ++r)
                for (std::size_t c = cb[j].first; c < cb[j].second; ++c)
                  dx[(plane * H + r) * W + c] += share;
            }
          }
        }
      });
}

namespace detail {

/// Half-pixel (align_corners=false) sampling taps along one axis.
template <typename T>
struct BilinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<T> frac;
};

template <typename T>
BilinearTaps<T> bilinear_taps(std::size_t in, std::size_t out) {
  BilinearTaps<T> t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[i] = i0;
    t.hi[i] = std::min(i0 + 1, in - 1);
    t.frac[i] = static_cast<T>(src - static_cast<double>(i0));
  }
  return t;
}

}  // namespace detail

/// Bilinear resize with the align_corners=false convention.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank("bilinear_resize", x.shape(), 4);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty target extent");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return reshape(x, x.shape());
  const auto ty = detail::bilinear_taps<T>(H, out_h);
  const auto tx = detail::bilinear_taps<T>(W, out_w);
  std::vector<T> out(N * C * out_h * out_w);
  const auto& in = x.values();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const T* src = in.data() + plane * H * W;
    T* dst = out.data() + plane * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T ly = ty.frac[i];
      const T* r0 = src + ty.lo[i] * W;
      const T* r1 = src + ty.hi[i] * W;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T lx = tx.frac[j];
        const T top = (T(1) - lx) * r0[tx.lo[j]] + lx * r0[tx.hi[j]];
        const T bot = (T(1) - lx) * r1[tx.lo[j]] + lx * r1[tx.hi[j]];
        dst[i * out_w + j] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  return detail::record<T>(
      "bilinear_resize", Shape{N, C, out_h, out_w}, std::move(out), {x},
      [N, C, H, W, out_h, out_w, ty, tx](const std::vector<T>&, std::span<const T> g,
                                          std::span<std::vector<T>* const> gin) {
        auto& dx = *gin[0];
        for (std::size_t plane = 0; plane < N * C; ++plane) {
          T* d = dx.data() + plane * H * W;
          const T* go = g.data() + plane * out_h * out_w;
          for (std::size_t i = 0; i < out_h; ++i) {
            const T ly = ty.frac[i];
            for (std::size_t j = 0; j < out_w; ++j) {
              const T lx = tx.frac[j];
              const T v = go[i * out_w + j];
              d[ty.lo[i] * W + tx.lo[j]] += (T(1) - ly) * (T(1) - lx) * v;
              d[ty.lo[i] * W + tx.hi[j]] += (T(1) - ly) * lx * v;
              d[ty.hi[i] * W + tx.lo[j]] += ly * (T(1) - lx) * v;
              d[ty.hi[i] * W + tx.hi[j]] += ly * lx * v;
            }
          }
        }
      });
}

/// Position-wise x·w + b over the last axis; w is Din×Dout.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  const std::size_t Din = w.dim(0), Dout = w.dim(1), tokens = x.numel() / Din;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != Dout)) {
    throw ShapeError("linear: bias " + to_string(b.shape()) + " for output width " +
                     std::to_string(Dout));
  }
  std::vector<T> out(tokens * Dout, T(0));
  kernels::gemm(tokens, Dout, Din, x.data().data(), false, w.data().data(), false, out.data());
  if (b.defined())
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t o = 0; o < Dout; ++o) out[t * Dout + o] += b[o];
  detail::count_macs("linear", tokens * Din * Dout);
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::record<T>(
      "linear", std::move(out_shape), std::move(out), inputs,
      [x, w, Din, Dout, tokens](const std::vector<T>&, std::span<const T> g,
                                std::span<std::vector<T>* const> gin) {
        if (gin[0])
          kernels::gemm(tokens, Din, Dout, g.data(), false, w.data().data(), true, gin[0]->data());
        if (gin[1])
          kernels::gemm(Din, Dout, tokens, x.data().data(), true, g.data(), false, gin[1]->data());
        if (gin.size() > 2 && gin[2])
          for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t o = 0; o < Dout; ++o) (*gin[2])[o] += g[t * Dout + o];
      });
}

/// `linear` applied to every pixel of an N×Din×H×W map, treating the map as
/// H·W tokens of width Din. Same Din×Dout weight layout as `linear`.
template <typename T>
Tensor<T> linear_channels(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank("linear_channels", x.shape(), 4);
  if (w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("linear: feature map " + to_string(x.shape()) +
                     " incompatible with weight " + to_string(w.shape()));
  }
  const std::size_t N = x.dim(0), Din = w.dim(0), Dout = w.dim(1);
  const std::size_t P = x.dim(2) * x.dim(3);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != Dout)) {
    throw ShapeError("linear: bias " + to_string(b.shape()) + " for output width " +
                     std::to_string(Dout));
  }
  std::vector<T> out(N * Dout * P, T(0));
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out.data() + n * Dout * P;
    kernels::gemm(Dout, P, Din, w.data().data(), true, x.data().data() + n * Din * P, false, o);
    if (b.defined())
      for (std::size_t c = 0; c < Dout; ++c)
        for (std::size_t p = 0; p < P; ++p) o[c * P + p] += b[c];
  }
  detail::count_macs("linear", N * P * Din * Dout);
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::record<T>(
      "linear", Shape{N, Dout, x.dim(2), x.dim(3)}, std::move(out), inputs,
      [x, w, N, Din, Dout, P](const std::vector<T>&, std::span<const T> g,
                              std::span<std::vector<T>* const> gin) {
        for (std::size_t n = 0; n < N; ++n) {
          const T* gn = g.data() + n * Dout * P;
          if (gin[0])
            kernels::gemm(Din, P, Dout, w.data().data(), false, gn, false,
                          gin[0]->data() + n * Din * P);
          if (gin[1])
            kernels::gemm(Din, Dout, P, x.data().data() + n * Din * P, false, gn, true,
                          gin[1]->data());
          if (gin.size() > 2 && gin[2])
            for (std::size_t c = 0; c < Dout; ++c) {
              T acc = T(0);
              for (std::size_t p = 0; p < P; ++p) acc += gn[c * P + p];
              (*gin[2])[c] += acc;
            }
        }
      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over `axis` (eps 1e-5), then applies per-channel affine.
/// axis=1 on an N×C×H×W map normalizes each pixel across channels.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    long axis = -1) {
  const std::size_t ax = detail::normalize_axis("layernorm", axis, x.rank());
  const auto [outer, n, inner] = kernels::axis_split(x.shape(), ax);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layernorm: affine size " + std::to_string(gamma.numel()) +
                     " does not match normalized extent " + std::to_string(n));
  }
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(outer * inner);
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  const T eps = static_cast<T>(kLayerNormEps);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mu = T(0);
      for (std::size_t k = 0; k < n; ++k) mu += in[base + k * inner];
      mu /= static_cast<T>(n);
      T var = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T d = in[base + k * inner] - mu;
        var += d * d;
      }
      var /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[o * inner + j] = inv;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = base + k * inner;
        const T xh = (in[idx] - mu) * inv;
        (*xhat)[idx] = xh;
        out[idx] = xh * gamma[k] + beta[k];
      }
    }
  }
  return detail::record<T>(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat, inv_std, outer = outer, n = n, inner = inner](
          const std::vector<T>&, std::span<const T> g, std::span<std::vector<T>* const> gin) {
        const T nf = static_cast<T>(n);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t idx = base + k * inner;
              const T dxh = g[idx] * gamma[k];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[idx];
              if (gin[1]) (*gin[1])[k] += g[idx] * (*xhat)[idx];
              if (gin[2]) (*gin[2])[k] += g[idx];
            }
            if (gin[0]) {
              const T inv = (*inv_std)[o * inner + j];
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = base + k * inner;
                const T dxh = g[idx] * gamma[k];
                (*gin[0])[idx] += inv / nf * (nf * dxh - sum_dxh - (*xhat)[idx] * sum_dxh_xh);
              }
            }
          }
        }
      });
}

/// Mean over non-ignored pixels of −log softmax(logits)[label]. Labels are
/// N×h×w at logit resolution; returns 0 when every pixel is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                        std::uint8_t ignore_index = kIgnoreLabel) {
  detail::require_rank("cross_entropy", logits.shape(), 4);
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const std::size_t P = logits.dim(2) * logits.dim(3);
  if (labels.size() != N * P) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  auto lab = std::make_shared<std::vector<std::uint8_t>>(labels.begin(), labels.end());
  const auto& z = logits.values();
  T total = T(0);
  std::size_t count = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::uint8_t y = labels[n * P + p];
      if (y != ignore_index && y >= K) {
        throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(K) + ")");
      }
      const std::size_t base = n * K * P + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z[base + k * P]);
      T denom = T(0);
      for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[base + k * P] - mx);
      const T log_denom = std::log(denom);
      for (std::size_t k = 0; k < K; ++k)
        (*probs)[base + k * P] = std::exp(z[base + k * P] - mx - log_denom);
      if (y == ignore_index) continue;
      total -= z[base + y * P] - mx - log_denom;
      ++count;
    }
  }
  const T loss = count ? total / static_cast<T>(count) : T(0);
  return detail::record<T>(
      "cross_entropy", Shape{1}, std::vector<T>{loss}, {logits},
      [probs, lab, N, K, P, count, ignore_index](const std::vector<T>&, std::span<const T> g,
                                                 std::span<std::vector<T>* const> gin) {
        if (!count) return;
        const T s = g[0] / static_cast<T>(count);
        auto& dz = *gin[0];
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t p = 0; p < P; ++p) {
            const std::uint8_t y = (*lab)[n * P + p];
            if (y == ignore_index) continue;
            const std::size_t base = n * K * P + p;
            for (std::size_t k = 0; k < K; ++k)
              dz[base + k * P] += s * ((*probs)[base + k * P] - (k == y ? T(1) : T(0)));
          }
        }
      });
}

/// Operator vocabulary of the architecture, with analytic parameter and
/// FLOP formulas used by the profiler.
enum class LayerKind {
  conv2d,
  depthwise_conv2d,
  pointwise_conv2d,
  linear,
  maxpool2,
  adaptive_avgpool,
  bilinear_resize,
  softmax,
  concat,
  add,
  mul,
  layernorm,
  gelu,
  matmul,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::depthwise_conv2d: return "depthwise_conv2d";
    case LayerKind::pointwise_conv2d: return "pointwise_conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::adaptive_avgpool: return "adaptive_avgpool";
    case LayerKind::bilinear_resize: return "bilinear_resize";
    case LayerKind::softmax: return "softmax";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::mul: return "mul";
    case LayerKind::layernorm: return "layernorm";
    case LayerKind::gelu: return "gelu";
    case LayerKind::matmul: return "matmul";
  }
  return "?";
}

/// FLOPs charged per output element for non-MAC ops. One MAC is 2 FLOPs.
struct FlopConvention {
  static constexpr std::uint64_t pool = 4;
  static constexpr std::uint64_t bilinear = 8;
  static constexpr std::uint64_t softmax = 5;
  static constexpr std::uint64_t layernorm = 5;
  static constexpr std::uint64_t gelu = 8;
  static constexpr std::uint64_t elementwise = 1;
};

struct LayerSpec {
  LayerKind kind = LayerKind::add;
  std::size_t in_channels = 0;   // Cin, Din, or normalized width
  std::size_t out_channels = 0;  // Cout, Dout
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static LayerSpec conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                        std::size_t pad) {
    return {LayerKind::conv2d, cin, cout, k, stride, pad};
  }
  static LayerSpec depthwise(std::size_t c, std::size_t k) {
    return {LayerKind::depthwise_conv2d, c, c, k, 1, k / 2};
  }
  static LayerSpec pointwise(std::size_t cin, std::size_t cout) {
    return {LayerKind::pointwise_conv2d, cin, cout, 1, 1, 0};
  }
  static LayerSpec dense(std::size_t din, std::size_t dout) {
    return {LayerKind::linear, din, dout, 1, 1, 0};
  }
  static LayerSpec norm(std::size_t c) { return {LayerKind::layernorm, c, c, 1, 1, 0}; }
  static LayerSpec simple(LayerKind k) { return {k, 0, 0, 1, 1, 0}; }

  void validate() const {
    const bool same_pad_conv = kind == LayerKind::depthwise_conv2d ||
                               (kind == LayerKind::conv2d && pad * 2 + 1 == kernel);
    if (same_pad_conv && kernel % 2 == 0) {
      throw ConfigError(std::string(layer_kind_name(kind)) +
                        ": same-padding convolution needs an odd kernel");
    }
    if (kernel == 0 || stride == 0) throw ConfigError("layer spec: zero kernel or stride");
  }

  std::uint64_t param_count() const {
    const std::uint64_t ci = in_channels, co = out_channels, k = kernel;
    switch (kind) {
      case LayerKind::conv2d: return co * ci * k * k + co;
      case LayerKind::depthwise_conv2d: return ci * k * k + ci;
      case LayerKind::pointwise_conv2d: return co * ci + co;
      case LayerKind::linear: return ci * co + co;
      case LayerKind::layernorm: return 2 * ci;
      default: return 0;
    }
  }
};

}  // namespace hdbf
