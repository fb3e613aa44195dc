#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "hdbformer/tensor.hpp"

namespace hdbf {

namespace kernels {

/// c[M×N] += op(a)·op(b) with op(a): M×K and op(b): K×N. When ta is set,
/// `a` is stored K×M; when tb is set, `b` is stored N×K.
template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* a, bool ta,
          const T* b, bool tb, T* c) {
  std::vector<T> a_t;
  if (ta) {
    a_t.resize(M * K);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < M; ++i) a_t[i * K + k] = a[k * M + i];
    a = a_t.data();
  }
  std::vector<T> b_t;
  if (tb) {
    b_t.resize(K * N);
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k) b_t[k * N + j] = b[j * K + k];
    b = b_t.data();
  }
  for (std::size_t i = 0; i < M; ++i) {
    T* crow = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = a[i * K + k];
      const T* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
}

/// Splits a shape around `axis` into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> axis_split(
    const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace kernels

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

inline std::size_t normalize_axis(const char* op, long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::record<T>("add", a.shape(), std::move(out), {a, b},
                           [](const std::vector<T>&, std::span<const T> g,
                              std::span<std::vector<T>* const> gin) {
                             for (auto* buf : gin) {
                               if (!buf) continue;
                               for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                             }
                           });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::record<T>("sub", a.shape(), std::move(out), {a, b},
                           [](const std::vector<T>&, std::span<const T> g,
                              std::span<std::vector<T>* const> gin) {
                             if (gin[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                             if (gin[1])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                           });
}

/// Element-wise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::record<T>("mul", a.shape(), std::move(out), {a, b},
                           [a, b](const std::vector<T>&, std::span<const T> g,
                                  std::span<std::vector<T>* const> gin) {
                             if (gin[0])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 (*gin[0])[i] += g[i] * b[i];
                             if (gin[1])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 (*gin[1])[i] += g[i] * a[i];
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::record<T>("scale", a.shape(), std::move(out), {a},
                           [s](const std::vector<T>&, std::span<const T> g,
                               std::span<std::vector<T>* const> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*gin[0])[i] += g[i] * s;
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return detail::record<T>("sum", Shape{1}, std::vector<T>{acc}, {a},
                           [](const std::vector<T>&, std::span<const T> g,
                              std::span<std::vector<T>* const> gin) {
                             for (auto& v : *gin[0]) v += g[0];
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Gaussian error linear unit, exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return detail::record<T>(
      "gelu", x.shape(), std::move(out), {x},
      [x, inv_sqrt2](const std::vector<T>&, std::span<const T> g,
                     std::span<std::vector<T>* const> gin) {
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(3.14159265358979323846));
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = x[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          (*gin[0])[i] += g[i] * (cdf + v * pdf);
        }
      });
}

/// Dense 2-D matrix product.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  kernels::gemm(M, N, K, a.data().data(), false, b.data().data(), false, out.data());
  detail::count_macs("matmul", M * N * K);
  return detail::record<T>(
      "matmul", Shape{M, N}, std::move(out), {a, b},
      [a, b, M, N, K](const std::vector<T>&, std::span<const T> g,
                      std::span<std::vector<T>* const> gin) {
        if (gin[0]) kernels::gemm(M, K, N, g.data(), false, b.data().data(), true, gin[0]->data());
        if (gin[1]) kernels::gemm(K, N, M, a.data().data(), true, g.data(), false, gin[1]->data());
      });
}

/// Batched product of rank-3 tensors: out[b] = op(a[b])·op(bm[b]).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& bm, bool trans_a = false,
              bool trans_b = false) {
  if (a.rank() != 3 || bm.rank() != 3 || a.dim(0) != bm.dim(0)) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(bm.shape()));
  }
  const std::size_t B = a.dim(0);
  const std::size_t M = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t K = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t Kb = trans_b ? bm.dim(2) : bm.dim(1);
  const std::size_t N = trans_b ? bm.dim(1) : bm.dim(2);
  if (K != Kb) {
    throw ShapeError("bmm: inner extents differ for " + to_string(a.shape()) + " and " +
                     to_string(bm.shape()));
  }
  std::vector<T> out(B * M * N, T(0));
  for (std::size_t i = 0; i < B; ++i) {
    kernels::gemm(M, N, K, a.data().data() + i * M * K, trans_a,
                  bm.data().data() + i * K * N, trans_b, out.data() + i * M * N);
  }
  detail::count_macs("bmm", B * M * N * K);
  return detail::record<T>(
      "bmm", Shape{B, M, N}, std::move(out), {a, bm},
      [a, bm, B, M, N, K, trans_a, trans_b](const std::vector<T>&, std::span<const T> g,
                                            std::span<std::vector<T>* const> gin) {
        for (std::size_t i = 0; i < B; ++i) {
          const T* gi = g.data() + i * M * N;
          const T* ai = a.data().data() + i * M * K;
          const T* bi = bm.data().data() + i * K * N;
          if (gin[0]) {
            T* da = gin[0]->data() + i * M * K;
            if (!trans_a) kernels::gemm(M, K, N, gi, false, bi, !trans_b, da);
            else kernels::gemm(K, M, N, bi, trans_b, gi, true, da);
          }
          if (gin[1]) {
            T* db = gin[1]->data() + i * K * N;
            if (!trans_b) kernels::gemm(K, N, M, ai, !trans_a, gi, false, db);
            else kernels::gemm(N, K, M, gi, true, ai, trans_a, db);
          }
        }
      });
}

/// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis) {
  const std::size_t ax = detail::normalize_axis("softmax", axis, x.rank());
  const auto [outer, n, inner] = kernels::axis_split(x.shape(), ax);
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      T denom = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= denom;
    }
  }
  return detail::record<T>(
      "softmax", x.shape(), std::move(out), {x},
      [outer, n, inner](const std::vector<T>& y, std::span<const T> g,
                        std::span<std::vector<T>* const> gin) {
        auto& dx = *gin[0];
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            T dot = T(0);
            for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t idx = base + k * inner;
              dx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " +
                     to_string(shape));
  }
  return detail::record<T>("reshape", std::move(shape), x.values(), {x},
                           [](const std::vector<T>&, std::span<const T> g,
                              std::span<std::vector<T>* const> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           });
}

namespace kernels {

/// For each output flat index, the source flat index under `perm`.
inline std::vector<std::size_t> permutation_gather(const Shape& in_shape,
                                                   const std::vector<std::size_t>& perm) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t total = numel_of(in_shape);
  std::vector<std::size_t> gather(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    gather[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return gather;
}

}  // namespace kernels

/// Reorders axes: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted.size() != rank || sorted[i] != i) {
      throw ShapeError("permute: invalid permutation for rank " + std::to_string(rank));
    }
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  auto gather = std::make_shared<std::vector<std::size_t>>(
      kernels::permutation_gather(x.shape(), perm));
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*gather)[i]];
  return detail::record<T>("permute", std::move(out_shape), std::move(out), {x},
                           [gather](const std::vector<T>&, std::span<const T> g,
                                    std::span<std::vector<T>* const> gin) {
                             auto& dx = *gin[0];
                             for (std::size_t i = 0; i < g.size(); ++i) dx[(*gather)[i]] += g[i];
                           });
}

/// Stacks tensors along `axis` in argument order.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const std::size_t ax = detail::normalize_axis("concat", axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < x.rank(); ++d) {
      if (d != ax && x.dim(d) != xs[0].dim(d)) {
        throw ShapeError("concat: extent mismatch " + to_string(xs[0].shape()) + " vs " +
                         to_string(x.shape()));
      }
    }
    out_shape[ax] += x.dim(ax);
  }
  const auto [outer, total_axis, inner] = kernels::axis_split(out_shape, ax);
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> chunk(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) chunk[i] = xs[i].dim(ax) * inner;
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto& src = xs[i].values();
      std::copy_n(src.begin() + o * chunk[i], chunk[i], out.begin() + pos);
      pos += chunk[i];
    }
  }
  return detail::record<T>("concat", std::move(out_shape), std::move(out), xs,
                           [outer = outer, chunk](const std::vector<T>&, std::span<const T> g,
                                                  std::span<std::vector<T>* const> gin) {
                             std::size_t p = 0;
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t i = 0; i < chunk.size(); ++i) {
                                 if (gin[i]) {
                                   T* dst = gin[i]->data() + o * chunk[i];
                                   for (std::size_t k = 0; k < chunk[i]; ++k) dst[k] += g[p + k];
                                 }
                                 p += chunk[i];
                               }
                             }
                           });
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis("slice", axis, x.rank());
  if (begin >= end || end > x.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(x.dim(ax)));
  }
  const auto [outer, n, inner] = kernels::axis_split(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = (end - begin) * inner;
  std::vector<T> out(outer * len);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.values().begin() + (o * n + begin) * inner, len, out.begin() + o * len);
  }
  return detail::record<T>("slice", std::move(out_shape), std::move(out), {x},
                           [outer = outer, n = n, inner = inner, begin, len](
                               const std::vector<T>&, std::span<const T> g,
                               std::span<std::vector<T>* const> gin) {
                             for (std::size_t o = 0; o < outer; ++o) {
                               T* dst = gin[0]->data() + (o * n + begin) * inner;
                               for (std::size_t k = 0; k < len; ++k) dst[k] += g[o * len + k];
                             }
                           });
}

/// Mirrors the last axis (horizontal flip for N×C×H×W maps).
template <typename T>
Tensor<T> flip_last(const Tensor<T>& x) {
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * w + (w - 1 - j)];
  return detail::record<T>("flip", x.shape(), std::move(out), {x},
                           [rows, w](const std::vector<T>&, std::span<const T> g,
                                     std::span<std::vector<T>* const> gin) {
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < w; ++j)
                                 (*gin[0])[r * w + (w - 1 - j)] += g[r * w + j];
                           });
}

}  // namespace hdbf
