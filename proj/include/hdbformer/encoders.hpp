#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hdbformer/layers.hpp"

namespace hdbf {

enum class DepthEncoderKind { ldformer, ordinary_conv };

inline const char* depth_encoder_name(DepthEncoderKind k) {
  return k == DepthEncoderKind::ldformer ? "ldformer" : "ordinary_conv";
}

/// Parameter-name prefix of the depth branch in the store.
inline const char* depth_branch_prefix(DepthEncoderKind k) {
  return k == DepthEncoderKind::ldformer ? "ldformer" : "depthconv";
}

struct EncoderConfig {
  std::size_t base_channels = 32;
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  DepthEncoderKind depth_encoder_kind = DepthEncoderKind::ldformer;
  bool base_branch_enabled = true;
  std::size_t detail_window = 4;
  std::size_t detail_heads = 2;

  void validate() const {
    if (base_channels < 2 || base_channels % 2 != 0) {
      throw ConfigError("base_channels must be a positive even number, got " +
                        std::to_string(base_channels));
    }
    if (base_channels % detail_heads != 0) {
      throw ConfigError("base_channels must be divisible by the detail head count");
    }
    check_input(input_h, input_w);
    if (detail_window == 0) throw ConfigError("detail_window must be positive");
  }

  static void check_input(std::size_t h, std::size_t w) {
    if (h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0) {
      throw ConfigError("input extents must be positive multiples of 32, got " +
                        std::to_string(h) + "x" + std::to_string(w));
    }
  }

  /// Channel width of stage i (1-based): C·2^(i−1).
  std::size_t stage_channels(int stage) const { return base_channels << (stage - 1); }

  /// Window used by the detail stage that consumes an h×w map. Clamped to a
  /// divisor of both extents so every stage of every valid input tiles.
  std::size_t effective_window(std::size_t h, std::size_t w) const {
    return std::gcd(detail_window, std::gcd(h, w));
  }
};

/// Four stage tensors; stage i (1-based) is N×(2^(i−1)·C)×H/2^(i+1)×W/2^(i+1).
template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> stages;

  const Tensor<T>& operator[](std::size_t i) const { return stages[i]; }
  Tensor<T>& operator[](std::size_t i) { return stages[i]; }

  /// Throws ShapeError unless the pyramid matches the stage contract.
  void check_contract(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    for (std::size_t i = 0; i < 4; ++i) {
      const Shape want{n, c << i, h >> (i + 2), w >> (i + 2)};
      if (!stages[i].defined() || stages[i].shape() != want) {
        throw ShapeError("pyramid stage " + std::to_string(i + 1) + " has shape " +
                         (stages[i].defined() ? to_string(stages[i].shape()) : "<missing>") +
                         ", expected " + to_string(want));
      }
    }
  }
};

/// Input stem: two stride-2 3×3 convolutions (ch→C/2→C), each followed by a
/// per-pixel layernorm over channels. H×W → H/4×W/4.
template <typename T>
class Stem {
 public:
  Stem() = default;
  Stem(ParamStore<T>& ps, const std::string& prefix, std::size_t in_channels,
       std::size_t out_channels)
      : in_channels_(in_channels) {
    if (in_channels != 1 && in_channels != 3) {
      throw ConfigError("stem expects 1 or 3 input channels, got " + std::to_string(in_channels));
    }
    const std::size_t mid = out_channels / 2;
    conv1_ = Conv2dLayer<T>(ps, prefix + ".conv1", in_channels, mid, 3, 2, 1, 0);
    norm1_ = LayerNormLayer<T>(ps, prefix + ".norm1", mid);
    conv2_ = Conv2dLayer<T>(ps, prefix + ".conv2", mid, out_channels, 3, 2, 1, 0);
    norm2_ = LayerNormLayer<T>(ps, prefix + ".norm2", out_channels);
  }

  Tensor<T> operator()(const Tensor<T>& img) const {
    if (img.rank() != 4 || img.dim(1) != in_channels_) {
      throw ShapeError("stem: expected N×" + std::to_string(in_channels_) + "×H×W, got " +
                       to_string(img.shape()));
    }
    if (img.dim(2) % 4 || img.dim(3) % 4) {
      throw ShapeError("stem: extents of " + to_string(img.shape()) + " not divisible by 4");
    }
    return norm2_(conv2_(norm1_(conv1_(img), 1)), 1);
  }

  /// Output of the second convolution before normalization.
  Tensor<T> pre_norm(const Tensor<T>& img) const { return conv2_(norm1_(conv1_(img), 1)); }

 private:
  std::size_t in_channels_ = 3;
  Conv2dLayer<T> conv1_, conv2_;
  LayerNormLayer<T> norm1_, norm2_;
};

namespace detail {

inline void require_even_extents(const char* op, const Shape& s) {
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) {
    throw ShapeError(std::string(op) + ": needs even spatial extents, got " + to_string(s));
  }
}

}  // namespace detail

/// Shallow RGB stage: MaxPool(Conv1×1(Conv3×3(F))). The 1×1 doubles channels.
/// Also serves as the ordinary-convolution depth stage.
template <typename T>
class BaseStage {
 public:
  BaseStage() = default;
  BaseStage(ParamStore<T>& ps, const std::string& prefix, std::size_t channels) {
    conv3_ = Conv2dLayer<T>(ps, prefix + ".conv3x3", channels, channels, 3, 1, 1);
    conv1_ = Conv2dLayer<T>(ps, prefix + ".conv1x1", channels, 2 * channels, 1);
  }

  Tensor<T> operator()(const Tensor<T>& f) const {
    detail::require_even_extents("base_stage", f.shape());
    return maxpool2(conv1_(conv3_(f)));
  }

  const Conv2dLayer<T>& conv3x3() const { return conv3_; }
  const Conv2dLayer<T>& conv1x1() const { return conv1_; }

 private:
  Conv2dLayer<T> conv3_, conv1_;
};

/// LDFormer stage: MaxPool(PWConv1×1(DWConv3×3(F))).
template <typename T>
class LdformerStage {
 public:
  LdformerStage() = default;
  LdformerStage(ParamStore<T>& ps, const std::string& prefix, std::size_t channels) {
    dw_ = DepthwiseLayer<T>(ps, prefix + ".dw", channels, 3);
    pw_ = Conv2dLayer<T>(ps, prefix + ".pw", channels, 2 * channels, 1);
  }

  Tensor<T> operator()(const Tensor<T>& f) const {
    detail::require_even_extents("ldformer_stage", f.shape());
    return maxpool2(pointwise_conv2d(dw_(f), pw_.weight, pw_.bias));
  }

  const DepthwiseLayer<T>& depthwise() const { return dw_; }
  const Conv2dLayer<T>& pointwise() const { return pw_; }

 private:
  DepthwiseLayer<T> dw_;
  Conv2dLayer<T> pw_;
};

/// Windowed self-attention stand-in for the deep RGB encoder stage:
/// pre-norm window attention with residual, pre-norm GELU MLP (2× hidden)
/// with residual, then 2×2 patch merging to 2C channels at half resolution.
template <typename T>
class DetailStage {
 public:
  struct Options {
    bool attention_enabled = true;            // test hook: skip the attention sublayer
    std::vector<Tensor<T>>* attention_capture = nullptr;  // receives softmax maps
  };

  DetailStage() = default;
  DetailStage(ParamStore<T>& ps, const std::string& prefix, std::size_t channels,
              std::size_t heads = 2)
      : channels_(channels), heads_(heads) {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError("detail stage: " + std::to_string(channels) +
                        " channels not divisible into " + std::to_string(heads) + " heads");
    }
    norm1_ = LayerNormLayer<T>(ps, prefix + ".norm1", channels);
    qkv_ = LinearLayer<T>(ps, prefix + ".attn.qkv", channels, 3 * channels);
    proj_ = LinearLayer<T>(ps, prefix + ".attn.proj", channels, channels);
    norm2_ = LayerNormLayer<T>(ps, prefix + ".norm2", channels);
    fc1_ = LinearLayer<T>(ps, prefix + ".mlp.fc1", channels, 2 * channels);
    fc2_ = LinearLayer<T>(ps, prefix + ".mlp.fc2", 2 * channels, channels);
    merge_norm_ = LayerNormLayer<T>(ps, prefix + ".merge.norm", 4 * channels);
    reduction_ = LinearLayer<T>(ps, prefix + ".merge.reduction", 4 * channels, 2 * channels);
  }

  Tensor<T> operator()(const Tensor<T>& f, std::size_t window) const {
    return forward(f, window, Options{});
  }

  Tensor<T> forward(const Tensor<T>& f, std::size_t window, const Options& opt) const {
    detail::require_rank("detail_stage", f.shape(), 4);
    const std::size_t N = f.dim(0), C = f.dim(1), h = f.dim(2), w = f.dim(3);
    if (C != channels_) {
      throw ShapeError("detail_stage: expected " + std::to_string(channels_) +
                       " channels, got " + to_string(f.shape()));
    }
    if (window == 0 || h % window || w % window) {
      throw ConfigError("detail_stage: window " + std::to_string(window) + " does not tile " +
                        std::to_string(h) + "x" + std::to_string(w));
    }
    detail::require_even_extents("detail_stage", f.shape());

    Tensor<T> x = permute(f, {0, 2, 3, 1});  // N×h×w×C
    if (opt.attention_enabled) {
      x = add(x, window_attention(norm1_(x), window, opt.attention_capture));
    }
    x = add(x, mlp(x));
    return merge(x);
  }

  /// Pre-norm MLP branch on N×h×w×C tokens (without the residual).
  Tensor<T> mlp(const Tensor<T>& x) const { return fc2_(gelu(fc1_(norm2_(x)))); }

  /// 2×2 patch merge of N×h×w×C tokens into an N×2C×h/2×w/2 map.
  Tensor<T> merge(const Tensor<T>& x) const {
    const std::size_t N = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
    Tensor<T> m = reshape(x, {N, h / 2, 2, w / 2, 2, C});
    m = permute(m, {0, 1, 3, 4, 2, 5});
    m = reshape(m, {N, h / 2, w / 2, 4 * C});
    m = reduction_(merge_norm_(m));
    return permute(m, {0, 3, 1, 2});
  }

 private:
  Tensor<T> window_attention(const Tensor<T>& y, std::size_t ws,
                             std::vector<Tensor<T>>* capture) const {
    const std::size_t N = y.dim(0), h = y.dim(1), w = y.dim(2), C = y.dim(3);
    const std::size_t nh = h / ws, nw = w / ws, L = ws * ws;
    const std::size_t B = N * nh * nw, d = C / heads_;

    Tensor<T> win = reshape(y, {N, nh, ws, nw, ws, C});
    win = permute(win, {0, 1, 3, 2, 4, 5});
    win = reshape(win, {B, L, C});

    Tensor<T> qkv = reshape(qkv_(win), {B, L, 3, heads_, d});
    qkv = permute(qkv, {2, 0, 3, 1, 4});  // 3×B×heads×L×d
    auto part = [&](std::size_t i) {
      return reshape(slice(qkv, 0, i, i + 1), {B * heads_, L, d});
    };
    const Tensor<T> q = part(0), k = part(1), v = part(2);

    Tensor<T> attn = softmax(scale(bmm(q, k, false, true), T(1) / std::sqrt(static_cast<T>(d))), -1);
    if (capture) capture->push_back(attn);
    Tensor<T> out = reshape(bmm(attn, v), {B, heads_, L, d});
    out = reshape(permute(out, {0, 2, 1, 3}), {B, L, C});
    out = proj_(out);

    out = reshape(out, {N, nh, nw, ws, ws, C});
    out = permute(out, {0, 1, 3, 2, 4, 5});
    return reshape(out, {N, h, w, C});
  }

  std::size_t channels_ = 0, heads_ = 2;
  LayerNormLayer<T> norm1_, norm2_, merge_norm_;
  LinearLayer<T> qkv_, proj_, fc1_, fc2_, reduction_;
};

/// Base/detail RGB fusion: Conv1×1(Concat(F_detail ⊕ F_base, F_detail ⊗ F_base)).
template <typename T>
class RgbFuse {
 public:
  RgbFuse() = default;
  RgbFuse(ParamStore<T>& ps, const std::string& prefix, std::size_t channels) {
    conv_ = Conv2dLayer<T>(ps, prefix + ".conv", 2 * channels, channels, 1);
  }

  Tensor<T> operator()(const Tensor<T>& f_detail, const Tensor<T>& f_base) const {
    detail::require_same_shape("rgb_fuse", f_detail, f_base);
    return conv_(concat<T>({add(f_detail, f_base), mul(f_detail, f_base)}, 1));
  }

  const Conv2dLayer<T>& conv() const { return conv_; }

 private:
  Conv2dLayer<T> conv_;
};

template <typename T>
struct EncodedFeatures {
  FeaturePyramid<T> rgb;
  FeaturePyramid<T> depth;
  FeaturePyramid<T> detail;
  std::optional<FeaturePyramid<T>> base;  // absent when the base branch is disabled
};

/// Three-branch encoder: base and detail RGB streams fused per stage, plus
/// the depth stream (LDFormer or ordinary convolution).
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, ParamStore<T>& ps) : cfg_(cfg) {
    cfg.validate();
    const std::size_t C = cfg.base_channels;
    if (cfg.base_branch_enabled) {
      base_stem_ = Stem<T>(ps, "base.stem", 3, C);
      for (int i = 1; i <= 3; ++i)
        base_stages_[i - 1] = BaseStage<T>(ps, "base.stage" + std::to_string(i + 1),
                                           cfg.stage_channels(i));
    }
    detail_stem_ = Stem<T>(ps, "detail.stem", 3, C);
    for (int i = 1; i <= 3; ++i)
      detail_stages_[i - 1] = DetailStage<T>(ps, "detail.stage" + std::to_string(i + 1),
                                             cfg.stage_channels(i), cfg.detail_heads);
    const std::string dp = depth_branch_prefix(cfg.depth_encoder_kind);
    depth_stem_ = Stem<T>(ps, dp + ".stem", 1, C);
    for (int i = 1; i <= 3; ++i) {
      const std::string name = dp + ".stage" + std::to_string(i + 1);
      if (cfg.depth_encoder_kind == DepthEncoderKind::ldformer)
        ld_stages_[i - 1] = LdformerStage<T>(ps, name, cfg.stage_channels(i));
      else
        conv_stages_[i - 1] = BaseStage<T>(ps, name, cfg.stage_channels(i));
    }
    if (cfg.base_branch_enabled) {
      for (int i = 1; i <= 4; ++i)
        fuse_[i - 1] = RgbFuse<T>(ps, "base.fuse" + std::to_string(i), cfg.stage_channels(i));
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  EncodedFeatures<T> encode(const Tensor<T>& rgb, const Tensor<T>& depth) const {
    if (rgb.rank() != 4 || depth.rank() != 4 || rgb.dim(1) != 3 || depth.dim(1) != 1 ||
        rgb.dim(0) != depth.dim(0) || rgb.dim(2) != depth.dim(2) || rgb.dim(3) != depth.dim(3)) {
      throw ShapeError("encode: expected N×3×H×W rgb and N×1×H×W depth, got " +
                       to_string(rgb.shape()) + " and " + to_string(depth.shape()));
    }
    const std::size_t H = rgb.dim(2), W = rgb.dim(3);
    if (H % 32 || W % 32) {
      throw ShapeError("encode: input extents " + std::to_string(H) + "x" + std::to_string(W) +
                       " are not multiples of 32");
    }
    EncodedFeatures<T> out;
    {
      NameScope scope("detail");
      out.detail[0] = detail_stem_(rgb);
      for (int i = 0; i < 3; ++i) {
        const auto& f = out.detail[i];
        out.detail[i + 1] = detail_stages_[i](f, cfg_.effective_window(f.dim(2), f.dim(3)));
      }
    }
    if (cfg_.base_branch_enabled) {
      NameScope scope("base");
      FeaturePyramid<T> base;
      base[0] = base_stem_(rgb);
      for (int i = 0; i < 3; ++i) base[i + 1] = base_stages_[i](base[i]);
      for (int i = 0; i < 4; ++i) out.rgb[i] = fuse_[i](out.detail[i], base[i]);
      out.base = std::move(base);
    } else {
      out.rgb = out.detail;
    }
    {
      NameScope scope(depth_branch_prefix(cfg_.depth_encoder_kind));
      out.depth[0] = depth_stem_(depth);
      for (int i = 0; i < 3; ++i) {
        out.depth[i + 1] = cfg_.depth_encoder_kind == DepthEncoderKind::ldformer
                               ? ld_stages_[i](out.depth[i])
                               : conv_stages_[i](out.depth[i]);
      }
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  Stem<T> base_stem_, detail_stem_, depth_stem_;
  std::array<BaseStage<T>, 3> base_stages_;
  std::array<DetailStage<T>, 3> detail_stages_;
  std::array<LdformerStage<T>, 3> ld_stages_;
  std::array<BaseStage<T>, 3> conv_stages_;
  std::array<RgbFuse<T>, 4> fuse_;
};

}  // namespace hdbf
