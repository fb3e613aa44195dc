#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdbformer/encoders.hpp"
#include "hdbformer/metrics.hpp"
#include "hdbformer/miim.hpp"

namespace hdbf {

enum class FusionKind { miim, naive_add_mul };

inline const char* fusion_kind_name(FusionKind k) {
  return k == FusionKind::miim ? "miim" : "naive_add_mul";
}

struct ModelConfig {
  EncoderConfig encoder;
  MiimConfig miim;
  std::size_t num_classes = 5;
  FusionKind fusion_kind = FusionKind::miim;

  void validate() const {
    encoder.validate();
    if (fusion_kind == FusionKind::miim) miim.validate();
    if (num_classes < 2 || num_classes >= kIgnoreLabel) {
      throw ConfigError("num_classes must be in [2, 254], got " + std::to_string(num_classes));
    }
  }

  /// Channels entering the classifier: C+2C+4C+8C, plus 8C for the base branch.
  std::size_t decoder_channels() const {
    const std::size_t C = encoder.base_channels;
    return 15 * C + (encoder.base_branch_enabled ? 8 * C : 0);
  }
};

/// Multi-level head: every input is bilinearly resized to the first input's
/// resolution, concatenated along channels, and mapped to class logits.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore<T>& ps, const std::string& prefix, std::size_t in_channels,
          std::size_t num_classes)
      : in_channels_(in_channels) {
    classifier_ = Conv2dLayer<T>(ps, prefix + ".classifier", in_channels, num_classes, 1);
  }

  Tensor<T> operator()(const std::vector<Tensor<T>>& feats) const {
    if (feats.empty()) throw ContractError("decoder: no input features");
    for (std::size_t i = 0; i < feats.size(); ++i) {
      if (!feats[i].defined()) {
        throw ContractError("decoder: input " + std::to_string(i + 1) + " is missing");
      }
    }
    const std::size_t h = feats[0].dim(2), w = feats[0].dim(3);
    std::vector<Tensor<T>> up;
    up.reserve(feats.size());
    std::size_t channels = 0;
    for (const auto& f : feats) {
      up.push_back(bilinear_resize(f, h, w));
      channels += f.dim(1);
    }
    if (channels != in_channels_) {
      throw ContractError("decoder: got " + std::to_string(channels) + " channels, expected " +
                          std::to_string(in_channels_));
    }
    return classifier_(concat(up, 1));
  }

  const Conv2dLayer<T>& classifier() const { return classifier_; }

 private:
  std::size_t in_channels_ = 0;
  Conv2dLayer<T> classifier_;
};

template <typename T>
struct SegOutput {
  Tensor<T> logits;  // N×K×H/4×W/4
  LabelMap pred;     // N×H×W
};

/// Per-pixel argmax over the class axis of an N×K×H×W tensor; ties go to the
/// lower class index.
template <typename T>
LabelMap argmax_classes(const Tensor<T>& scores) {
  detail::require_rank("argmax", scores.shape(), 4);
  const std::size_t N = scores.dim(0), K = scores.dim(1), H = scores.dim(2), W = scores.dim(3);
  const std::size_t P = H * W;
  LabelMap out(N, H, W);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = n * K * P + p;
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (scores[base + k * P] > scores[base + best * P]) best = k;
      out.data[n * P + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

/// Intermediate tensors of one forward pass.
template <typename T>
struct ForwardTrace {
  EncodedFeatures<T> encoded;
  std::array<FusedPair<T>, 4> fused;
  Tensor<T> logits;
};

/// Full segmentation network: three-branch encoder, per-stage fusion, and
/// the multi-level decoder. Owns its parameter store.
template <typename T = float>
class HdbFormer {
 public:
  using Storage = typename ParamStore<T>::Storage;

  explicit HdbFormer(const ModelConfig& cfg, std::uint64_t seed = 0,
                     Storage storage = Storage::allocate)
      : cfg_((cfg.validate(), cfg)),
        ps_(std::make_unique<ParamStore<T>>(seed, storage)),
        encoder_(cfg.encoder, *ps_) {
    if (cfg.fusion_kind == FusionKind::miim) {
      for (int s = 1; s <= 4; ++s)
        miim_[s - 1] = Miim<T>(*ps_, "miim.stage" + std::to_string(s),
                               cfg.encoder.stage_channels(s), cfg.miim);
    }
    decoder_ = Decoder<T>(*ps_, "decoder", cfg.decoder_channels(), cfg.num_classes);
  }

  HdbFormer(const HdbFormer&) = delete;
  HdbFormer& operator=(const HdbFormer&) = delete;
  HdbFormer(HdbFormer&&) = default;
  HdbFormer& operator=(HdbFormer&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return *ps_; }
  const ParamStore<T>& params() const { return *ps_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Miim<T>& miim(std::size_t stage) const { return miim_.at(stage); }
  const Decoder<T>& decoder() const { return decoder_; }

  /// Fusion of one pyramid level (0-based stage index).
  FusedPair<T> fuse(std::size_t stage, const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
    if (cfg_.fusion_kind == FusionKind::naive_add_mul) return {add(f_rgb, f_depth), f_depth};
    return miim_.at(stage)(f_rgb, f_depth);
  }

  ForwardTrace<T> trace(const Tensor<T>& rgb, const Tensor<T>& depth) const {
    ForwardTrace<T> t;
    t.encoded = encoder_.encode(rgb, depth);
    for (std::size_t s = 0; s < 4; ++s) {
      NameScope scope("miim.stage" + std::to_string(s + 1));
      t.fused[s] = fuse(s, t.encoded.rgb[s], t.encoded.depth[s]);
    }
    std::vector<Tensor<T>> feats;
    for (const auto& f : t.fused) feats.push_back(f.f_rgb);
    if (t.encoded.base) feats.push_back((*t.encoded.base)[3]);
    NameScope scope("decoder");
    t.logits = decoder_(feats);
    return t;
  }

  /// Class logits at H/4×W/4.
  Tensor<T> logits(const Tensor<T>& rgb, const Tensor<T>& depth) const {
    return trace(rgb, depth).logits;
  }

  SegOutput<T> forward(const Tensor<T>& rgb, const Tensor<T>& depth) const {
    SegOutput<T> out;
    out.logits = logits(rgb, depth);
    NoGradGuard no_grad;
    out.pred = argmax_classes(bilinear_resize(out.logits, rgb.dim(2), rgb.dim(3)));
    return out;
  }

  /// Mean cross-entropy at logit resolution; labels are nearest-downsampled.
  Tensor<T> loss(const Tensor<T>& rgb, const Tensor<T>& depth, const LabelMap& labels) const {
    const Tensor<T> z = logits(rgb, depth);
    return loss_from_logits(z, labels);
  }

  static Tensor<T> loss_from_logits(const Tensor<T>& z, const LabelMap& labels) {
    if (labels.n != z.dim(0)) {
      throw ShapeError("loss: " + std::to_string(labels.n) + " label maps for logits " +
                       to_string(z.shape()));
    }
    const LabelMap small = resize_labels_nearest(labels, z.dim(2), z.dim(3));
    return cross_entropy(z, std::span<const std::uint8_t>(small.data));
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore<T>> ps_;
  Encoder<T> encoder_;
  std::array<Miim<T>, 4> miim_;
  Decoder<T> decoder_;
};

/// Scaled extent rounded to the nearest multiple of 32, at least 32.
inline std::size_t scaled_extent(std::size_t extent, double scale) {
  const double s = std::round(static_cast<double>(extent) * scale / 32.0);
  return static_cast<std::size_t>(std::max(1.0, s)) * 32;
}

inline const std::vector<double>& default_msflip_scales() {
  static const std::vector<double> s{0.5, 0.75, 1.0, 1.25, 1.5};
  return s;
}

struct MsFlipOptions {
  std::vector<double> scales = default_msflip_scales();
  bool flip = true;
};

template <typename T>
struct MsFlipResult {
  Tensor<T> probs;  // N×K×H×W, averaged class probabilities
  LabelMap pred;
};

/// Multi-scale flip inference. Every (scale, flip) view is evaluated, mapped
/// back to input resolution as class probabilities, and averaged in sorted
/// view order so the result does not depend on the order of `scales`.
template <typename T>
MsFlipResult<T> msflip_infer(const HdbFormer<T>& model, const Tensor<T>& rgb,
                             const Tensor<T>& depth, const MsFlipOptions& opt = {}) {
  if (opt.scales.empty()) throw ConfigError("msflip: empty scale list");
  NoGradGuard no_grad;
  const std::size_t H = rgb.dim(2), W = rgb.dim(3);
  std::vector<double> scales = opt.scales;
  std::sort(scales.begin(), scales.end());
  scales.erase(std::unique(scales.begin(), scales.end()), scales.end());

  std::vector<T> acc;
  std::size_t views = 0;
  Tensor<T> last_upsampled;
  for (double s : scales) {
    if (!(s > 0)) throw ConfigError("msflip: scales must be positive");
    const std::size_t h = scaled_extent(H, s), w = scaled_extent(W, s);
    const Tensor<T> r = bilinear_resize(rgb, h, w);
    const Tensor<T> d = bilinear_resize(depth, h, w);
    for (int f = 0; f < (opt.flip ? 2 : 1); ++f) {
      Tensor<T> z = f ? flip_last(model.logits(flip_last(r), flip_last(d))) : model.logits(r, d);
      last_upsampled = bilinear_resize(z, H, W);
      const Tensor<T> p = softmax(last_upsampled, 1);
      if (acc.empty()) acc.assign(p.numel(), T(0));
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
      ++views;
    }
  }
  const T inv = T(1) / static_cast<T>(views);
  for (auto& v : acc) v *= inv;
  MsFlipResult<T> out;
  out.probs = Tensor<T>({rgb.dim(0), model.config().num_classes, H, W}, std::move(acc));
  // A single view ranks classes by its logits, as plain forward does; the
  // softmax can round distinct logits to equal probabilities.
  out.pred = argmax_classes(views == 1 ? last_upsampled : out.probs);
  return out;
}

}  // namespace hdbf
