#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hdbformer/layers.hpp"

namespace hdbf {

/// Query grid side after pooling.
inline constexpr std::size_t kPooledQuerySide = 6;

struct MiimConfig {
  int iterations = 2;
  bool enable_gfa1 = true;   // RGB-primary global fusion
  bool enable_lfa1 = true;   // RGB-primary local fusion
  bool enable_gfa2 = false;  // depth-primary global fusion
  bool enable_lfa2 = true;   // depth-primary local fusion
  bool pooling_enabled = true;
  bool q_concat_enabled = true;
  std::size_t heads = 1;
  std::size_t kernel = 7;

  int branch_count() const {
    return int(enable_gfa1) + int(enable_lfa1) + int(enable_gfa2) + int(enable_lfa2);
  }

  void validate() const {
    if (iterations < 1) throw ConfigError("MIIM iterations must be at least 1");
    if (branch_count() == 0) throw ConfigError("MIIM needs at least one enabled GFA/LFA branch");
    if (kernel % 2 == 0) throw ConfigError("MIIM LFA kernel must be odd");
    if (heads == 0) throw ConfigError("MIIM heads must be positive");
  }

  /// Label in Table-3 notation, e.g. "GFA1+LFA1+LFA2".
  std::string flags_label() const {
    std::string s;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!s.empty()) s += '+';
      s += n;
    };
    add(enable_gfa1, "GFA1");
    add(enable_lfa1, "LFA1");
    add(enable_gfa2, "GFA2");
    add(enable_lfa2, "LFA2");
    return s;
  }
};

/// Global fusion attention with pooled queries. K and V come from the
/// primary map; Q from the pooled concatenation of primary and minor.
template <typename T>
class Gfa {
 public:
  Gfa() = default;
  Gfa(ParamStore<T>& ps, const std::string& prefix, std::size_t channels, std::size_t heads,
      bool q_concat)
      : channels_(channels), heads_(heads), q_concat_(q_concat) {
    if (channels % heads != 0) {
      throw ConfigError("GFA: " + std::to_string(channels) + " channels not divisible by " +
                        std::to_string(heads) + " heads");
    }
    q_ = LinearLayer<T>(ps, prefix + ".q", q_concat ? 2 * channels : channels, channels);
    k_ = LinearLayer<T>(ps, prefix + ".k", channels, channels);
    v_ = LinearLayer<T>(ps, prefix + ".v", channels, channels);
  }

  Tensor<T> operator()(const Tensor<T>& main, const Tensor<T>& minor, bool pooling,
                       std::vector<Tensor<T>>* attention_capture = nullptr) const {
    detail::require_same_shape("gfa", main, minor);
    detail::require_rank("gfa", main.shape(), 4);
    const std::size_t N = main.dim(0), C = main.dim(1), h = main.dim(2), w = main.dim(3);
    if (C != channels_) {
      throw ShapeError("gfa: expected " + std::to_string(channels_) + " channels, got " +
                       to_string(main.shape()));
    }
    const std::size_t d = C / heads_;

    Tensor<T> q_in = q_concat_ ? concat<T>({main, minor}, 1) : main;
    if (pooling) q_in = adaptive_avgpool(q_in, kPooledQuerySide, kPooledQuerySide);
    const std::size_t qh = q_in.dim(2), qw = q_in.dim(3);

    // Channel-major token matrices: (N·heads)×d×tokens.
    const Tensor<T> q = reshape(q_.on_map(q_in), {N * heads_, d, qh * qw});
    const Tensor<T> k = reshape(k_.on_map(main), {N * heads_, d, h * w});
    const Tensor<T> v = reshape(v_.on_map(main), {N * heads_, d, h * w});

    Tensor<T> scores = scale(bmm(q, k, true, false), T(1) / std::sqrt(static_cast<T>(d)));
    Tensor<T> attn = softmax(scores, -1);  // (N·heads)×q_tokens×hw
    if (attention_capture) attention_capture->push_back(attn);
    Tensor<T> out = reshape(bmm(v, attn, false, true), {N, C, qh, qw});
    return pooling ? bilinear_resize(out, h, w) : out;
  }

 private:
  std::size_t channels_ = 0, heads_ = 1;
  bool q_concat_ = true;
  LinearLayer<T> q_, k_, v_;
};

/// Local fusion attention: Linear(main) ⊙ Linear(Conv_k×k(Linear(minor))).
template <typename T>
class Lfa {
 public:
  Lfa() = default;
  Lfa(ParamStore<T>& ps, const std::string& prefix, std::size_t channels, std::size_t kernel) {
    main_ = LinearLayer<T>(ps, prefix + ".main", channels, channels);
    minor_in_ = LinearLayer<T>(ps, prefix + ".minor_in", channels, channels);
    conv_ = Conv2dLayer<T>(ps, prefix + ".conv", channels, channels, kernel, 1, kernel / 2);
    minor_out_ = LinearLayer<T>(ps, prefix + ".minor_out", channels, channels);
  }

  Tensor<T> operator()(const Tensor<T>& main, const Tensor<T>& minor) const {
    detail::require_same_shape("lfa", main, minor);
    return mul(main_.on_map(main), minor_out_.on_map(conv_(minor_in_.on_map(minor))));
  }

  const LinearLayer<T>& main_linear() const { return main_; }
  const LinearLayer<T>& minor_in() const { return minor_in_; }
  const Conv2dLayer<T>& conv() const { return conv_; }
  const LinearLayer<T>& minor_out() const { return minor_out_; }

 private:
  LinearLayer<T> main_, minor_in_, minor_out_;
  Conv2dLayer<T> conv_;
};

template <typename T>
struct FusedPair {
  Tensor<T> f_rgb;
  Tensor<T> f_depth;
};

/// One interaction block. Enabled branch outputs are concatenated in the
/// fixed order (GFA-R, LFA-R, GFA-D, LFA-D); two independent projections map
/// the same concatenation back to C channels for each modality.
template <typename T>
class MiimBlock {
 public:
  MiimBlock() = default;
  MiimBlock(ParamStore<T>& ps, const std::string& prefix, std::size_t channels,
            const MiimConfig& cfg)
      : cfg_(cfg) {
    cfg.validate();
    if (cfg.enable_gfa1) gfa1_ = Gfa<T>(ps, prefix + ".gfa1", channels, cfg.heads, cfg.q_concat_enabled);
    if (cfg.enable_lfa1) lfa1_ = Lfa<T>(ps, prefix + ".lfa1", channels, cfg.kernel);
    if (cfg.enable_gfa2) gfa2_ = Gfa<T>(ps, prefix + ".gfa2", channels, cfg.heads, cfg.q_concat_enabled);
    if (cfg.enable_lfa2) lfa2_ = Lfa<T>(ps, prefix + ".lfa2", channels, cfg.kernel);
    const std::size_t width = static_cast<std::size_t>(cfg.branch_count()) * channels;
    proj_rgb_ = LinearLayer<T>(ps, prefix + ".proj_rgb", width, channels);
    proj_depth_ = LinearLayer<T>(ps, prefix + ".proj_depth", width, channels);
  }

  /// Branch features in concatenation order.
  std::vector<Tensor<T>> branches(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
    detail::require_same_shape("miim_block", f_rgb, f_depth);
    std::vector<Tensor<T>> feats;
    if (cfg_.enable_gfa1) {
      NameScope s("gfa1");
      feats.push_back(gfa1_(f_rgb, f_depth, cfg_.pooling_enabled));
    }
    if (cfg_.enable_lfa1) {
      NameScope s("lfa1");
      feats.push_back(lfa1_(f_rgb, f_depth));
    }
    if (cfg_.enable_gfa2) {
      NameScope s("gfa2");
      feats.push_back(gfa2_(f_depth, f_rgb, cfg_.pooling_enabled));
    }
    if (cfg_.enable_lfa2) {
      NameScope s("lfa2");
      feats.push_back(lfa2_(f_depth, f_rgb));
    }
    return feats;
  }

  FusedPair<T> operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
    const auto feats = branches(f_rgb, f_depth);
    const Tensor<T> cat = feats.size() == 1 ? feats[0] : concat(feats, 1);
    return {proj_rgb_.on_map(cat), proj_depth_.on_map(cat)};
  }

  const MiimConfig& config() const { return cfg_; }
  const Gfa<T>& gfa1() const { return gfa1_; }
  const Lfa<T>& lfa1() const { return lfa1_; }
  const Gfa<T>& gfa2() const { return gfa2_; }
  const Lfa<T>& lfa2() const { return lfa2_; }
  const LinearLayer<T>& proj_rgb() const { return proj_rgb_; }
  const LinearLayer<T>& proj_depth() const { return proj_depth_; }

 private:
  MiimConfig cfg_;
  Gfa<T> gfa1_, gfa2_;
  Lfa<T> lfa1_, lfa2_;
  LinearLayer<T> proj_rgb_, proj_depth_;
};

/// N interaction blocks applied in sequence, each with its own parameters.
template <typename T>
class Miim {
 public:
  Miim() = default;
  Miim(ParamStore<T>& ps, const std::string& prefix, std::size_t channels, const MiimConfig& cfg) {
    cfg.validate();
    for (int i = 0; i < cfg.iterations; ++i)
      blocks_.emplace_back(ps, prefix + ".iter" + std::to_string(i + 1), channels, cfg);
  }

  FusedPair<T> operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
    FusedPair<T> cur{f_rgb, f_depth};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      NameScope s("iter" + std::to_string(i + 1));
      cur = blocks_[i](cur.f_rgb, cur.f_depth);
    }
    return cur;
  }

  const std::vector<MiimBlock<T>>& blocks() const { return blocks_; }

 private:
  std::vector<MiimBlock<T>> blocks_;
};

}  // namespace hdbf
