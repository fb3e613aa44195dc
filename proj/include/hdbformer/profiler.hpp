#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hdbformer/segmodel.hpp"

namespace hdbf {

/// Bytes per activation element in the memory model.
inline constexpr std::uint64_t kActivationBytes = 4;

/// Symbolic forward graph carrying per-op parameter, FLOP, and activation
/// sizes. Ops are recorded in execution order; reshape/permute are views
/// and allocate nothing.
class CostGraph {
 public:
  struct Value {
    std::size_t id = 0;
    Shape shape;
    std::uint64_t numel() const { return numel_of(shape); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
  };

  struct Op {
    std::string module;
    LayerKind kind;
    std::vector<std::size_t> inputs;  // storage ids
    std::size_t output = 0;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
    bool attention = false;           // output is an attention probability map
  };

  void set_module(std::string m) { module_ = std::move(m); }
  const std::string& module() const { return module_; }

  Value input(Shape shape) {
    const std::size_t id = new_storage(numel_of(shape), true);
    return {id, std::move(shape)};
  }

  /// Keeps a value live until the end of the schedule.
  void mark_output(const Value& v) { outputs_.push_back(v.id); }

  Value view(const Value& x, Shape shape) const {
    if (numel_of(shape) != x.numel()) throw ShapeError("cost graph: bad view " + to_string(shape));
    return {x.id, std::move(shape)};
  }

  Value conv(const Value& x, std::size_t cout, std::size_t k, std::size_t stride = 1,
             std::size_t pad = 0, long pad_end = -1) {
    const std::size_t N = x.dim(0), cin = x.dim(1);
    const std::size_t pads = pad + (pad_end < 0 ? pad : static_cast<std::size_t>(pad_end));
    const std::size_t oh = (x.dim(2) + pads - k) / stride + 1, ow = (x.dim(3) + pads - k) / stride + 1;
    const LayerSpec spec = k == 1 && stride == 1 && pad == 0 ? LayerSpec::pointwise(cin, cout)
                                                             : LayerSpec::conv(cin, cout, k, stride, pad);
    const std::uint64_t flops = 2ull * N * oh * ow * cout * cin * k * k;
    return emit(spec.kind, {x}, {N, cout, oh, ow}, spec.param_count(), flops);
  }

  Value depthwise(const Value& x, std::size_t k) {
    const std::size_t C = x.dim(1);
    const LayerSpec spec = LayerSpec::depthwise(C, k);
    return emit(spec.kind, {x}, x.shape, spec.param_count(), 2ull * x.numel() * k * k);
  }

  /// Per-pixel linear on an N×Din×H×W map.
  Value linear_map(const Value& x, std::size_t dout) {
    const std::size_t N = x.dim(0), din = x.dim(1), P = x.dim(2) * x.dim(3);
    return emit(LayerKind::linear, {x}, {N, dout, x.dim(2), x.dim(3)},
                LayerSpec::dense(din, dout).param_count(), 2ull * N * P * din * dout);
  }

  /// Token linear on the last axis.
  Value linear(const Value& x, std::size_t dout) {
    Shape out = x.shape;
    const std::size_t din = out.back();
    out.back() = dout;
    const std::uint64_t tokens = x.numel() / din;
    return emit(LayerKind::linear, {x}, std::move(out), LayerSpec::dense(din, dout).param_count(),
                2ull * tokens * din * dout);
  }

  Value layernorm(const Value& x, std::size_t width) {
    return emit(LayerKind::layernorm, {x}, x.shape, LayerSpec::norm(width).param_count(),
                FlopConvention::layernorm * x.numel());
  }

  Value gelu(const Value& x) {
    return emit(LayerKind::gelu, {x}, x.shape, 0, FlopConvention::gelu * x.numel());
  }
  Value add(const Value& a, const Value& b) {
    return emit(LayerKind::add, {a, b}, a.shape, 0, FlopConvention::elementwise * a.numel());
  }
  Value mul(const Value& a, const Value& b) {
    return emit(LayerKind::mul, {a, b}, a.shape, 0, FlopConvention::elementwise * a.numel());
  }
  Value scale(const Value& a) {
    return emit(LayerKind::mul, {a}, a.shape, 0, FlopConvention::elementwise * a.numel());
  }
  Value softmax(const Value& x, bool attention = false) {
    Value v = emit(LayerKind::softmax, {x}, x.shape, 0, FlopConvention::softmax * x.numel());
    ops_.back().attention = attention;
    return v;
  }
  Value maxpool2(const Value& x) {
    const Shape out{x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2};
    return emit(LayerKind::maxpool2, {x}, out, 0, FlopConvention::pool * numel_of(out));
  }
  Value adaptive_avgpool(const Value& x, std::size_t oh, std::size_t ow) {
    const Shape out{x.dim(0), x.dim(1), oh, ow};
    return emit(LayerKind::adaptive_avgpool, {x}, out, 0, FlopConvention::pool * numel_of(out));
  }
  /// Same-size resizes are passthroughs and cost nothing.
  Value bilinear(const Value& x, std::size_t oh, std::size_t ow) {
    if (x.dim(2) == oh && x.dim(3) == ow) return x;
    const Shape out{x.dim(0), x.dim(1), oh, ow};
    return emit(LayerKind::bilinear_resize, {x}, out, 0, FlopConvention::bilinear * numel_of(out));
  }
  Value concat(const std::vector<Value>& xs, std::size_t axis) {
    if (xs.size() == 1) return xs[0];
    Shape out = xs[0].shape;
    out[axis] = 0;
    for (const auto& x : xs) out[axis] += x.dim(axis);
    return emit(LayerKind::concat, xs, std::move(out), 0, 0);
  }
  /// Batched product with B×M×K and B×K×N operands.
  Value bmm(const Value& a, const Value& b, std::size_t B, std::size_t M, std::size_t N,
            std::size_t K) {
    return emit(LayerKind::matmul, {a, b}, {B, M, N}, 0, 2ull * B * M * N * K);
  }

  const std::vector<Op>& ops() const { return ops_; }

  std::uint64_t storage_bytes(std::size_t id) const { return sizes_.at(id) * kActivationBytes; }

  /// Live-set simulation over the ops whose module starts with `prefix`
  /// (empty: whole graph). Values produced before the first selected op and
  /// consumed by a selected op are live from the start; values are freed
  /// once their last selected consumer ran, unless they are graph outputs or
  /// are consumed by later unselected ops.
  std::uint64_t peak_bytes(const std::string& prefix = "") const {
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < ops_.size(); ++i)
      if (in_module(ops_[i].module, prefix)) sel.push_back(i);
    if (sel.empty()) return 0;

    std::map<std::size_t, std::size_t> last_use;  // storage -> last selected op index
    std::map<std::size_t, bool> escapes;          // storage used after the selection or output
    for (std::size_t id : outputs_) escapes[id] = true;
    const std::size_t first = sel.front();
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      const bool selected = in_module(ops_[i].module, prefix);
      for (std::size_t id : ops_[i].inputs) {
        if (selected) last_use[id] = i;
        else if (i > first) escapes[id] = true;
      }
    }
    std::map<std::size_t, bool> live;
    std::uint64_t cur = 0;
    for (const auto& [id, _] : last_use) {
      if (producer_.at(id) < 0 || static_cast<std::size_t>(producer_.at(id)) < first) {
        live[id] = true;
        cur += storage_bytes(id);
      }
    }
    std::uint64_t peak = cur;
    for (std::size_t i : sel) {
      const Op& op = ops_[i];
      if (!live.count(op.output)) {
        live[op.output] = true;
        cur += storage_bytes(op.output);
      }
      peak = std::max(peak, cur);
      for (std::size_t id : op.inputs) {
        if (last_use[id] == i && !escapes[id] && live.count(id)) {
          live.erase(id);
          cur -= storage_bytes(id);
        }
      }
      if (!last_use.count(op.output) && !escapes[op.output]) {
        // Never consumed: freed as soon as it is produced.
        live.erase(op.output);
        cur -= storage_bytes(op.output);
      }
    }
    return peak;
  }

  /// Largest attention probability map, in bytes.
  std::uint64_t attention_bytes(const std::string& prefix = "") const {
    std::uint64_t m = 0;
    for (const auto& op : ops_)
      if (op.attention && in_module(op.module, prefix)) m = std::max(m, storage_bytes(op.output));
    return m;
  }

  std::uint64_t params(const std::string& prefix = "") const {
    std::uint64_t s = 0;
    for (const auto& op : ops_)
      if (in_module(op.module, prefix)) s += op.params;
    return s;
  }
  std::uint64_t flops(const std::string& prefix = "") const {
    std::uint64_t s = 0;
    for (const auto& op : ops_)
      if (in_module(op.module, prefix)) s += op.flops;
    return s;
  }
  /// FLOPs of the attention products and softmax only.
  std::uint64_t attention_flops(const std::string& prefix = "") const {
    std::uint64_t s = 0;
    for (const auto& op : ops_)
      if (in_module(op.module, prefix) &&
          (op.kind == LayerKind::matmul || (op.kind == LayerKind::softmax && op.attention)))
        s += op.flops;
    return s;
  }

  /// Distinct module paths in first-appearance order.
  std::vector<std::string> modules() const {
    std::vector<std::string> out;
    for (const auto& op : ops_)
      if (std::find(out.begin(), out.end(), op.module) == out.end()) out.push_back(op.module);
    return out;
  }

  static bool in_module(const std::string& module, const std::string& prefix) {
    if (prefix.empty() || module == prefix) return true;
    return module.size() > prefix.size() && module.compare(0, prefix.size(), prefix) == 0 &&
           module[prefix.size()] == '.';
  }

 private:
  std::size_t new_storage(std::uint64_t numel, bool external) {
    sizes_.push_back(numel);
    producer_.push_back(external ? -1 : static_cast<long>(ops_.size()));
    return sizes_.size() - 1;
  }

  Value emit(LayerKind kind, const std::vector<Value>& in, Shape out, std::uint64_t params,
             std::uint64_t flops) {
    Op op;
    op.module = module_;
    op.kind = kind;
    for (const auto& v : in) op.inputs.push_back(v.id);
    op.params = params;
    op.flops = flops;
    op.output = new_storage(numel_of(out), false);
    ops_.push_back(std::move(op));
    return {ops_.back().output, std::move(out)};
  }

  std::string module_;
  std::vector<Op> ops_;
  std::vector<std::uint64_t> sizes_;
  std::vector<long> producer_;
  std::vector<std::size_t> outputs_;
};

/// RAII module path for the cost graph.
class CostScope {
 public:
  CostScope(CostGraph& g, const std::string& module) : g_(g), prev_(g.module()) {
    g.set_module(module);
  }
  ~CostScope() { g_.set_module(prev_); }
  CostScope(const CostScope&) = delete;
  CostScope& operator=(const CostScope&) = delete;

 private:
  CostGraph& g_;
  std::string prev_;
};

namespace cost {

using V = CostGraph::Value;

inline V stem(CostGraph& g, const std::string& m, const V& img, std::size_t C) {
  CostScope s(g, m);
  V x = g.conv(img, C / 2, 3, 2, 1, 0);
  x = g.layernorm(x, C / 2);
  x = g.conv(x, C, 3, 2, 1, 0);
  return g.layernorm(x, C);
}

inline V base_stage(CostGraph& g, const std::string& m, const V& f) {
  CostScope s(g, m);
  const std::size_t C = f.dim(1);
  return g.maxpool2(g.conv(g.conv(f, C, 3, 1, 1), 2 * C, 1));
}

inline V ldformer_stage(CostGraph& g, const std::string& m, const V& f) {
  CostScope s(g, m);
  return g.maxpool2(g.conv(g.depthwise(f, 3), 2 * f.dim(1), 1));
}

inline V detail_stage(CostGraph& g, const std::string& m, const V& f, std::size_t window,
                      std::size_t heads) {
  CostScope s(g, m);
  const std::size_t N = f.dim(0), C = f.dim(1), h = f.dim(2), w = f.dim(3);
  const std::size_t L = window * window, B = N * (h / window) * (w / window), d = C / heads;
  V x = g.view(f, {N, h, w, C});
  {
    V y = g.layernorm(x, C);
    V qkv = g.linear(g.view(y, {B, L, C}), 3 * C);
    V qk = g.bmm(qkv, qkv, B * heads, L, L, d);
    V a = g.softmax(g.scale(qk), true);
    V o = g.bmm(a, qkv, B * heads, L, d, L);
    o = g.linear(g.view(o, {B, L, C}), C);
    x = g.add(x, g.view(o, x.shape));
  }
  {
    V y = g.layernorm(x, C);
    y = g.linear(g.gelu(g.linear(y, 2 * C)), C);
    x = g.add(x, y);
  }
  V mg = g.view(x, {N, h / 2, w / 2, 4 * C});
  mg = g.linear(g.layernorm(mg, 4 * C), 2 * C);
  return g.view(mg, {N, 2 * C, h / 2, w / 2});
}

inline V rgb_fuse(CostGraph& g, const std::string& m, const V& detail, const V& base) {
  CostScope s(g, m);
  return g.conv(g.concat({g.add(detail, base), g.mul(detail, base)}, 1), detail.dim(1), 1);
}

inline V gfa(CostGraph& g, const std::string& m, const V& main, const V& minor, bool pooling,
             bool q_concat, std::size_t heads) {
  CostScope s(g, m);
  const std::size_t N = main.dim(0), C = main.dim(1), h = main.dim(2), w = main.dim(3);
  const std::size_t d = C / heads;
  V q = q_concat ? g.concat({main, minor}, 1) : main;
  if (pooling) q = g.adaptive_avgpool(q, kPooledQuerySide, kPooledQuerySide);
  const std::size_t qh = q.dim(2), qw = q.dim(3), tq = qh * qw;
  q = g.linear_map(q, C);
  V k = g.linear_map(main, C);
  V v = g.linear_map(main, C);
  V scores = g.scale(g.bmm(q, k, N * heads, tq, h * w, d));
  V a = g.softmax(scores, true);
  V out = g.view(g.bmm(v, a, N * heads, d, tq, h * w), {N, C, qh, qw});
  return pooling ? g.bilinear(out, h, w) : out;
}

inline V lfa(CostGraph& g, const std::string& m, const V& main, const V& minor,
             std::size_t kernel) {
  CostScope s(g, m);
  const std::size_t C = main.dim(1);
  V a = g.linear_map(main, C);
  V b = g.linear_map(minor, C);
  b = g.conv(b, C, kernel, 1, kernel / 2);
  b = g.linear_map(b, C);
  return g.mul(a, b);
}

inline std::pair<V, V> miim_block(CostGraph& g, const std::string& m, const V& rgb,
                                  const V& depth, const MiimConfig& c) {
  std::vector<V> feats;
  if (c.enable_gfa1) feats.push_back(gfa(g, m + ".gfa1", rgb, depth, c.pooling_enabled, c.q_concat_enabled, c.heads));
  if (c.enable_lfa1) feats.push_back(lfa(g, m + ".lfa1", rgb, depth, c.kernel));
  if (c.enable_gfa2) feats.push_back(gfa(g, m + ".gfa2", depth, rgb, c.pooling_enabled, c.q_concat_enabled, c.heads));
  if (c.enable_lfa2) feats.push_back(lfa(g, m + ".lfa2", depth, rgb, c.kernel));
  CostScope s(g, m);
  const V cat = g.concat(feats, 1);
  return {g.linear_map(cat, rgb.dim(1)), g.linear_map(cat, rgb.dim(1))};
}

}  // namespace cost

/// Cost graph of one GFA branch applied to N×C×h×w inputs.
inline CostGraph gfa_cost_graph(std::size_t C, std::size_t h, std::size_t w, bool pooling,
                                bool q_concat, std::size_t heads = 1, std::size_t N = 1) {
  CostGraph g;
  const auto main = g.input({N, C, h, w});
  const auto minor = g.input({N, C, h, w});
  g.mark_output(cost::gfa(g, "gfa", main, minor, pooling, q_concat, heads));
  return g;
}

/// Cost graph of the full network for an N×3×H×W / N×1×H×W input, in the
/// same op order as HdbFormer::trace.
inline CostGraph model_cost_graph(const ModelConfig& cfg, std::size_t H, std::size_t W,
                                  std::size_t N = 1) {
  cfg.validate();
  EncoderConfig::check_input(H, W);
  using cost::V;
  const auto& ec = cfg.encoder;
  const std::size_t C = ec.base_channels;
  CostGraph g;
  const V rgb = g.input({N, 3, H, W});
  const V depth = g.input({N, 1, H, W});

  std::array<V, 4> detail, base, rgb_pyr, depth_pyr;
  detail[0] = cost::stem(g, "detail.stem", rgb, C);
  for (int i = 0; i < 3; ++i)
    detail[i + 1] = cost::detail_stage(g, "detail.stage" + std::to_string(i + 2), detail[i],
                                       ec.effective_window(detail[i].dim(2), detail[i].dim(3)),
                                       ec.detail_heads);
  if (ec.base_branch_enabled) {
    base[0] = cost::stem(g, "base.stem", rgb, C);
    for (int i = 0; i < 3; ++i)
      base[i + 1] = cost::base_stage(g, "base.stage" + std::to_string(i + 2), base[i]);
    for (int i = 0; i < 4; ++i)
      rgb_pyr[i] = cost::rgb_fuse(g, "base.fuse" + std::to_string(i + 1), detail[i], base[i]);
  } else {
    rgb_pyr = detail;
  }
  const std::string dp = depth_branch_prefix(ec.depth_encoder_kind);
  depth_pyr[0] = cost::stem(g, dp + ".stem", depth, C);
  for (int i = 0; i < 3; ++i) {
    const std::string m = dp + ".stage" + std::to_string(i + 2);
    depth_pyr[i + 1] = ec.depth_encoder_kind == DepthEncoderKind::ldformer
                           ? cost::ldformer_stage(g, m, depth_pyr[i])
                           : cost::base_stage(g, m, depth_pyr[i]);
  }

  std::vector<V> feats;
  for (int s = 0; s < 4; ++s) {
    const std::string m = "miim.stage" + std::to_string(s + 1);
    V r = rgb_pyr[s], d = depth_pyr[s];
    if (cfg.fusion_kind == FusionKind::naive_add_mul) {
      CostScope sc(g, m);
      r = g.add(r, d);
    } else {
      for (int it = 0; it < cfg.miim.iterations; ++it) {
        std::tie(r, d) = cost::miim_block(g, m + ".iter" + std::to_string(it + 1), r, d, cfg.miim);
      }
    }
    feats.push_back(r);
  }
  if (ec.base_branch_enabled) feats.push_back(base[3]);

  CostScope sc(g, "decoder");
  std::vector<V> up;
  for (const auto& f : feats) up.push_back(g.bilinear(f, H / 4, W / 4));
  g.mark_output(g.conv(g.concat(up, 1), cfg.num_classes, 1));
  return g;
}

struct ProfileRow {
  std::string module;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t peak_bytes = 0;
};

/// Per-module and total cost of one configuration at a given input size.
struct ProfileReport {
  std::size_t input_h = 0, input_w = 0;
  std::vector<ProfileRow> rows;       // leaf modules in execution order
  ProfileRow total;                   // params/flops summed, peak over the whole schedule
  std::uint64_t attention_bytes = 0;  // largest attention map

  /// Sum over rows inside `prefix`; peak is the simulated peak of that subtree.
  std::uint64_t params_with_prefix(const std::string& prefix) const {
    std::uint64_t s = 0;
    for (const auto& r : rows)
      if (CostGraph::in_module(r.module, prefix)) s += r.params;
    return s;
  }
  std::uint64_t flops_with_prefix(const std::string& prefix) const {
    std::uint64_t s = 0;
    for (const auto& r : rows)
      if (CostGraph::in_module(r.module, prefix)) s += r.flops;
    return s;
  }
  const ProfileRow* find(const std::string& module) const {
    for (const auto& r : rows)
      if (r.module == module) return &r;
    return nullptr;
  }
};

inline ProfileReport make_report(const CostGraph& g, std::size_t H, std::size_t W) {
  ProfileReport rep;
  rep.input_h = H;
  rep.input_w = W;
  for (const auto& m : g.modules()) {
    ProfileRow r{m, 0, 0, g.peak_bytes(m)};
    for (const auto& op : g.ops())
      if (op.module == m) {
        r.params += op.params;
        r.flops += op.flops;
      }
    rep.rows.push_back(r);
  }
  rep.total = {"total", g.params(), g.flops(), g.peak_bytes()};
  rep.attention_bytes = g.attention_bytes();
  return rep;
}

/// Top-level branch totals: base, detail, ldformer|depthconv, miim, decoder.
inline std::vector<ProfileRow> branch_totals(const CostGraph& g) {
  std::vector<ProfileRow> out;
  for (const auto& m : g.modules()) {
    const std::string top = m.substr(0, m.find('.'));
    if (std::none_of(out.begin(), out.end(), [&](const ProfileRow& r) { return r.module == top; }))
      out.push_back({top, g.params(top), g.flops(top), g.peak_bytes(top)});
  }
  return out;
}

inline std::uint64_t count_params(const ModelConfig& cfg) {
  return model_cost_graph(cfg, 32, 32).params();
}

inline ProfileReport count_flops(const ModelConfig& cfg, std::size_t H, std::size_t W) {
  return make_report(model_cost_graph(cfg, H, W), H, W);
}

inline std::uint64_t estimate_peak_memory(const ModelConfig& cfg, std::size_t H, std::size_t W,
                                          const std::string& module = "") {
  return model_cost_graph(cfg, H, W).peak_bytes(module);
}

/// RFC-4180 field: quoted when it contains a comma, quote, or line break.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct NamedConfig {
  std::string name;
  ModelConfig config;
};

struct TableRow {
  std::string name;
  std::uint64_t params = 0, flops = 0, peak_mem = 0;
  bool operator==(const TableRow&) const = default;
};

inline std::vector<TableRow> profile_table(const std::vector<NamedConfig>& cfgs, std::size_t H,
                                           std::size_t W) {
  std::vector<TableRow> rows;
  for (const auto& c : cfgs) {
    const CostGraph g = model_cost_graph(c.config, H, W);
    rows.push_back({c.name, g.params(), g.flops(), g.peak_bytes()});
  }
  return rows;
}

inline void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "name,params,flops,peak_mem\r\n";
  for (const auto& r : rows)
    os << csv_field(r.name) << ',' << r.params << ',' << r.flops << ',' << r.peak_mem << "\r\n";
}

}  // namespace hdbf
