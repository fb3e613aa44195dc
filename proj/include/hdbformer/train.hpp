#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "hdbformer/data.hpp"
#include "hdbformer/optim.hpp"
#include "hdbformer/profiler.hpp"
#include "hdbformer/segmodel.hpp"

namespace hdbf {

struct TrainConfig {
  std::size_t batch_size = 4;
  double lr0 = 1e-3;
  double weight_decay = 1e-2;
  std::size_t total_steps = 500;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  std::size_t dataset_size = 0;  // 0: a fresh scene for every draw
  std::size_t eval_every = 0;    // 0: evaluate only at the end
  std::size_t eval_scenes = 32;
  bool augment = true;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (eval_scenes < 1) throw ConfigError("eval_scenes must be at least 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  }
};

/// Held-out scenes come from a seed range disjoint from training draws.
inline constexpr std::uint64_t kHeldOutSeedBase = 1'000'000'000ull;
inline constexpr std::uint64_t kTrainSeedLimit = kHeldOutSeedBase;

struct EvalResult {
  double miou = 0;
  double pixel_acc = 0;
  std::vector<double> class_iou;
};

inline std::vector<SegSample> held_out_scenes(std::size_t count, std::size_t H, std::size_t W,
                                              std::size_t K) {
  std::vector<SegSample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_scene(kHeldOutSeedBase + i, H, W, K));
  return out;
}

/// mIoU and pixel accuracy over `scenes`, accumulated in one confusion matrix.
template <typename T>
EvalResult evaluate(const HdbFormer<T>& model, const std::vector<SegSample>& scenes,
                    std::size_t batch_size = 4, bool msflip = false) {
  NoGradGuard no_grad;
  ConfusionMatrix cm(model.config().num_classes);
  for (std::size_t i = 0; i < scenes.size(); i += batch_size) {
    const std::size_t end = std::min(scenes.size(), i + batch_size);
    const Batch b = make_batch({scenes.begin() + static_cast<long>(i), scenes.begin() + static_cast<long>(end)});
    const LabelMap pred = msflip ? msflip_infer(model, b.rgb, b.depth).pred
                                 : model.forward(b.rgb, b.depth).pred;
    cm.add(pred.data, b.labels.data);
  }
  return {cm.miou(), cm.pixel_acc(), cm.class_iou()};
}

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<std::pair<std::size_t, EvalResult>> evals;  // (steps completed, metrics)
  EvalResult final_eval;
};

/// Reruns the batch forward with finite checks enabled and reports the first
/// op that produced a non-finite value.
template <typename T>
std::string locate_non_finite(const HdbFormer<T>& model, const Batch& b) {
  NoGradGuard no_grad;
  FiniteCheckGuard guard;
  try {
    const Tensor<T> z = model.logits(b.rgb.template cast<T>(), b.depth.template cast<T>());
    (void)HdbFormer<T>::loss_from_logits(z, b.labels);
  } catch (const NumericError& e) {
    return e.what();
  }
  return "non-finite values appear only in the backward pass or optimizer update";
}

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// Runs `total_steps` of sample → augment → forward → loss → backward → AdamW.
/// Deterministic given the seeds and single-threaded execution.
inline TrainResult train(HdbFormer<float>& model, const TrainConfig& tc,
                         const TrainCallback& on_step = {}) {
  tc.validate();
  const auto& mc = model.config();
  const std::size_t H = mc.encoder.input_h, W = mc.encoder.input_w, K = mc.num_classes;
  AdamWConfig oc;
  oc.lr0 = tc.lr0;
  oc.weight_decay = tc.weight_decay;
  oc.total_steps = tc.total_steps;
  oc.poly_power = tc.poly_power;
  AdamW<float> opt(model.params().tensors(), oc);
  std::mt19937_64 rng(tc.seed);
  const std::vector<SegSample> held_out = held_out_scenes(tc.eval_scenes, H, W, K);

  std::vector<SegSample> pool;
  for (std::size_t i = 0; i < tc.dataset_size; ++i)
    pool.push_back(gen_scene((tc.seed * 7919 + i) % kTrainSeedLimit, H, W, K));

  TrainResult res;
  for (std::size_t step = 0; step < tc.total_steps; ++step) {
    std::vector<SegSample> samples;
    for (std::size_t i = 0; i < tc.batch_size; ++i) {
      const std::uint64_t draw = rng();
      SegSample s = pool.empty() ? gen_scene(draw % kTrainSeedLimit, H, W, K)
                                 : pool[draw % pool.size()];
      const std::uint64_t aug_seed = rng();
      samples.push_back(tc.augment ? augment(s, aug_seed) : std::move(s));
    }
    const Batch b = make_batch(samples);
    TrainLogEntry entry{step, opt.current_lr(), 0.0};
    model.params().zero_grads();
    const Tensor<float> loss = model.loss(b.rgb, b.depth, b.labels);
    entry.loss = loss.item();
    if (!std::isfinite(entry.loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + ": " +
                         locate_non_finite(model, b));
    }
    backward(loss);
    opt.step();
    res.log.push_back(entry);
    if (on_step) on_step(entry);
    if (tc.eval_every && (step + 1) % tc.eval_every == 0 && step + 1 < tc.total_steps)
      res.evals.emplace_back(step + 1, evaluate(model, held_out));
  }
  res.final_eval = evaluate(model, held_out);
  res.evals.emplace_back(tc.total_steps, res.final_eval);
  return res;
}

/// One configuration of an ablation grid.
struct AblationRow {
  std::string name;
  ModelConfig config;
  bool profile_only = false;  // report costs without training
};

struct AblationResult {
  std::string name;
  std::string flags;
  bool trained = false;
  EvalResult eval;
  std::uint64_t params = 0, flops = 0, peak_mem = 0, attention_bytes = 0;
};

inline ModelConfig with_flags(ModelConfig base, bool lfa1, bool gfa1, bool gfa2, bool lfa2) {
  base.fusion_kind = FusionKind::miim;
  base.miim.enable_lfa1 = lfa1;
  base.miim.enable_gfa1 = gfa1;
  base.miim.enable_gfa2 = gfa2;
  base.miim.enable_lfa2 = lfa2;
  return base;
}

/// The eight MIIM component combinations, as (LFA1, GFA1, GFA2, LFA2) rows.
inline std::vector<AblationRow> fusion_branch_grid(const ModelConfig& base) {
  struct F { const char* name; bool l1, g1, g2, l2; };
  static constexpr F kRows[] = {
      {"lfa1+gfa1+gfa2+lfa2", true, true, true, true},
      {"lfa1+gfa1+gfa2", true, true, true, false},
      {"lfa1+gfa2+lfa2", true, false, true, true},
      {"gfa1+gfa2+lfa2", false, true, true, true},
      {"lfa1+gfa1", true, true, false, false},
      {"gfa1+lfa2", false, true, false, true},
      {"lfa1+lfa2", true, false, false, true},
      {"lfa1+gfa1+lfa2", true, true, false, true},
  };
  std::vector<AblationRow> rows;
  for (const auto& r : kRows) rows.push_back({r.name, with_flags(base, r.l1, r.g1, r.g2, r.l2), false});
  return rows;
}

/// GFA variants: default, without query pooling (costs only), without the
/// query-side concatenation.
inline std::vector<AblationRow> attention_variant_grid(const ModelConfig& base) {
  ModelConfig def = base;
  def.fusion_kind = FusionKind::miim;
  ModelConfig no_pool = def;
  no_pool.miim.pooling_enabled = false;
  ModelConfig no_concat = def;
  no_concat.miim.q_concat_enabled = false;
  return {{"default", def, false}, {"w/o pooling", no_pool, true}, {"w/o concatenation", no_concat, false}};
}

/// Trains (unless profile-only) and profiles every row with the same seeds.
inline std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& rows,
                                                const TrainConfig& tc, std::uint64_t model_seed,
                                                const std::function<void(const AblationResult&)>& on_row = {}) {
  std::vector<AblationResult> out;
  for (const auto& row : rows) {
    AblationResult r;
    r.name = row.name;
    r.flags = row.config.fusion_kind == FusionKind::miim ? row.config.miim.flags_label()
                                                         : fusion_kind_name(row.config.fusion_kind);
    const std::size_t H = row.config.encoder.input_h, W = row.config.encoder.input_w;
    const CostGraph g = model_cost_graph(row.config, H, W);
    r.params = g.params();
    r.flops = g.flops();
    r.peak_mem = g.peak_bytes();
    r.attention_bytes = g.attention_bytes();
    if (!row.profile_only) {
      HdbFormer<float> model(row.config, model_seed);
      r.eval = train(model, tc).final_eval;
      r.trained = true;
    }
    if (on_row) on_row(r);
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows) {
  os << "name,flags,params,flops,peak_mem,attention_bytes,miou,pixel_acc\r\n";
  for (const auto& r : rows) {
    os << csv_field(r.name) << ',' << csv_field(r.flags) << ',' << r.params << ',' << r.flops
       << ',' << r.peak_mem << ',' << r.attention_bytes << ',';
    if (r.trained) os << r.eval.miou << ',' << r.eval.pixel_acc;
    else os << ',';
    os << "\r\n";
  }
}

}  // namespace hdbf
