#include <cmath>
#include <set>
#include <sstream>

#include "test_support.hpp"

using namespace hdbf;
using namespace hdbf::testing;

namespace {

TrainConfig quick_train(std::size_t steps) {
  TrainConfig tc;
  tc.total_steps = steps;
  tc.batch_size = 2;
  tc.eval_scenes = 2;
  return tc;
}

std::set<std::uint8_t> label_set(const LabelMap& m) { return {m.data.begin(), m.data.end()}; }

}  // namespace

TEST(GenScene, DeterministicInSeed) {
  const SegSample a = gen_scene(42, 48, 40, 5), b = gen_scene(42, 48, 40, 5), c = gen_scene(43, 48, 40, 5);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.rgb.values(), b.rgb.values());
  EXPECT_EQ(a.depth.values(), b.depth.values());
  EXPECT_NE(a.rgb.values(), c.rgb.values());
  EXPECT_EQ(a.rgb.shape(), (Shape{3, 48, 40}));
  EXPECT_EQ(a.depth.shape(), (Shape{1, 48, 40}));
}

TEST(GenScene, ForcedEmptySceneIsBackground) {
  SceneOptions opt;
  opt.force_shape_count = 0;
  const SegSample s = gen_scene(7, 16, 16, 4, opt);
  for (auto v : s.labels.data) EXPECT_EQ(v, 0);
  for (float d : s.depth.data()) EXPECT_EQ(d, kBackgroundDepth);
}

TEST(GenScene, ShapesAreNearerThanBackgroundAndValuesInRange) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t K = 2 + seed % 5;
    const SegSample s = gen_scene(seed, 32, 32, K);
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      const std::uint8_t y = s.labels.data[p];
      ASSERT_LT(y, K);
      if (y != 0) ASSERT_GT(s.depth[p], kBackgroundDepth) << "seed " << seed;
      else ASSERT_EQ(s.depth[p], kBackgroundDepth);
    }
    for (float v : s.rgb.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : s.depth.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_THROW(gen_scene(0, 8, 8, 1), ConfigError);
}

TEST(GenScene, NearerShapesOccludeFartherOnes) {
  // Painting far-to-near leaves one depth per visible shape, so a scene
  // with four shapes shows at most four non-background depth values.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneOptions opt;
    opt.force_shape_count = 4;
    const SegSample s = gen_scene(seed, 32, 32, 5, opt);
    std::set<float> depths(s.depth.data().begin(), s.depth.data().end());
    depths.erase(kBackgroundDepth);
    EXPECT_LE(depths.size(), 4u);
  }
}

TEST(Augment, IdentityCases) {
  const SegSample s = gen_scene(3, 32, 24, 4);
  const SegSample same = augment_with(s, AugmentParams{});
  EXPECT_EQ(same.labels, s.labels);
  EXPECT_EQ(same.rgb.values(), s.rgb.values());
  EXPECT_EQ(same.depth.values(), s.depth.values());

  AugmentParams flip;
  flip.flip = true;
  const SegSample once = augment_with(s, flip);
  EXPECT_NE(once.labels, s.labels);
  const SegSample twice = augment_with(once, flip);
  EXPECT_EQ(twice.labels, s.labels);
  EXPECT_EQ(twice.rgb.values(), s.rgb.values());
  EXPECT_EQ(twice.depth.values(), s.depth.values());
}

TEST(Augment, LabelsStaySubsetAndShapesPreserved) {
  bool saw_pad = false, saw_flip = false, saw_up = false, saw_down = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SegSample s = gen_scene(seed, 32, 32, 5);
    const AugmentParams p = draw_augment(seed * 31 + 1, 32, 32);
    ASSERT_GE(p.scale, kAugmentMinScale);
    ASSERT_LE(p.scale, kAugmentMaxScale);
    saw_flip |= p.flip;
    saw_up |= p.scale > 1.0;
    saw_down |= p.scale < 1.0;
    const SegSample a = augment(s, seed * 31 + 1);
    ASSERT_EQ(a.rgb.shape(), s.rgb.shape());
    ASSERT_EQ(a.depth.shape(), s.depth.shape());
    std::set<std::uint8_t> allowed = label_set(s.labels);
    allowed.insert(kIgnoreLabel);
    for (auto v : label_set(a.labels)) ASSERT_TRUE(allowed.count(v)) << int(v) << " seed " << seed;
    saw_pad |= label_set(a.labels).count(kIgnoreLabel) > 0;
  }
  EXPECT_TRUE(saw_pad && saw_flip && saw_up && saw_down);
}

TEST(Augment, DownscalePadsWithIgnoreAndZero) {
  const SegSample s = gen_scene(5, 32, 32, 3);
  AugmentParams p;
  p.scale = 0.5;
  const SegSample a = augment_with(s, p);
  // 16×16 pasted at the origin; everything else is padding.
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      if (y >= 16 || x >= 16) {
        ASSERT_EQ(a.labels.at(0, y, x), kIgnoreLabel);
        ASSERT_EQ(a.depth[y * 32 + x], 0.0f);
      } else {
        ASSERT_NE(a.labels.at(0, y, x), kIgnoreLabel);
      }
}

TEST(PolyLr, ScheduleEndpointsAndErrors) {
  EXPECT_DOUBLE_EQ(poly_lr(1e-5, 0, 100, 0.9), 1e-5);
  EXPECT_DOUBLE_EQ(poly_lr(1e-5, 100, 100, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(1e-5, 50, 100, 0.9), 1e-5 * std::pow(0.5, 0.9), 1e-20);
  EXPECT_THROW(poly_lr(1e-5, 101, 100, 0.9), ContractError);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParamsUnchanged) {
  std::mt19937_64 rng(1);
  Tensor<float> p = rand_tensor({4, 3}, rng, -1, 1, true);
  const auto before = p.values();
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  cfg.total_steps = 5;
  AdamW<float> opt({p}, cfg);
  for (int i = 0; i < 3; ++i) opt.step();
  EXPECT_EQ(p.values(), before);
}

TEST(AdamW, FinalScheduleStepDoesNotMoveParamsAndBeyondThrows) {
  Tensor<double> p({1}, 1.0, true);
  AdamWConfig cfg;
  cfg.total_steps = 2;
  AdamW<double> opt({p}, cfg);
  for (int i = 0; i < 2; ++i) {
    p.zero_grad();
    backward(sum(mul(p, p)));
    opt.step();
  }
  const double at_t = p[0];
  EXPECT_EQ(opt.current_lr(), 0.0);
  p.zero_grad();
  backward(sum(mul(p, p)));
  opt.step();  // t = T: lr 0
  EXPECT_EQ(p[0], at_t);
  EXPECT_THROW(opt.step(), ContractError);
}

TEST(AdamW, ScalarQuadraticDecreases) {
  Tensor<double> x({1}, 1.0, true);
  AdamWConfig cfg;
  cfg.lr0 = 0.1;
  cfg.weight_decay = 0;
  cfg.total_steps = 100;
  AdamW<double> opt({x}, cfg);
  double final_f = 1.0;
  std::vector<double> f;
  for (int t = 0; t < 100; ++t) {
    x.zero_grad();
    const Tensor<double> loss = sum(mul(x, x));
    f.push_back(loss.item());
    backward(loss);
    opt.step();
    final_f = x[0] * x[0];
  }
  // Momentum makes Adam overshoot the minimum, so the trajectory is not
  // monotone step by step; its running minimum is, and the end point is
  // far below the start.
  double best = f[0];
  std::size_t improvements = 0;
  for (double v : f) {
    if (v < best) ++improvements;
    best = std::min(best, v);
  }
  EXPECT_LT(final_f, 1e-3);
  EXPECT_GT(improvements, 5u);
  for (std::size_t t = 1; t < 8; ++t) EXPECT_LT(f[t], f[t - 1]) << t;
}

TEST(AdamW, WithoutDecayEqualsAdamOracle) {
  std::mt19937_64 rng(2);
  Tensor<double> p = random_uniform<double>({5}, -1, 1, rng, true);
  const Tensor<double> target = random_uniform<double>({5}, -1, 1, rng);
  std::vector<double> x = p.values(), m(5, 0.0), v(5, 0.0);
  AdamWConfig cfg;
  cfg.lr0 = 0.05;
  cfg.weight_decay = 0;
  cfg.total_steps = 10;
  AdamW<double> opt({p}, cfg);
  for (int t = 1; t <= 10; ++t) {
    p.zero_grad();
    const Tensor<double> d = sub(p, target);
    backward(sum(mul(d, d)));
    opt.step();
    const double lr = 0.05 * std::pow(1.0 - (t - 1) / 10.0, 0.9);
    for (std::size_t i = 0; i < 5; ++i) {
      const double g = 2 * (x[i] - target[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t i = 0; i < 5; ++i) ASSERT_NEAR(p[i], x[i], 1e-12) << "step " << t;
  }
}

TEST(AdamW, DecayShrinksBeforeAdamUpdate) {
  Tensor<double> p({1}, 2.0, true);
  AdamWConfig cfg;
  cfg.lr0 = 0.1;
  cfg.weight_decay = 0.5;
  cfg.total_steps = 10;
  AdamW<double> opt({p}, cfg);
  opt.step();  // zero gradient: only the decay acts
  EXPECT_DOUBLE_EQ(p[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Train, ZeroStepsLeavesInitialParameters) {
  HdbFormer<float> model(small_model(), 3);
  const auto init = model.params().serialize();
  const TrainResult r = train(model, quick_train(0));
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(model.params().serialize(), init);
  ASSERT_EQ(r.evals.size(), 1u);
}

TEST(Train, BitReproducibleLossCurveAndWeights) {
  auto run = [] {
    HdbFormer<float> model(small_model(), 4);
    TrainConfig tc = quick_train(4);
    tc.seed = 11;
    const TrainResult r = train(model, tc);
    std::vector<double> losses;
    for (const auto& e : r.log) losses.push_back(e.loss);
    return std::make_pair(losses, model.params().serialize());
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  ASSERT_EQ(a.first.size(), 4u);
  EXPECT_NEAR(a.first[0], std::log(3.0), 0.2 * std::log(3.0));
}

TEST(Train, LogsScheduleAndPeriodicEvals) {
  HdbFormer<float> model(small_model(), 5);
  TrainConfig tc = quick_train(4);
  tc.eval_every = 2;
  tc.dataset_size = 3;
  std::size_t calls = 0;
  const TrainResult r = train(model, tc, [&](const TrainLogEntry&) { ++calls; });
  EXPECT_EQ(calls, 4u);
  EXPECT_DOUBLE_EQ(r.log[0].lr, tc.lr0);
  EXPECT_DOUBLE_EQ(r.log[2].lr, poly_lr(tc.lr0, 2, 4, 0.9));
  ASSERT_EQ(r.evals.size(), 2u);
  EXPECT_EQ(r.evals[0].first, 2u);
  EXPECT_EQ(r.evals[1].first, 4u);
}

TEST(Train, NonFiniteLossNamesTheOffendingOp) {
  HdbFormer<float> model(small_model(), 6);
  Tensor<float> bias = model.params().get("decoder.classifier.bias");
  bias[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, quick_train(1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("decoder"), std::string::npos) << msg;
  }
}

TEST(Ablation, SingleRowGivesOneCsvRow) {
  const ModelConfig base = small_model();
  const auto rows = run_ablation({{"default", base, false}}, quick_train(1), 0);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].trained);
  EXPECT_EQ(rows[0].flags, "GFA1+LFA1+LFA2");
  std::ostringstream os;
  write_ablation_csv(os, rows);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.rfind("name,flags,params,flops,peak_mem,attention_bytes,miou,pixel_acc\r\n", 0), 0u);
  EXPECT_NE(csv.find("default,GFA1+LFA1+LFA2,"), std::string::npos);
}

TEST(Ablation, AllBranchRowsRun) {
  const auto grid = fusion_branch_grid(small_model());
  ASSERT_EQ(grid.size(), 8u);
  std::set<std::string> labels;
  const auto rows = run_ablation(grid, quick_train(1), 0);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.trained) << r.name;
    EXPECT_TRUE(std::isfinite(r.eval.miou)) << r.name;
    labels.insert(r.flags);
  }
  EXPECT_EQ(labels.size(), 8u);
}

TEST(Ablation, WithoutPoolingRowHasLargerPeak) {
  const auto grid = attention_variant_grid(small_model(8, 64, 5));
  ASSERT_EQ(grid.size(), 3u);
  EXPECT_TRUE(grid[1].profile_only);
  std::vector<AblationRow> profile_only = grid;
  for (auto& r : profile_only) r.profile_only = true;
  const auto rows = run_ablation(profile_only, quick_train(1), 0);
  EXPECT_GT(rows[1].peak_mem, rows[0].peak_mem);
  EXPECT_GT(rows[1].attention_bytes, rows[0].attention_bytes);
  EXPECT_LE(rows[2].peak_mem, rows[0].peak_mem);
  std::ostringstream os;
  write_ablation_csv(os, rows);
  EXPECT_NE(os.str().find("w/o pooling,GFA1+LFA1+LFA2,"), std::string::npos);
}

TEST(Config, ParsesTablesAndOverridesDefaults) {
  const auto doc = TomlDoc::parse(R"(# comment
[model]
num_classes = 4
fusion_kind = "naive_add_mul"

[model.encoder]
base_channels = 16   # trailing comment
input_h = 64
input_w = 96
depth_encoder_kind = "ordinary_conv"

[model.miim]
enable_gfa2 = true
iterations = 1

[train]
lr0 = 1e-5
total_steps = 20
augment = false
)");
  const ModelConfig m = model_config_from(doc);
  const TrainConfig t = train_config_from(doc);
  doc.reject_unknown();
  EXPECT_EQ(m.num_classes, 4u);
  EXPECT_EQ(m.fusion_kind, FusionKind::naive_add_mul);
  EXPECT_EQ(m.encoder.base_channels, 16u);
  EXPECT_EQ(m.encoder.input_w, 96u);
  EXPECT_EQ(m.encoder.depth_encoder_kind, DepthEncoderKind::ordinary_conv);
  EXPECT_TRUE(m.miim.enable_gfa2);
  EXPECT_EQ(m.miim.iterations, 1);
  EXPECT_EQ(t.lr0, 1e-5);
  EXPECT_EQ(t.total_steps, 20u);
  EXPECT_FALSE(t.augment);
  EXPECT_EQ(t.batch_size, 4u);
}

TEST(Config, ErrorsAreConfigErrors) {
  const auto unknown = TomlDoc::parse("[model]\nnum_clases = 4\n");
  model_config_from(unknown);
  train_config_from(unknown);
  EXPECT_THROW(unknown.reject_unknown(), ConfigError);
  EXPECT_THROW(TomlDoc::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(TomlDoc::parse("[t]\n[t]\n"), ConfigError);
  EXPECT_THROW(TomlDoc::parse("a = \"open\n"), ConfigError);
  EXPECT_THROW(model_config_from(TomlDoc::parse("[model]\nnum_classes = \"four\"\n")), ConfigError);
  EXPECT_THROW(model_config_from(TomlDoc::parse("[model]\nnum_classes = 1\n")), ConfigError);
  EXPECT_THROW(model_config_from(TomlDoc::parse("[model.miim]\nenable_gfa1 = false\nenable_lfa1 = false\n"
                                                "enable_lfa2 = false\n")),
               ConfigError);
  EXPECT_THROW(train_config_from(TomlDoc::parse("[train]\nlr0 = 0.0\n")), ConfigError);
  EXPECT_THROW(TomlDoc::load("/nonexistent/config.toml"), ConfigError);
}

TEST(Config, SerializedConfigRoundTrips) {
  ModelConfig m = small_model(16, 64, 4);
  m.miim.enable_gfa2 = true;
  m.miim.q_concat_enabled = false;
  TrainConfig t;
  t.lr0 = 3e-4;
  t.poly_power = 1.0;
  t.seed = 9;
  const std::string text = to_toml(m, t);
  const auto doc = TomlDoc::parse(text);
  const ModelConfig m2 = model_config_from(doc);
  const TrainConfig t2 = train_config_from(doc);
  doc.reject_unknown();
  EXPECT_EQ(to_toml(m2, t2), text);
  EXPECT_EQ(t2.lr0, 3e-4);
  EXPECT_EQ(toml_float(1.0), "1.0");
  EXPECT_EQ(toml_float(0.001), "0.001");
}
