#include "test_support.hpp"

using namespace hdbf;
using namespace hdbf::testing;

TEST(Stem, ShapeContractForRgbAndDepth) {
  ParamStore<float> ps;
  Stem<float> rgb(ps, "rgb", 3, 32), depth(ps, "depth", 1, 32);
  EXPECT_EQ(rgb(Tensor<float>({1, 3, 64, 64}, 0.3f)).shape(), (Shape{1, 32, 16, 16}));
  EXPECT_EQ(depth(Tensor<float>({1, 1, 64, 64}, 0.3f)).shape(), (Shape{1, 32, 16, 16}));
  EXPECT_THROW(rgb(Tensor<float>({1, 1, 64, 64})), ShapeError);
  EXPECT_THROW(rgb(Tensor<float>({1, 3, 62, 64})), ShapeError);
  EXPECT_THROW(Stem<float>(ps, "bad", 2, 8), ConfigError);
}

TEST(Stem, ZeroInputZeroBiasGivesZeroPreNorm) {
  ParamStore<float> ps(3);
  Stem<float> stem(ps, "s", 3, 8);
  const Tensor<float> pre = stem.pre_norm(Tensor<float>({1, 3, 16, 16}));
  for (float v : pre.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BaseStage, ShapeAndPureMaxpoolReduction) {
  ParamStore<float> ps(4);
  BaseStage<float> st(ps, "b", 4);
  std::mt19937_64 rng(1);
  const Tensor<float> x = rand_tensor({1, 4, 16, 16}, rng);
  EXPECT_EQ(st(x).shape(), (Shape{1, 8, 8, 8}));

  // Center-tap 3×3 and a channel-duplicating 1×1 reduce the stage to maxpool.
  Tensor<float> w3 = st.conv3x3().weight, w1 = st.conv1x1().weight;
  std::fill(w3.data().begin(), w3.data().end(), 0.0f);
  std::fill(w1.data().begin(), w1.data().end(), 0.0f);
  for (std::size_t c = 0; c < 4; ++c) {
    w3[(c * 4 + c) * 9 + 4] = 1.0f;
    w1[c * 4 + c] = 1.0f;
    w1[(c + 4) * 4 + c] = 1.0f;
  }
  const Tensor<float> y = st(x);
  const Tensor<float> mp = maxpool2(x);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t p = 0; p < 64; ++p) ASSERT_EQ(y[c * 64 + p], mp[(c % 4) * 64 + p]);
}

TEST(BaseStage, MatchesManualComposition) {
  ParamStore<float> ps(5);
  BaseStage<float> st(ps, "b", 3);
  std::mt19937_64 rng(2);
  const Tensor<float> x = rand_tensor({2, 3, 8, 6}, rng);
  const auto& c3 = st.conv3x3();
  const auto& c1 = st.conv1x1();
  const Tensor<float> manual = maxpool2(conv2d(conv2d(x, c3.weight, c3.bias, 1, 1), c1.weight, c1.bias));
  expect_bitwise_equal(st(x).data(), manual.data());
}

TEST(LdformerStage, ShapeAndParameterFormula) {
  for (std::size_t ci : {2u, 4u, 8u, 32u}) {
    ParamStore<float> ps;
    LdformerStage<float> st(ps, "ld", ci);
    EXPECT_EQ(ps.total_count(), 9 * ci + ci + ci * 2 * ci + 2 * ci);
    ParamStore<float> conv_ps;
    BaseStage<float> conv(conv_ps, "c", ci);
    EXPECT_LT(ps.total_count(), conv_ps.total_count()) << "Ci=" << ci;
  }
  ParamStore<float> ps;
  LdformerStage<float> st(ps, "ld", 4);
  EXPECT_EQ(ps.total_count(), 80u);
  EXPECT_EQ(st(Tensor<float>({1, 4, 16, 16}, 0.1f)).shape(), (Shape{1, 8, 8, 8}));
}

TEST(LdformerStage, MatchesManualComposition) {
  ParamStore<float> ps(6);
  LdformerStage<float> st(ps, "ld", 4);
  std::mt19937_64 rng(3);
  const Tensor<float> x = rand_tensor({1, 4, 8, 8}, rng);
  const auto& dw = st.depthwise();
  const auto& pw = st.pointwise();
  const Tensor<float> manual =
      maxpool2(pointwise_conv2d(depthwise_conv2d(x, dw.weight, dw.bias, 1), pw.weight, pw.bias));
  expect_bitwise_equal(st(x).data(), manual.data());
}

TEST(DetailStage, ShapeAndAttentionRowsSumToOne) {
  ParamStore<float> ps(7);
  DetailStage<float> st(ps, "d", 4, 2);
  std::mt19937_64 rng(4);
  const Tensor<float> x = rand_tensor({1, 4, 16, 16}, rng);
  std::vector<Tensor<float>> maps;
  DetailStage<float>::Options opt;
  opt.attention_capture = &maps;
  EXPECT_EQ(st.forward(x, 4, opt).shape(), (Shape{1, 8, 8, 8}));
  ASSERT_EQ(maps.size(), 1u);
  const Tensor<float>& a = maps[0];
  const std::size_t L = a.dim(2);
  EXPECT_EQ(L, 16u);
  for (std::size_t r = 0; r < a.numel() / L; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < L; ++j) s += a[r * L + j];
    ASSERT_NEAR(s, 1.0, 1e-5);
  }
  EXPECT_THROW(st(x, 5), ConfigError);
}

TEST(DetailStage, AttentionDisabledEqualsMlpAndMerge) {
  ParamStore<float> ps(8);
  DetailStage<float> st(ps, "d", 4, 2);
  std::mt19937_64 rng(5);
  const Tensor<float> x = rand_tensor({2, 4, 8, 8}, rng);
  DetailStage<float>::Options opt;
  opt.attention_enabled = false;
  const Tensor<float> tokens = permute(x, {0, 2, 3, 1});
  const Tensor<float> manual = st.merge(add(tokens, st.mlp(tokens)));
  expect_bitwise_equal(st.forward(x, 4, opt).data(), manual.data());
}

TEST(RgbFuse, AbsorbingAndBiasOnlyCases) {
  ParamStore<float> ps(9);
  RgbFuse<float> fuse(ps, "f", 4);
  Tensor<float> bias = fuse.conv().bias;
  for (std::size_t c = 0; c < 4; ++c) bias[c] = 0.1f * static_cast<float>(c + 1);
  std::mt19937_64 rng(6);
  const Tensor<float> d = rand_tensor({1, 4, 3, 3}, rng);
  const Tensor<float> zero({1, 4, 3, 3});
  const auto& conv = fuse.conv();
  expect_bitwise_equal(fuse(d, zero).data(), conv2d(concat<float>({d, zero}, 1), conv.weight, conv.bias).data());
  const Tensor<float> y = fuse(zero, zero);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(y[c * 9 + p], bias[c]);
}

TEST(RgbFuse, MatchesManualCompositionAndIsSymmetric) {
  ParamStore<float> ps(10);
  RgbFuse<float> fuse(ps, "f", 3);
  std::mt19937_64 rng(7);
  const Tensor<float> a = rand_tensor({2, 3, 4, 4}, rng), b = rand_tensor({2, 3, 4, 4}, rng);
  const auto& conv = fuse.conv();
  const Tensor<float> manual = conv2d(concat<float>({add(a, b), mul(a, b)}, 1), conv.weight, conv.bias);
  expect_bitwise_equal(fuse(a, b).data(), manual.data());
  // Both terms commute, so swapping the inputs leaves the output unchanged.
  expect_bitwise_equal(fuse(b, a).data(), fuse(a, b).data());
  // Swapping the concat order with correspondingly permuted 1×1 weights
  // reproduces the output.
  Tensor<float> wp({3, 6, 1, 1});
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 6; ++i) wp[o * 6 + i] = conv.weight[o * 6 + (i + 3) % 6];
  const Tensor<float> swapped = conv2d(concat<float>({mul(b, a), add(b, a)}, 1), wp, conv.bias);
  for (std::size_t i = 0; i < swapped.numel(); ++i) EXPECT_NEAR(swapped[i], manual[i], 1e-6f);
}

TEST(Encoder, PyramidContractAcrossWidthsAndSizes) {
  for (std::size_t C : {8u, 32u})
    for (std::size_t hw : {32u, 64u, 96u}) {
      EncoderConfig cfg;
      cfg.base_channels = C;
      cfg.input_h = cfg.input_w = hw;
      ParamStore<float> ps(1);
      Encoder<float> enc(cfg, ps);
      NoGradGuard ng;
      const auto f = enc.encode(Tensor<float>({1, 3, hw, hw}, 0.5f), Tensor<float>({1, 1, hw, hw}, 0.5f));
      EXPECT_NO_THROW(f.rgb.check_contract(1, C, hw, hw));
      EXPECT_NO_THROW(f.depth.check_contract(1, C, hw, hw));
      EXPECT_NO_THROW(f.detail.check_contract(1, C, hw, hw));
      ASSERT_TRUE(f.base.has_value());
      EXPECT_NO_THROW(f.base->check_contract(1, C, hw, hw));
    }
}

TEST(Encoder, SixtyFourByThirtyTwoChannelStageShapes) {
  EncoderConfig cfg;
  ParamStore<float> ps(2);
  Encoder<float> enc(cfg, ps);
  NoGradGuard ng;
  const auto f = enc.encode(Tensor<float>({1, 3, 64, 64}, 0.5f), Tensor<float>({1, 1, 64, 64}, 0.5f));
  const std::vector<Shape> want{{1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}, {1, 256, 2, 2}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(f.rgb[i].shape(), want[i]);
    EXPECT_EQ(f.depth[i].shape(), want[i]);
    EXPECT_EQ((*f.base)[i].shape(), want[i]);
  }
}

TEST(Encoder, DisabledBaseBranchPassesDetailThrough) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  cfg.input_h = cfg.input_w = 32;
  cfg.base_branch_enabled = false;
  ParamStore<float> ps(3);
  Encoder<float> enc(cfg, ps);
  EXPECT_EQ(ps.count_with_prefix("base"), 0u);
  std::mt19937_64 rng(8);
  const auto f = enc.encode(rand_tensor({1, 3, 32, 32}, rng, 0, 1), rand_tensor({1, 1, 32, 32}, rng, 0, 1));
  EXPECT_FALSE(f.base.has_value());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f.rgb[i].impl(), f.detail[i].impl());
}

TEST(Encoder, DepthKindsDifferOnlyInDepthBranch) {
  EncoderConfig ld, oc;
  ld.base_channels = oc.base_channels = 8;
  ld.input_h = ld.input_w = oc.input_h = oc.input_w = 32;
  oc.depth_encoder_kind = DepthEncoderKind::ordinary_conv;
  ParamStore<float> ps_ld(4), ps_oc(4);
  Encoder<float> e_ld(ld, ps_ld), e_oc(oc, ps_oc);
  EXPECT_EQ(ps_ld.count_with_prefix("detail"), ps_oc.count_with_prefix("detail"));
  EXPECT_EQ(ps_ld.count_with_prefix("base"), ps_oc.count_with_prefix("base"));
  EXPECT_LT(ps_ld.count_with_prefix("ldformer"), ps_oc.count_with_prefix("depthconv"));
  NoGradGuard ng;
  const Tensor<float> rgb({1, 3, 32, 32}, 0.2f), depth({1, 1, 32, 32}, 0.4f);
  const auto a = e_ld.encode(rgb, depth), b = e_oc.encode(rgb, depth);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.depth[i].shape(), b.depth[i].shape());
}

TEST(Encoder, RejectsBadInputs) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  ParamStore<float> ps;
  Encoder<float> enc(cfg, ps);
  EXPECT_THROW(enc.encode(Tensor<float>({1, 3, 48, 64}), Tensor<float>({1, 1, 48, 64})), ShapeError);
  EXPECT_THROW(enc.encode(Tensor<float>({1, 3, 64, 64}), Tensor<float>({1, 1, 32, 32})), ShapeError);
  EncoderConfig odd;
  odd.base_channels = 7;
  EXPECT_THROW(odd.validate(), ConfigError);
  EncoderConfig bad_hw;
  bad_hw.input_h = 40;
  EXPECT_THROW(bad_hw.validate(), ConfigError);
}

TEST(Encoder, EffectiveWindowTilesEveryStage) {
  EncoderConfig cfg;
  cfg.detail_window = 4;
  EXPECT_EQ(cfg.effective_window(16, 16), 4u);
  EXPECT_EQ(cfg.effective_window(6, 6), 2u);
  EXPECT_EQ(cfg.effective_window(2, 2), 2u);
  EXPECT_EQ(cfg.effective_window(24, 24), 4u);
}

TEST(Encoder, StageGradientsMatchFiniteDifferences) {
  std::size_t subjects = 0;
  for (const auto& f : gradcheck_suite()) {
    if (f.name != "stem" && f.name != "base_stage" && f.name != "ldformer_stage" &&
        f.name != "detail_stage" && f.name != "rgb_fuse")
      continue;
    ++subjects;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const GradCheckReport r = run_gradcheck(f, seed);
      EXPECT_TRUE(r.ok()) << f.name << " seed " << seed << ": " << r.failures.size() << " mismatches";
      EXPECT_GT(r.checked, 0u);
    }
  }
  EXPECT_EQ(subjects, 5u);
}
