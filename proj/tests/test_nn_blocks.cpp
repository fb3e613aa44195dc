#include <cmath>
#include <filesystem>

#include "test_support.hpp"

using namespace hdbf;
using namespace hdbf::testing;

namespace {

/// Integer-valued tensor: products and sums stay exact in float, so
/// algebraically equal compositions compare bit-for-bit.
Tensor<float> int_tensor(Shape shape, std::mt19937_64& rng, int lo = -2, int hi = 2) {
  std::uniform_int_distribution<int> d(lo, hi);
  std::vector<float> v(numel_of(shape));
  for (auto& x : v) x = static_cast<float>(d(rng));
  return Tensor<float>(std::move(shape), std::move(v));
}

}  // namespace

TEST(Conv2d, MatchesNaiveLoopOnRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(0, 1000);
  int checked = 0;
  for (int trial = 0; checked < 30; ++trial) {
    const std::size_t N = 1 + pick(rng) % 2, Cin = 1 + pick(rng) % 4, Cout = 1 + pick(rng) % 5;
    const std::size_t k = std::vector<std::size_t>{1, 3, 5, 7}[pick(rng) % 4];
    const std::size_t stride = 1 + pick(rng) % 2, pad = pick(rng) % (k / 2 + 1);
    const std::size_t pad_end = pick(rng) % 2 ? pad : (pad ? pad - 1 : 0);
    const std::size_t H = k + pick(rng) % 6, W = k + pick(rng) % 6;
    if ((H + pad + pad_end - k) % stride || (W + pad + pad_end - k) % stride) continue;
    const Tensor<float> x = rand_tensor({N, Cin, H, W}, rng);
    const Tensor<float> w = rand_tensor({Cout, Cin, k, k}, rng);
    const Tensor<float> b = rand_tensor({Cout}, rng);
    const Tensor<float> y = conv2d(x, w, b, stride, pad, static_cast<long>(pad_end));
    const auto ref = naive_conv2d(x, w, b, stride, pad, pad_end);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
      ASSERT_EQ(y[i], ref[i]) << "shape " << to_string(x.shape()) << " k" << k << " s" << stride
                              << " p" << pad << "/" << pad_end << " at " << i;
    ++checked;
  }
}

TEST(Conv2d, IdentityPermutationOneByOne) {
  std::mt19937_64 rng(12);
  const Tensor<float> x = rand_tensor({2, 3, 4, 5}, rng);
  Tensor<float> w({3, 3, 1, 1});
  w[0 * 3 + 0] = w[1 * 3 + 1] = w[2 * 3 + 2] = 1;
  expect_bitwise_equal(conv2d(x, w, Tensor<float>({3})).data(), x.data());
}

TEST(Conv2d, ImpulseResponseOfOnesKernel) {
  Tensor<float> x({1, 1, 5, 5});
  x[2 * 5 + 2] = 1;
  const Tensor<float> y = conv2d(x, Tensor<float>({1, 1, 3, 3}, 1.0f), Tensor<float>({1}), 1, 1);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c)
      EXPECT_EQ(y[r * 5 + c], (r >= 1 && r <= 3 && c >= 1 && c <= 3) ? 1.0f : 0.0f);
}

TEST(Conv2d, NonIntegralExtentIsShapeError) {
  EXPECT_THROW(conv2d(Tensor<float>({1, 1, 6, 6}), Tensor<float>({1, 1, 3, 3}), Tensor<float>({1}), 2, 0),
               ShapeError);
}

TEST(Conv2d, MacCounterMatchesFormula) {
  std::mt19937_64 rng(13);
  const Tensor<float> x = rand_tensor({2, 3, 8, 8}, rng);
  OpCounter counter;
  {
    CountingScope scope(counter);
    conv2d(x, rand_tensor({4, 3, 3, 3}, rng), rand_tensor({4}, rng), 2, 1, 0);
  }
  EXPECT_EQ(counter.get("conv2d"), 2u * 4 * 4 * 4 * 3 * 3 * 3);
}

TEST(Depthwise, CenterTapIsIdentity) {
  std::mt19937_64 rng(14);
  const Tensor<float> x = rand_tensor({2, 3, 5, 4}, rng);
  Tensor<float> w({3, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w[c * 9 + 4] = 1;
  expect_bitwise_equal(depthwise_conv2d(x, w, Tensor<float>({3})).data(), x.data());
}

TEST(Depthwise, ChannelsAreIndependent) {
  std::mt19937_64 rng(15);
  Tensor<float> x = rand_tensor({1, 3, 5, 5}, rng);
  const Tensor<float> w = rand_tensor({3, 1, 3, 3}, rng), b = rand_tensor({3}, rng);
  const Tensor<float> y0 = depthwise_conv2d(x, w, b);
  for (std::size_t p = 0; p < 25; ++p) x[25 + p] += 1.0f;  // perturb channel 1
  const Tensor<float> y1 = depthwise_conv2d(x, w, b);
  for (std::size_t c = 0; c < 3; ++c) {
    bool changed = false;
    for (std::size_t p = 0; p < 25; ++p) changed = changed || y0[c * 25 + p] != y1[c * 25 + p];
    EXPECT_EQ(changed, c == 1) << "channel " << c;
  }
}

TEST(Depthwise, EqualsBlockDiagonalDenseConv) {
  std::mt19937_64 rng(16);
  const std::size_t C = 4;
  const Tensor<float> x = rand_tensor({2, C, 6, 5}, rng);
  const Tensor<float> w = rand_tensor({C, 1, 3, 3}, rng), b = rand_tensor({C}, rng);
  Tensor<float> dense({C, C, 3, 3});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < 9; ++t) dense[(c * C + c) * 9 + t] = w[c * 9 + t];
  const Tensor<float> y = depthwise_conv2d(x, w, b);
  const Tensor<float> ref = conv2d(x, dense, b, 1, 1);
  expect_bitwise_equal(y.data(), ref.data());
}

TEST(Depthwise, PointwiseCompositionEqualsFactorisedDenseKernel) {
  std::mt19937_64 rng(17);
  const std::size_t Cin = 3, Cout = 5;
  const Tensor<float> x = int_tensor({2, Cin, 7, 6}, rng);
  const Tensor<float> dw = int_tensor({Cin, 1, 3, 3}, rng), db = int_tensor({Cin}, rng);
  const Tensor<float> pw = int_tensor({Cout, Cin, 1, 1}, rng), pb = int_tensor({Cout}, rng);
  Tensor<float> dense({Cout, Cin, 3, 3}), bias({Cout});
  for (std::size_t o = 0; o < Cout; ++o) {
    bias[o] = pb[o];
    for (std::size_t i = 0; i < Cin; ++i) {
      bias[o] += pw[o * Cin + i] * db[i];
      for (std::size_t t = 0; t < 9; ++t) dense[(o * Cin + i) * 9 + t] = pw[o * Cin + i] * dw[i * 9 + t];
    }
  }
  const Tensor<float> composed = pointwise_conv2d(depthwise_conv2d(x, dw, db), pw, pb);
  expect_bitwise_equal(composed.data(), conv2d(x, dense, bias, 1, 1).data());
}

TEST(Pointwise, IdentityAndPerPixelMatmul) {
  std::mt19937_64 rng(18);
  const Tensor<float> x = int_tensor({2, 3, 4, 4}, rng);
  Tensor<float> eye({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1;
  expect_bitwise_equal(pointwise_conv2d(x, eye, Tensor<float>({3})).data(), x.data());

  const Tensor<float> w = int_tensor({5, 3, 1, 1}, rng), b = int_tensor({5}, rng);
  const Tensor<float> y = pointwise_conv2d(x, w, b);
  // Tokens as rows: (N·H·W)×Cin times Cin×Cout.
  const Tensor<float> tokens = reshape(permute(x, {0, 2, 3, 1}), {32, 3});
  const Tensor<float> wt = reshape(permute(reshape(w, {5, 3}), {1, 0}), {3, 5});
  const Tensor<float> mm = matmul(tokens, wt);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 16; ++p)
      for (std::size_t o = 0; o < 5; ++o)
        EXPECT_EQ(y[(n * 5 + o) * 16 + p], mm[(n * 16 + p) * 5 + o] + b[o]);
}

TEST(Pointwise, FlopsFormula) {
  CostGraph g;
  const auto x = g.input({2, 4, 8, 8});
  g.conv(x, 6, 1, 1, 0);
  EXPECT_EQ(g.flops(), 2u * 2 * 8 * 8 * 4 * 6);
}

TEST(Maxpool, ConstantAndSingleWindow) {
  const Tensor<float> c = maxpool2(Tensor<float>({1, 2, 4, 6}, 3.5f));
  EXPECT_EQ(c.shape(), (Shape{1, 2, 2, 3}));
  for (float v : c.data()) EXPECT_EQ(v, 3.5f);
  EXPECT_EQ(maxpool2(Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}))[0], 4.0f);
}

TEST(Maxpool, GradientWithDistinctValues) {
  Tensor<double> x({1, 1, 4, 4}, std::vector<double>(16), true);
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>((i * 7) % 16);
  auto f = [](const Tensor<double>& v) { return sum(mul(maxpool2(v), maxpool2(v))); };
  backward(f(x));
  const Tensor<double> fd = finite_diff_grad<double>(f, x);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(x.grad()[i], fd[i], 1e-6);
}

TEST(AdaptiveAvgPool, IdentityConstantAndDirectBins) {
  std::mt19937_64 rng(19);
  const Tensor<float> x6 = rand_tensor({1, 2, 6, 6}, rng);
  expect_bitwise_equal(adaptive_avgpool(x6, 6, 6).data(), x6.data());
  const Tensor<float> pooled = adaptive_avgpool(Tensor<float>({1, 1, 12, 12}, 0.75f), 6, 6);
  for (float v : pooled.data()) EXPECT_EQ(v, 0.75f);

  for (const auto& [H, W] : std::vector<std::pair<std::size_t, std::size_t>>{{7, 7}, {13, 9}, {4, 4}, {32, 32}}) {
    const Tensor<float> x = rand_tensor({2, 3, H, W}, rng);
    const Tensor<float> y = adaptive_avgpool(x, 6, 6);
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
          std::size_t r0 = i * H / 6, r1 = (i + 1) * H / 6, c0 = j * W / 6, c1 = (j + 1) * W / 6;
          if (r1 <= r0) r1 = r0 + 1;
          if (c1 <= c0) c1 = c0 + 1;
          float acc = 0;
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = c0; c < c1; ++c) acc += x[(p * H + r) * W + c];
          ASSERT_EQ(y[(p * 6 + i) * 6 + j], acc / static_cast<float>((r1 - r0) * (c1 - c0)));
        }
  }
}

TEST(Bilinear, SameSizeAndConstant) {
  std::mt19937_64 rng(20);
  const Tensor<float> x = rand_tensor({1, 2, 5, 3}, rng);
  expect_bitwise_equal(bilinear_resize(x, 5, 3).data(), x.data());
  const Tensor<float> up = bilinear_resize(Tensor<float>({1, 1, 3, 4}, 2.5f), 7, 9);
  for (float v : up.data()) EXPECT_FLOAT_EQ(v, 2.5f);
}

TEST(Bilinear, TwoToFourHalfPixelWeights) {
  const Tensor<float> y = bilinear_resize(Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}), 4, 4);
  const std::vector<float> want{1.0f, 1.25f, 1.75f, 2.0f,  //
                                1.5f, 1.75f, 2.25f, 2.5f,  //
                                2.5f, 2.75f, 3.25f, 3.5f,  //
                                3.0f, 3.25f, 3.75f, 4.0f};
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[i], want[i]) << i;
}

TEST(Linear, IdentityAndMatmulOracle) {
  std::mt19937_64 rng(21);
  const Tensor<float> x = rand_tensor({2, 3, 4}, rng);
  Tensor<float> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1;
  expect_bitwise_equal(linear(x, eye, Tensor<float>({4})).data(), x.data());

  const Tensor<float> w = rand_tensor({4, 5}, rng), b = rand_tensor({5}, rng);
  const Tensor<float> y = linear(x, w, b);
  const Tensor<float> mm = matmul(reshape(x, {6, 4}), w);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 5}));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t o = 0; o < 5; ++o) EXPECT_FLOAT_EQ(y[t * 5 + o], mm[t * 5 + o] + b[o]);
}

TEST(LayerNorm, StandardisesTokensAndZeroesConstants) {
  std::mt19937_64 rng(22);
  const Tensor<float> x = rand_tensor({3, 8}, rng, -5, 5);
  const Tensor<float> y = layernorm(x, Tensor<float>({8}, 1.0f), Tensor<float>({8}));
  for (std::size_t t = 0; t < 3; ++t) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[t * 8 + c];
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[t * 8 + c] - m) * (y[t * 8 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 8, 1.0, 1e-3);
  }
  const Tensor<float> flat = layernorm(Tensor<float>({2, 4}, 3.0f), Tensor<float>({4}, 1.0f), Tensor<float>({4}));
  for (float v : flat.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ParamStoreTest, RegistrationInitAndPrefixCounts) {
  ParamStore<float> ps(5);
  const auto w = ps.add("a.conv.weight", {4, 3, 3, 3}, Init::kaiming_uniform, 27);
  ps.add("a.conv.bias", {4}, Init::zeros);
  ps.add("ab.norm.gamma", {4}, Init::ones);
  EXPECT_THROW(ps.add("a.conv.bias", {4}, Init::zeros), ConfigError);
  const float bound = 1.0f / std::sqrt(27.0f);
  for (float v : w.data()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(ps.total_count(), 108u + 4 + 4);
  EXPECT_EQ(ps.count_with_prefix("a"), 112u);  // "ab" is a different module
  EXPECT_EQ(ps.get("ab.norm.gamma")[2], 1.0f);
  EXPECT_TRUE(w.requires_grad());
}

TEST(ParamStoreTest, SerializeRoundTripAndLayoutMismatch) {
  ParamStore<float> a(1), b(2), c(3);
  a.add("w", {2, 3}, Init::kaiming_uniform, 3);
  b.add("w", {2, 3}, Init::kaiming_uniform, 3);
  c.add("w", {3, 2}, Init::kaiming_uniform, 3);
  const auto bytes = a.serialize();
  b.deserialize(bytes);
  EXPECT_EQ(a.get("w").values(), b.get("w").values());
  EXPECT_THROW(c.deserialize(bytes), std::exception);

  const auto path = (std::filesystem::temp_directory_path() / "hdbf_ps_roundtrip.bin").string();
  a.save(path);
  ParamStore<float> d(9);
  d.add("w", {2, 3}, Init::zeros);
  d.load(path);
  EXPECT_EQ(a.get("w").values(), d.get("w").values());
  std::filesystem::remove(path);
}

TEST(ParamStoreTest, ShapesOnlyEnumeratesWithoutStorage) {
  ParamStore<float> ps(0, ParamStore<float>::Storage::shapes_only);
  ps.add("x.weight", {1000, 1000, 3, 3}, Init::kaiming_uniform, 9000);
  EXPECT_EQ(ps.total_count(), 9'000'000u);
  EXPECT_FALSE(ps.tensors()[0].defined());
}

TEST(Layers, RegisterExpectedParameterCounts) {
  ParamStore<float> ps;
  Conv2dLayer<float>(ps, "pw", 4, 8, 1);
  EXPECT_EQ(ps.count_with_prefix("pw"), 4u * 8 + 8);
  DepthwiseLayer<float>(ps, "dw", 4, 3);
  EXPECT_EQ(ps.count_with_prefix("dw"), 9u * 4 + 4);
  LinearLayer<float>(ps, "fc", 6, 5);
  EXPECT_EQ(ps.count_with_prefix("fc"), 6u * 5 + 5);
  LayerNormLayer<float>(ps, "ln", 7);
  EXPECT_EQ(ps.count_with_prefix("ln"), 14u);
}

TEST(Layers, GradientChecksPass) {
  for (const auto& f : gradcheck_suite()) {
    if (f.name == "model" || f.name == "miim" || f.name == "detail_stage") continue;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const GradCheckReport r = run_gradcheck(f, seed);
      EXPECT_TRUE(r.ok()) << f.name << " seed " << seed << ": " << r.failures.size() << " mismatches";
      EXPECT_GT(r.checked, 0u);
    }
  }
}
