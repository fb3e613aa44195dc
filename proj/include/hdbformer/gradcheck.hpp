#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hdbformer/segmodel.hpp"

namespace hdbf {

/// A differentiable function of the tensors registered in `store`. Inputs are
/// registered as ordinary entries so they are checked like parameters.
template <typename T>
struct GradSubject {
  std::shared_ptr<void> owner;  // keeps modules referenced by `fn` alive
  ParamStore<T>* store = nullptr;
  std::function<Tensor<T>()> fn;
};

struct GradCheckOptions {
  std::size_t coords_per_tensor = 5;
  double rel_tol = 1e-3;
  double abs_tol = 1e-4;
  double fd_eps = 1e-6;  // central-difference step in double precision
};

struct GradMismatch {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0, numeric = 0;
};

struct GradCheckReport {
  std::string subject;
  std::uint64_t seed = 0;
  std::size_t checked = 0;
  double max_abs_err = 0;
  std::vector<GradMismatch> failures;
  bool ok() const { return failures.empty(); }
};

namespace gradcheck_detail {

template <typename T>
Tensor<T> add_input(ParamStore<T>& ps, const std::string& name, Shape shape, std::mt19937_64& rng,
                    double lo = -1.0, double hi = 1.0) {
  Tensor<T> t = ps.add(name, std::move(shape), Init::zeros);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

/// Perturbs every registered value by a small random amount so that zero or
/// unit initializations (biases, norm scales) do not sit on special points.
template <typename T>
void jitter(ParamStore<T>& ps, std::mt19937_64& rng, double amount = 0.1) {
  std::uniform_real_distribution<double> d(-amount, amount);
  for (Tensor<T> t : ps.tensors()) {
    auto data = t.data();
    for (auto& v : data) v = static_cast<T>(static_cast<double>(v) + d(rng));
  }
}

template <typename T>
struct Holder {
  ParamStore<T> ps;
  explicit Holder(std::uint64_t seed) : ps(seed) {}
};

}  // namespace gradcheck_detail

/// Factory producing the same subject for float and double from a seed.
struct GradSubjectFactory {
  std::string name;
  std::function<GradSubject<float>(std::uint64_t)> make_f;
  std::function<GradSubject<double>(std::uint64_t)> make_d;
};

/// Builds a factory from a generic lambda `(ParamStore<T>&, rng) -> fn`.
template <typename Build>
GradSubjectFactory make_factory(std::string name, Build build) {
  auto make = [build](auto tag, std::uint64_t seed) {
    using T = decltype(tag);
    auto h = std::make_shared<gradcheck_detail::Holder<T>>(seed);
    std::mt19937_64 rng(seed ^ 0xA5A5A5A5ull);
    GradSubject<T> s;
    s.fn = build(h->ps, rng);
    gradcheck_detail::jitter(h->ps, rng);
    s.store = &h->ps;
    s.owner = h;
    return s;
  };
  return {std::move(name), [make](std::uint64_t s) { return make(float{}, s); },
          [make](std::uint64_t s) { return make(double{}, s); }};
}

/// Compares float reverse-mode gradients of sum(fn() ⊙ R) against double
/// central differences evaluated at the same (float-rounded) point.
inline GradCheckReport run_gradcheck(const GradSubjectFactory& f, std::uint64_t seed,
                                     const GradCheckOptions& opt = {}) {
  GradSubject<float> sf = f.make_f(seed);
  GradSubject<double> sd = f.make_d(seed);
  sd.store->copy_values_from(*sf.store);

  const Tensor<float> out_f = sf.fn();
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 17);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> readout(out_f.numel());
  for (auto& r : readout) r = unit(rng);

  Tensor<float> rf(out_f.shape(), std::vector<float>(readout.begin(), readout.end()));
  sf.store->zero_grads();
  backward(sum(mul(out_f, rf)));

  auto objective = [&]() {
    NoGradGuard no_grad;
    const Tensor<double> o = sd.fn();
    double acc = 0;
    for (std::size_t i = 0; i < o.numel(); ++i) acc += o[i] * readout[i];
    return acc;
  };

  GradCheckReport rep;
  rep.subject = f.name;
  rep.seed = seed;
  const auto& infos = sf.store->infos();
  for (std::size_t t = 0; t < infos.size(); ++t) {
    const Tensor<float>& pf = sf.store->tensors()[t];
    Tensor<double> pd = sd.store->tensors()[t];  // handle shared with the store
    const auto grad = pf.grad();
    const std::size_t n = pf.numel();
    std::vector<std::size_t> coords;
    if (n <= opt.coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < opt.coords_per_tensor; ++i) coords.push_back(pick(rng));
    }
    for (const std::size_t i : coords) {
      auto data = pd.data();
      const double x0 = data[i];
      data[i] = x0 + opt.fd_eps;
      const double up = objective();
      data[i] = x0 - opt.fd_eps;
      const double down = objective();
      data[i] = x0;
      const double numeric = (up - down) / (2 * opt.fd_eps);
      const double analytic = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      const double err = std::abs(analytic - numeric);
      rep.max_abs_err = std::max(rep.max_abs_err, err);
      ++rep.checked;
      if (!(err <= std::max(opt.rel_tol * std::abs(numeric), opt.abs_tol)))
        rep.failures.push_back({infos[t].name, i, analytic, numeric});
    }
  }
  return rep;
}

/// Every op and block with trainable or input gradients, plus the small
/// end-to-end model (32×32 input, C = 8, K = 3).
inline std::vector<GradSubjectFactory> gradcheck_suite() {
  using gradcheck_detail::add_input;
  std::vector<GradSubjectFactory> s;

  s.push_back(make_factory("add_mul_sub_scale", [](auto& ps, std::mt19937_64& rng) {
    auto a = add_input(ps, "a", {2, 3, 4}, rng);
    auto b = add_input(ps, "b", {2, 3, 4}, rng);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>([=] { return scale(sub(mul(a, b), add(a, b)), T(0.5)); });
  }));
  s.push_back(make_factory("gelu", [](auto& ps, std::mt19937_64& rng) {
    auto x = add_input(ps, "x", {3, 7}, rng, -3, 3);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>([=] { return gelu(x); });
  }));
  s.push_back(make_factory("softmax", [](auto& ps, std::mt19937_64& rng) {
    auto x = add_input(ps, "x", {2, 5, 3}, rng, -2, 2);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>([=] { return add(softmax(x, 1), softmax(x, -1)); });
  }));
  s.push_back(make_factory("bmm", [](auto& ps, std::mt19937_64& rng) {
    auto a = add_input(ps, "a", {2, 4, 3}, rng);
    auto b = add_input(ps, "b", {2, 4, 5}, rng);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>([=] { return bmm(a, b, true, false); });
  }));
  s.push_back(make_factory("matmul_reshape_permute", [](auto& ps, std::mt19937_64& rng) {
    auto a = add_input(ps, "a", {2, 3, 4}, rng);
    auto b = add_input(ps, "b", {3, 5}, rng);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>(
        [=] { return matmul(reshape(permute(a, {0, 2, 1}), {8, 3}), b); });
  }));
  s.push_back(make_factory("concat_slice_flip", [](auto& ps, std::mt19937_64& rng) {
    auto a = add_input(ps, "a", {1, 2, 3, 4}, rng);
    auto b = add_input(ps, "b", {1, 3, 3, 4}, rng);
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    return std::function<Tensor<T>()>(
        [=] { return flip_last(slice(concat<T>({a, b}, 1), 1, 1, 4)); });
  }));
  s.push_back(make_factory("conv2d", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {2, 3, 8, 6}, rng);
    Conv2dLayer<T> c(ps, "conv", 3, 4, 3, 2, 1, 0);
    return std::function<Tensor<T>()>([=] { return c(x); });
  }));
  s.push_back(make_factory("conv2d_1x1", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {2, 3, 4, 5}, rng);
    Conv2dLayer<T> c(ps, "conv", 3, 4, 1);
    return std::function<Tensor<T>()>([=] { return c(x); });
  }));
  s.push_back(make_factory("depthwise", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {2, 3, 5, 6}, rng);
    DepthwiseLayer<T> c(ps, "dw", 3, 3);
    return std::function<Tensor<T>()>([=] { return c(x); });
  }));
  s.push_back(make_factory("maxpool2", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {1, 2, 4, 6}, rng);
    return std::function<Tensor<T>()>([=] { return maxpool2(x); });
  }));
  s.push_back(make_factory("adaptive_avgpool", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {1, 2, 7, 9}, rng);
    return std::function<Tensor<T>()>([=] { return adaptive_avgpool(x, 3, 4); });
  }));
  s.push_back(make_factory("bilinear", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {1, 2, 3, 4}, rng);
    return std::function<Tensor<T>()>(
        [=] { return concat<T>({reshape(bilinear_resize(x, 7, 5), {70}), reshape(bilinear_resize(x, 2, 2), {8})}, 0); });
  }));
  s.push_back(make_factory("linear", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {2, 3, 4}, rng);
    auto m = add_input(ps, "map", {2, 4, 3, 2}, rng);
    LinearLayer<T> l(ps, "fc", 4, 5);
    return std::function<Tensor<T>()>(
        [=] { return concat<T>({reshape(l(x), {30}), reshape(l.on_map(m), {60})}, 0); });
  }));
  s.push_back(make_factory("layernorm", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "x", {2, 4, 3, 2}, rng, -2, 2);
    LayerNormLayer<T> n(ps, "norm", 4);
    LayerNormLayer<T> n2(ps, "norm_last", 2);
    return std::function<Tensor<T>()>([=] { return add(n(x, 1), n2(x, -1)); });
  }));
  s.push_back(make_factory("cross_entropy", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto z = add_input(ps, "logits", {2, 3, 2, 3}, rng, -2, 2);
    std::vector<std::uint8_t> labels{0, 1, 2, 255, 1, 0, 2, 2, 1, 0, 255, 1};
    return std::function<Tensor<T>()>([=] { return cross_entropy(z, std::span<const std::uint8_t>(labels)); });
  }));
  s.push_back(make_factory("stem", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "img", {1, 3, 8, 8}, rng, 0, 1);
    Stem<T> st(ps, "stem", 3, 4);
    return std::function<Tensor<T>()>([=] { return st(x); });
  }));
  s.push_back(make_factory("base_stage", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "f", {1, 4, 4, 4}, rng);
    BaseStage<T> st(ps, "stage", 4);
    return std::function<Tensor<T>()>([=] { return st(x); });
  }));
  s.push_back(make_factory("ldformer_stage", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "f", {1, 4, 4, 4}, rng);
    LdformerStage<T> st(ps, "stage", 4);
    return std::function<Tensor<T>()>([=] { return st(x); });
  }));
  s.push_back(make_factory("detail_stage", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto x = add_input(ps, "f", {1, 4, 4, 4}, rng);
    DetailStage<T> st(ps, "stage", 4, 2);
    return std::function<Tensor<T>()>([=] { return st(x, 2); });
  }));
  s.push_back(make_factory("rgb_fuse", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto a = add_input(ps, "detail", {1, 4, 3, 3}, rng);
    auto b = add_input(ps, "base", {1, 4, 3, 3}, rng);
    RgbFuse<T> f(ps, "fuse", 4);
    return std::function<Tensor<T>()>([=] { return f(a, b); });
  }));
  s.push_back(make_factory("gfa", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto a = add_input(ps, "main", {1, 4, 8, 8}, rng);
    auto b = add_input(ps, "minor", {1, 4, 8, 8}, rng);
    Gfa<T> g(ps, "gfa", 4, 2, true);
    return std::function<Tensor<T>()>([=] { return g(a, b, true); });
  }));
  s.push_back(make_factory("gfa_unpooled", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto a = add_input(ps, "main", {1, 4, 4, 4}, rng);
    auto b = add_input(ps, "minor", {1, 4, 4, 4}, rng);
    Gfa<T> g(ps, "gfa", 4, 1, false);
    return std::function<Tensor<T>()>([=] { return g(a, b, false); });
  }));
  s.push_back(make_factory("lfa", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto a = add_input(ps, "main", {1, 4, 5, 5}, rng);
    auto b = add_input(ps, "minor", {1, 4, 5, 5}, rng);
    Lfa<T> l(ps, "lfa", 4, 7);
    return std::function<Tensor<T>()>([=] { return l(a, b); });
  }));
  s.push_back(make_factory("miim", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    auto a = add_input(ps, "rgb", {1, 4, 6, 6}, rng);
    auto b = add_input(ps, "depth", {1, 4, 6, 6}, rng);
    MiimConfig cfg;
    cfg.enable_gfa2 = true;
    Miim<T> m(ps, "miim", 4, cfg);
    return std::function<Tensor<T>()>([=] {
      const auto out = m(a, b);
      return concat<T>({out.f_rgb, out.f_depth}, 1);
    });
  }));
  s.push_back(make_factory("decoder", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    std::vector<Tensor<T>> feats;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t c = 2u << i, e = 8u >> i;
      feats.push_back(add_input(ps, "f" + std::to_string(i + 1), {1, c, e, e}, rng));
    }
    Decoder<T> d(ps, "decoder", 30, 3);
    return std::function<Tensor<T>()>([=] { return d(feats); });
  }));
  s.push_back(make_factory("model", [](auto& ps, std::mt19937_64& rng) {
    using T = typename std::remove_reference_t<decltype(ps)>::value_type;
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.encoder.base_channels = 8;
    cfg.encoder.input_h = cfg.encoder.input_w = 32;
    auto model = std::make_shared<HdbFormer<T>>(cfg, ps.seed());
    // The model owns its store; mirror it into `ps` so the checker sees one
    // registry. The tensors are shared handles, not copies.
    for (std::size_t i = 0; i < model->params().size(); ++i)
      ps.adopt(model->params().infos()[i].name, model->params().tensors()[i]);
    auto rgb = add_input(ps, "rgb", {1, 3, 32, 32}, rng, 0, 1);
    auto depth = add_input(ps, "depth", {1, 1, 32, 32}, rng, 0, 1);
    return std::function<Tensor<T>()>([=] { return model->logits(rgb, depth); });
  }));
  return s;
}

inline std::vector<std::string> gradcheck_subject_names() {
  std::vector<std::string> out;
  for (const auto& f : gradcheck_suite()) out.push_back(f.name);
  return out;
}

}  // namespace hdbf
