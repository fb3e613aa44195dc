#pragma once

#include <string>

#include "hdbformer/nn.hpp"
#include "hdbformer/param_store.hpp"

namespace hdbf {

// Thin parameter-owning wrappers. Each registers "<name>.weight"/"<name>.bias"
// (or gamma/beta) in the store and forwards to the corresponding op.

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;
  long pad_end = -1;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k, std::size_t stride_ = 1, std::size_t pad_ = 0, long pad_end_ = -1)
      : stride(stride_), pad(pad_), pad_end(pad_end_) {
    weight = ps.add(name + ".weight", {cout, cin, k, k}, Init::kaiming_uniform, cin * k * k);
    bias = ps.add(name + ".bias", {cout}, Init::zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, pad, pad_end);
  }
};

template <typename T>
struct DepthwiseLayer {
  Tensor<T> weight, bias;
  std::size_t pad = 1;

  DepthwiseLayer() = default;
  DepthwiseLayer(ParamStore<T>& ps, const std::string& name, std::size_t channels, std::size_t k)
      : pad(k / 2) {
    weight = ps.add(name + ".weight", {channels, 1, k, k}, Init::kaiming_uniform, k * k);
    bias = ps.add(name + ".bias", {channels}, Init::zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return depthwise_conv2d(x, weight, bias, pad); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight, bias;

  LinearLayer() = default;
  LinearLayer(ParamStore<T>& ps, const std::string& name, std::size_t din, std::size_t dout) {
    weight = ps.add(name + ".weight", {din, dout}, Init::kaiming_uniform, din);
    bias = ps.add(name + ".bias", {dout}, Init::zeros);
  }

  /// Token layout: last axis is the feature axis.
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  /// N×C×H×W feature map, applied per pixel.
  Tensor<T> on_map(const Tensor<T>& x) const { return linear_channels(x, weight, bias); }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamStore<T>& ps, const std::string& name, std::size_t channels) {
    gamma = ps.add(name + ".gamma", {channels}, Init::ones);
    beta = ps.add(name + ".beta", {channels}, Init::zeros);
  }

  Tensor<T> operator()(const Tensor<T>& x, long axis = -1) const {
    return layernorm(x, gamma, beta, axis);
  }
};

}  // namespace hdbf
