#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hdbformer/tensor.hpp"

namespace hdbf {

enum class Init { kaiming_uniform, zeros, ones };

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t numel() const { return numel_of(shape); }
};

/// Named registry of trainable tensors in registration order. In shapes-only
/// mode entries carry shapes but no storage, which allows enumerating very
/// wide configurations without allocating them.
template <typename T = float>
class ParamStore {
 public:
  using value_type = T;
  enum class Storage { allocate, shapes_only };

  explicit ParamStore(std::uint64_t seed = 0, Storage storage = Storage::allocate)
      : seed_(seed), storage_(storage), rng_(seed) {}

  std::uint64_t seed() const { return seed_; }
  bool allocated() const { return storage_ == Storage::allocate; }

  /// Registers a parameter. Kaiming-uniform draws from U(-b, b) with
  /// b = 1/sqrt(fan_in), the a=sqrt(5) leaky-ReLU gain convention.
  Tensor<T> add(const std::string& name, Shape shape, Init init, std::size_t fan_in = 0) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, infos_.size());
    infos_.push_back({name, shape});
    if (!allocated()) {
      tensors_.emplace_back();
      return {};
    }
    Tensor<T> t(shape, T(0), true);
    switch (init) {
      case Init::zeros: break;
      case Init::ones: std::fill(t.data().begin(), t.data().end(), T(1)); break;
      case Init::kaiming_uniform: {
        if (fan_in == 0) throw ConfigError("kaiming init needs fan_in for " + name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
        break;
      }
    }
    tensors_.push_back(t);
    return t;
  }

  /// Registers an existing tensor handle under `name` without copying it.
  void adopt(const std::string& name, const Tensor<T>& t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, infos_.size());
    infos_.push_back({name, t.shape()});
    tensors_.push_back(t);
  }

  std::size_t size() const { return infos_.size(); }
  const std::vector<ParamInfo>& infos() const { return infos_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return tensors_[it->second];
  }

  std::uint64_t total_count() const {
    std::uint64_t n = 0;
    for (const auto& info : infos_) n += info.numel();
    return n;
  }

  /// Sum of entry sizes inside module `prefix` (whole dotted components only).
  std::uint64_t count_with_prefix(std::string_view prefix) const {
    std::uint64_t n = 0;
    for (const auto& info : infos_) {
      const std::string_view name(info.name);
      const bool inside = prefix.empty() || name == prefix ||
                          (name.size() > prefix.size() && name.substr(0, prefix.size()) == prefix &&
                           name[prefix.size()] == '.');
      if (inside) n += info.numel();
    }
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_)
      if (t.defined()) t.zero_grad();
  }

  /// Copies values by name from a store with an identical layout.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    if (other.size() != size()) {
      throw ConfigError("parameter layouts differ: " + std::to_string(other.size()) + " vs " +
                        std::to_string(size()) + " entries");
    }
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      const auto& name = infos_[i].name;
      Tensor<U> src = other.get(name);
      if (src.shape() != infos_[i].shape) {
        throw ShapeError("parameter " + name + " has shape " + to_string(src.shape()) +
                         ", expected " + to_string(infos_[i].shape));
      }
      auto dst = tensors_[i].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }

  /// Checkpoint: "HDBF1", then per entry u32 name length, UTF-8 name,
  /// u32 rank, u32 extents, raw little-endian f32 data.
  std::vector<char> serialize() const {
    std::vector<char> out(kMagic.begin(), kMagic.end());
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      const auto& info = infos_[i];
      put_u32(out, static_cast<std::uint32_t>(info.name.size()));
      out.insert(out.end(), info.name.begin(), info.name.end());
      put_u32(out, static_cast<std::uint32_t>(info.shape.size()));
      for (auto e : info.shape) put_u32(out, static_cast<std::uint32_t>(e));
      for (T v : tensors_[i].data()) put_f32(out, static_cast<float>(v));
    }
    return out;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing checkpoint: " + path);
  }

  /// Overwrites every registered entry from a checkpoint. The checkpoint
  /// must contain exactly the registered names with matching shapes.
  void deserialize(std::span<const char> bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
      if (bytes.size() - pos < n) {
        throw DataError(std::string("truncated checkpoint while reading ") + what);
      }
    };
    need(kMagic.size(), "magic");
    if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
      throw DataError("not an HDBF1 checkpoint");
    }
    pos = kMagic.size();
    std::vector<bool> seen(infos_.size(), false);
    while (pos < bytes.size()) {
      need(4, "name length");
      const std::uint32_t len = get_u32(bytes, pos);
      need(len, "name");
      std::string name(bytes.data() + pos, len);
      pos += len;
      need(4, "rank");
      const std::uint32_t rank = get_u32(bytes, pos);
      need(std::size_t{4} * rank, "extents");
      Shape shape(rank);
      for (auto& e : shape) e = get_u32(bytes, pos);
      const std::size_t count = numel_of(shape);
      if (count > bytes.size()) throw DataError("truncated checkpoint while reading tensor data");
      need(count * 4, "tensor data");
      auto it = index_.find(name);
      if (it == index_.end()) throw DataError("checkpoint has unknown tensor " + name);
      if (infos_[it->second].shape != shape) {
        throw DataError("checkpoint tensor " + name + " has shape " + to_string(shape) +
                        ", model expects " + to_string(infos_[it->second].shape));
      }
      auto dst = tensors_[it->second].data();
      for (std::size_t k = 0; k < count; ++k) dst[k] = static_cast<T>(get_f32(bytes, pos));
      seen[it->second] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (!seen[i]) throw DataError("checkpoint is missing tensor " + infos_[i].name);
    }
  }

  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    deserialize(bytes);
  }

 private:
  static constexpr std::string_view kMagic = "HDBF1";

  static void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static void put_f32(std::vector<char>& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  static std::uint32_t get_u32(std::span<const char> b, std::size_t& pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  static float get_f32(std::span<const char> b, std::size_t& pos) {
    const std::uint32_t bits = get_u32(b, pos);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::uint64_t seed_;
  Storage storage_;
  std::mt19937_64 rng_;
  std::vector<ParamInfo> infos_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hdbf
