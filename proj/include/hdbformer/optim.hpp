#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hdbformer/tensor.hpp"

namespace hdbf {

/// Polynomial decay lr0·(1 − t/T)^power for t in [0, T].
inline double poly_lr(double lr0, std::size_t t, std::size_t total_steps, double power) {
  if (t > total_steps) {
    throw ContractError("learning-rate schedule queried at step " + std::to_string(t) +
                        " beyond the total of " + std::to_string(total_steps));
  }
  if (total_steps == 0) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total_steps), power);
}

struct AdamWConfig {
  double lr0 = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 1;
  double poly_power = 0.9;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Each step
/// first shrinks parameters by lr·wd, then applies the Adam update.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, const AdamWConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg.lr0 > 0)) throw ConfigError("lr0 must be positive");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t step_count() const { return t_; }
  double current_lr() const { return poly_lr(cfg_.lr0, t_, cfg_.total_steps, cfg_.poly_power); }

  /// Applies one update from the accumulated gradients at schedule step t.
  void step() {
    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto data = p.data();
      const auto grad = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
        double x = static_cast<double>(data[k]);
        x -= lr * cfg_.weight_decay * x;
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
        x -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        data[k] = static_cast<T>(x);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace hdbf
