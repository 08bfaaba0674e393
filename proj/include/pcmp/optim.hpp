#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>

#include "pcmp/autograd.hpp"

namespace pcmp {

/// Half-cosine decay from `base` at step 0 to 0 at `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

/// Plain SGD. Only names present in `grads` that are trainable in `params` move.
inline void sgd_step(ad::ParamSet& params, const TensorMap& grads, double lr) {
  for (const auto& [name, g] : grads) {
    if (!params.trainable(name)) continue;
    Tensor& t = params.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * g[i];
  }
}

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  /// `lr_scale(name)` multiplies the step size per parameter (layer-wise decay).
  void step(ad::ParamSet& params, const TensorMap& grads, double lr,
            const std::function<double(const std::string&)>& lr_scale = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      if (!params.trainable(name)) continue;
      Tensor& p = params.at(name);
      auto [it, fresh] = m_.try_emplace(name, p.shape());
      Tensor& m = it->second;
      Tensor& v = v_.try_emplace(name, p.shape()).first->second;
      const double step = lr * (lr_scale ? lr_scale(name) : 1.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        p[i] -= step * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      (void)fresh;
    }
  }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace pcmp
