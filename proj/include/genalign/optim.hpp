#pragma once

#include "genalign/params.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace genalign {

/// Adam with decoupled weight decay. Matrices with a single row (biases,
/// norm affine terms, learned tokens) are exempt from decay.
struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  using Options = AdamWOptions;

  AdamW() = default;
  explicit AdamW(const ParamSet<float>& params, Options opt = {}) : opt_(opt) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }

  void step(ParamSet<float>& params, const ParamSet<float>& grads, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params.at(i);
      const auto& g = grads.at(i);
      auto& m = m_.at(i);
      auto& v = v_.at(i);
      m = static_cast<float>(opt_.beta1) * m + static_cast<float>(1.0 - opt_.beta1) * g;
      v = static_cast<float>(opt_.beta2) * v + static_cast<float>(1.0 - opt_.beta2) * g.cwiseProduct(g);
      if (weight_decay > 0.0 && w.rows() > 1) w *= static_cast<float>(1.0 - lr * weight_decay);
      const auto step_size = static_cast<float>(lr / bc1);
      const auto denom_scale = static_cast<float>(1.0 / std::sqrt(bc2));
      w.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<float>(opt_.eps));
    }
  }

  long steps() const { return t_; }

 private:
  Options opt_;
  ParamSet<float> m_, v_;
  long t_ = 0;
};

/// Linear warmup to `base` then cosine decay to `final_lr`.
inline double cosine_schedule(long step, long total, long warmup, double base, double final_lr) {
  if (total <= 0) return base;
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(std::max(1L, total - warmup));
  return final_lr + 0.5 * (base - final_lr) * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace genalign
