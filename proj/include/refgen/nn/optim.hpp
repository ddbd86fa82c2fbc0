#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "refgen/nn/layers.hpp"

namespace refgen::nn {

/// Linear warmup to the base rate, then constant, or a cosine fall to zero at
/// `decay_end` when that is positive. Steps count from 1.
inline double warmup_lr(double base_lr, long step, long warmup_steps, long decay_end = 0) {
  if (warmup_steps > 0 && step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (decay_end <= warmup_steps) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_end - warmup_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  long warmup_steps = 100;
  long decay_end = 0;  // 0 keeps the rate constant after warmup
};

/// Adam with decoupled weight decay. Frozen parameters (requires_grad off) are skipped.
template <class T>
class AdamW {
public:
  AdamW(ParamSet<T>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (auto& [name, v] : params.items()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  double current_lr() const { return warmup_lr(cfg_.lr, step_ + 1, cfg_.warmup_steps, cfg_.decay_end); }

  void step() {
    ++step_;
    const double lr = warmup_lr(cfg_.lr, step_, cfg_.warmup_steps, cfg_.decay_end);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    auto& items = params_->items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& p = items[i].second;
      if (!p.requires_grad() || p.grad().empty()) continue;
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj);
        v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj);
        const double upd = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - lr * (upd + cfg_.weight_decay * w[j]));
      }
    }
  }

  long steps_taken() const { return step_; }
  void set_steps_taken(long s) { step_ = s; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const AdamWConfig& config() const { return cfg_; }

private:
  ParamSet<T>* params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long step_ = 0;
};

}  // namespace refgen::nn
