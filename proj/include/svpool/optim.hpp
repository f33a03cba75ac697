// Copyright (c) 2026 The svpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Adam and the one-cycle learning-rate schedule.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "svpool/autodiff.hpp"
#include "svpool/error.hpp"

namespace svpool {

struct ScheduleConfig {
  std::size_t total_steps = 2000;
  double max_lr = 0.003;
  double warmup_frac = 0.10;
};

// Linear ramp 0 -> max_lr over the warmup, then half-cosine decay to 0.
inline double one_cycle_lr(std::size_t step, const ScheduleConfig& cfg) {
  if (cfg.total_steps < 1) throw ShapeError("one_cycle_lr: total_steps must be >= 1");
  if (!(cfg.warmup_frac > 0.0 && cfg.warmup_frac < 1.0)) {
    throw ShapeError("one_cycle_lr: warmup_frac must lie in (0, 1)");
  }
  if (step > cfg.total_steps) {
    throw ShapeError(detail::Concat("one_cycle_lr: step ", step, " beyond total_steps ",
                                    cfg.total_steps));
  }
  const double total = static_cast<double>(cfg.total_steps);
  const double warm = cfg.warmup_frac * total;
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.max_lr * s / warm;
  const double progress = (s - warm) / (total - warm);
  return cfg.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments are kept in double regardless of the parameter type.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Var<T>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      state_.m.emplace_back(p.value().numel(), 0.0);
      state_.v.emplace_back(p.value().numel(), 0.0);
    }
  }

  // Applies one bias-corrected update. Throws before touching anything when
  // a gradient is not finite.
  void step(double lr) {
    for (const auto& p : params_) {
      for (T g : p.grad().values()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericalError("adam: non-finite gradient");
        }
      }
    }
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const auto g = p.grad().values();
      auto w = p.mutable_value().values();
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const OptimState& state() const { return state_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  OptimState state_;
};

// Learnable entries of one or more stores, in store order.
template <typename T>
std::vector<Var<T>> LearnableParams(std::initializer_list<const ParamStore<T>*> stores) {
  std::vector<Var<T>> out;
  for (const auto* s : stores) {
    for (const auto& e : s->entries()) {
      if (e.learnable) out.push_back(e.var);
    }
  }
  return out;
}

}  // namespace svpool
