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

// Finite-difference verification of reverse-mode gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "svpool/autodiff.hpp"
#include "svpool/error.hpp"

namespace svpool {

enum class NumericMethod {
  kCentral,  // one central difference at eps
  // Ridders' extrapolation: central differences at eps, eps/c, eps/c^2, ...
  // combined by polynomial extrapolation to a zero step. The estimate with
  // the smallest internal error estimate is kept. Handles coordinates where
  // no single step is both free of truncation error and above round-off.
  kRidders,
};

struct GradCheckOptions {
  double eps = 1e-5;
  NumericMethod method = NumericMethod::kCentral;
  double ridders_shrink = 1.4;
  std::size_t ridders_steps = 12;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // sampled without replacement.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Coordinates for which this returns true are skipped (e.g. points known
  // to sit on a kink).
  std::function<bool(const std::string&, std::size_t)> exclude;
  // Skip coordinates whose +-eps probes switch a relu/clamp/max branch: the
  // central difference then straddles a kink and measures nothing useful.
  // With kRidders only the kinked steps are dropped.
  bool skip_branch_changes = true;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_at_kinks = 0;
};

inline double RelativeError(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

// Neville tableau over shrinking steps. A kinked step discards everything
// built from the larger steps before it.
template <typename Central>
std::optional<double> Ridders(Central&& central, const GradCheckOptions& opts) {
  const double c2 = opts.ridders_shrink * opts.ridders_shrink;
  std::vector<double> prev, cur;
  std::optional<double> best;
  double best_err = std::numeric_limits<double>::infinity();
  double h = opts.eps;
  for (std::size_t i = 0; i < opts.ridders_steps; ++i, h /= opts.ridders_shrink) {
    const auto d = central(h);
    if (!d) {
      prev.clear();
      best.reset();
      best_err = std::numeric_limits<double>::infinity();
      continue;
    }
    cur.assign(1, *d);
    double fac = c2;
    for (std::size_t k = 1; k <= prev.size(); ++k, fac *= c2) {
      cur.push_back((cur[k - 1] * fac - prev[k - 1]) / (fac - 1.0));
      const double err =
          std::max(std::abs(cur[k] - cur[k - 1]), std::abs(cur[k] - prev[k - 1]));
      if (err <= best_err) {
        best_err = err;
        best = cur[k];
      }
    }
    if (!best) best = *d;
    // Higher orders got worse by a clear margin: round-off has taken over.
    if (!prev.empty() && std::abs(cur.back() - prev.back()) >= 2.0 * best_err) break;
    std::swap(prev, cur);
  }
  return best;
}

}  // namespace detail

// Compares the reverse-mode gradient of fn() with central differences
//   (f(theta + eps) - f(theta - eps)) / (2 eps)
// for the learnable entries of `params`. fn must be deterministic.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>()>& fn, ParamStore<T>& params,
                           const GradCheckOptions& opts = {}) {
  if (!(opts.eps > 0.0)) throw ShapeError("grad_check: eps must be positive");
  struct Probe {
    double value;
    std::uint64_t branches;
  };
  auto eval = [&fn]() {
    NoGradGuard guard;
    BranchTrace trace;
    const double v = static_cast<double>(fn().item());
    if (!std::isfinite(v)) throw NumericalError("grad_check: function value is not finite");
    return Probe{v, trace.hash()};
  };

  params.zero_grad();
  auto out = fn();
  if (!std::isfinite(static_cast<double>(out.item()))) {
    throw NumericalError("grad_check: function value is not finite");
  }
  out.backward();
  const std::uint64_t base_branches = eval().branches;

  std::mt19937_64 rng(opts.seed);
  GradCheckResult res;
  for (auto& entry : params.entries()) {
    if (!entry.learnable) continue;
    const Tensor<T> analytic = entry.var.grad();
    auto& value = entry.var.mutable_value();
    const std::size_t n = value.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && opts.max_coords_per_param < n) {
      for (std::size_t i = 0; i < opts.max_coords_per_param; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(coords[i], coords[pick(rng)]);
      }
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      if (opts.exclude && opts.exclude(entry.name, idx)) continue;
      const T saved = value[idx];
      value[idx] = static_cast<T>(static_cast<double>(saved) + opts.eps);
      // Central difference at step h; nullopt when a probe crossed a kink.
      auto central = [&](double h) -> std::optional<double> {
        value[idx] = static_cast<T>(static_cast<double>(saved) + h);
        const Probe up = eval();
        value[idx] = static_cast<T>(static_cast<double>(saved) - h);
        const Probe down = eval();
        value[idx] = saved;
        if (opts.skip_branch_changes &&
            (up.branches != base_branches || down.branches != base_branches)) {
          return std::nullopt;
        }
        return (up.value - down.value) / (2.0 * h);
      };
      const auto estimate = opts.method == NumericMethod::kCentral
                                ? central(opts.eps)
                                : detail::Ridders(central, opts);
      if (!estimate) {
        ++res.skipped_at_kinks;
        continue;
      }
      const double numeric = *estimate;
      const double a = static_cast<double>(analytic[idx]);
      const double err = RelativeError(a, numeric);
      ++res.checked;
      if (res.worst_param.empty() || err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_param = entry.name;
        res.worst_index = idx;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace svpool
