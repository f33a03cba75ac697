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


// Finite-difference check of the whole backend plus AAM loss.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "svpool/grad_check.hpp"
#include "svpool/model.hpp"
#include "svpool/objectives.hpp"

namespace svpool {

struct ModelCheckOptions {
  std::size_t batch = 2;
  std::size_t frames = 10;
  std::size_t n_classes = 4;
  std::size_t coords_per_param = 3;
  NumericMethod method = NumericMethod::kRidders;
  double eps = 1e-2;  // first Ridders step, or the central-difference step
  double ridders_shrink = 2.0;
  std::size_t ridders_steps = 12;
  std::uint64_t seed = 0;
  double aam_scale = kAamScale;
  double aam_margin = kAamMargin;
};

struct ModelCheckResult {
  GradCheckResult model;
  GradCheckResult head;

  const GradCheckResult& worst() const {
    return model.max_rel_err >= head.max_rel_err ? model : head;
  }
  std::size_t checked() const { return model.checked + head.checked; }
  std::size_t skipped_at_kinks() const {
    return model.skipped_at_kinks + head.skipped_at_kinks;
  }
};

// Random N(0,1) input, labels b mod n_classes, training-mode forward.
inline ModelCheckResult model_grad_check(const ModelConfig& cfg,
                                         const ModelCheckOptions& opts = {}) {
  SVPOOL_CHECK_SHAPE(opts.batch >= 1 && opts.frames >= 1 && opts.n_classes >= 1,
                     "model_grad_check needs batch, frames and classes >= 1");
  Backend<double> model(cfg, opts.seed);
  AamHead<double> head(opts.n_classes, cfg.embed_dim, opts.seed + 1, opts.aam_scale,
                       opts.aam_margin);
  Tensor<double> x(Shape{opts.batch, cfg.input_c, cfg.input_l, opts.frames});
  std::mt19937_64 rng(opts.seed + 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : x.storage()) v = normal(rng);
  std::vector<int> labels(opts.batch);
  for (std::size_t b = 0; b < opts.batch; ++b) {
    labels[b] = static_cast<int>(b % opts.n_classes);
  }
  std::function<Var<double>()> fn = [&]() {
    return head.loss(model.forward(x, true), labels);
  };
  GradCheckOptions gc;
  gc.eps = opts.eps;
  gc.method = opts.method;
  gc.ridders_shrink = opts.ridders_shrink;
  gc.ridders_steps = opts.ridders_steps;
  gc.max_coords_per_param = opts.coords_per_param;
  gc.seed = opts.seed + 3;
  ModelCheckResult res;
  res.model = grad_check(fn, model.params(), gc);
  res.head = grad_check(fn, head.params(), gc);
  return res;
}

}  // namespace svpool
