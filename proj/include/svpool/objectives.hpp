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

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "svpool/ops.hpp"

namespace svpool {

inline constexpr double kAamScale = 30.0;
inline constexpr double kAamMargin = 0.2;

// Additive angular margin softmax:
//   cos_ij = <e_i/|e_i|, w_j/|w_j|>
//   logits = s * cos_ij, with the target entry replaced by s * cos(theta + m)
//   loss   = mean cross-entropy.
template <typename T>
Var<T> aam_softmax_loss(const Var<T>& embeddings, std::span<const int> labels,
                        const Var<T>& class_weights, T s = T(kAamScale),
                        T m = T(kAamMargin)) {
  SVPOOL_CHECK_SHAPE(embeddings.shape().rank() == 2 &&
                         class_weights.shape().rank() == 2 &&
                         embeddings.dim(1) == class_weights.dim(1),
                     "aam_softmax_loss: embeddings ", embeddings.shape().str(),
                     " vs class weights ", class_weights.shape().str());
  SVPOOL_CHECK_SHAPE(embeddings.dim(0) >= 1, "aam_softmax_loss needs B >= 1");
  auto cosine = linear(l2_normalize(embeddings, 1), l2_normalize(class_weights, 1));
  return cross_entropy(scale(angular_margin(cosine, labels, m), s), labels);
}

// Classifier head owning the S x R class weights.
template <typename T>
class AamHead {
 public:
  AamHead(std::size_t n_classes, std::size_t embed_dim, std::uint64_t seed,
          T scale = T(kAamScale), T margin = T(kAamMargin))
      : scale_(scale), margin_(margin) {
    Tensor<T> w(Shape{n_classes, embed_dim});
    std::mt19937_64 rng(seed);
    const double bound = std::sqrt(6.0 / static_cast<double>(embed_dim + n_classes));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w.storage()) v = static_cast<T>(dist(rng));
    params_.add("aam.class_weight", std::move(w));
  }

  Var<T> loss(const Var<T>& embeddings, std::span<const int> labels) {
    return aam_softmax_loss(embeddings, labels, params_.get("aam.class_weight"),
                            scale_, margin_);
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  T scale_;
  T margin_;
  ParamStore<T> params_;
};

}  // namespace svpool
