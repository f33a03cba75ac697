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

// Fixed-length training crops and speaker-balanced batch sampling.

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/tensor.hpp"

namespace svpool {

// Frames [offset, offset + crop_t) of a C x L x T stack, zero-padded on the
// right when the utterance is shorter.
inline Tensor<float> crop_utterance(const Tensor<float>& x, std::size_t crop_t,
                                    std::size_t offset) {
  SVPOOL_CHECK_SHAPE(x.rank() == 3, "utterance must be C x L x T, got ", x.shape().str());
  SVPOOL_CHECK_SHAPE(crop_t >= 1, "crop length must be >= 1");
  const std::size_t rows = x.dim(0) * x.dim(1), t = x.dim(2);
  SVPOOL_CHECK_SHAPE(offset < t, "crop offset ", offset,
                     " beyond ", t, " frames");
  Tensor<float> out(Shape{x.dim(0), x.dim(1), crop_t});
  const std::size_t n = std::min(crop_t, t - offset);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data() + r * t + offset, n, out.data() + r * crop_t);
  }
  return out;
}

inline std::size_t SampleCropOffset(std::size_t frames, std::size_t crop_t,
                                    std::mt19937_64& rng) {
  if (frames <= crop_t) return 0;
  std::uniform_int_distribution<std::size_t> pick(0, frames - crop_t);
  return pick(rng);
}

struct Batch {
  Tensor<float> x;                  // B x C x L x crop_t
  std::vector<int> labels;          // speaker class per item
  std::vector<std::size_t> items;   // utterance index per item
  std::vector<std::size_t> offsets; // crop start per item
};

// Draws utterances round-robin over a shuffled speaker order so a batch
// spans as many speakers as possible; the order is reshuffled after every
// full pass.
class SpeakerBalancedSampler {
 public:
  SpeakerBalancedSampler(const std::vector<int>& labels, std::uint64_t seed) : rng_(seed) {
    if (labels.empty()) throw DataError("cannot sample batches from an empty manifest");
    int n_cls = 0;
    for (int y : labels) {
      if (y < 0) throw DataError("negative speaker label");
      n_cls = std::max(n_cls, y + 1);
    }
    by_spk_.resize(static_cast<std::size_t>(n_cls));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      by_spk_[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    for (std::size_t s = 0; s < by_spk_.size(); ++s) {
      if (!by_spk_[s].empty()) order_.push_back(s);
    }
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> picks;
    picks.reserve(batch_size);
    while (picks.size() < batch_size) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      const auto& utts = by_spk_[order_[cursor_++]];
      std::uniform_int_distribution<std::size_t> pick(0, utts.size() - 1);
      picks.push_back(utts[pick(rng_)]);
    }
    return picks;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> by_spk_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Stacks random crops of the picked utterances into one batch.
inline Batch assemble_batch(const std::vector<Tensor<float>>& features,
                            const std::vector<int>& labels,
                            const std::vector<std::size_t>& picks, std::size_t crop_t,
                            std::mt19937_64& rng) {
  if (picks.empty()) throw DataError("empty batch");
  const auto& first = features.at(picks[0]);
  const std::size_t c = first.dim(0), l = first.dim(1);
  Batch b;
  b.x = Tensor<float>(Shape{picks.size(), c, l, crop_t});
  const std::size_t item = c * l * crop_t;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& x = features.at(picks[i]);
    SVPOOL_CHECK_SHAPE(x.rank() == 3 && x.dim(0) == c && x.dim(1) == l,
                       "utterance ", picks[i], " has shape ", x.shape().str(),
                       ", batch expects ", c, "x", l, "xT");
    if (x.dim(2) < 1) throw DataError("utterance with zero frames");
    const std::size_t off = SampleCropOffset(x.dim(2), crop_t, rng);
    auto crop = crop_utterance(x, crop_t, off);
    std::copy_n(crop.data(), item, b.x.data() + i * item);
    b.labels.push_back(labels.at(picks[i]));
    b.items.push_back(picks[i]);
    b.offsets.push_back(off);
  }
  return b;
}

// One speaker-balanced batch of crop_t-frame crops.
inline Batch crop_batch(const std::vector<Tensor<float>>& features,
                        const std::vector<int>& labels, std::size_t batch_size,
                        std::size_t crop_t, std::uint64_t seed) {
  if (features.empty()) throw DataError("cannot build a batch from an empty manifest");
  SVPOOL_CHECK_SHAPE(features.size() == labels.size(), "features/labels size mismatch");
  SpeakerBalancedSampler sampler(labels, seed);
  auto picks = sampler.next(batch_size);
  return assemble_batch(features, labels, picks, crop_t, sampler.rng());
}

}  // namespace svpool
