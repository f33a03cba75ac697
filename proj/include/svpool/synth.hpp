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

// Synthetic layer-stack corpora.
//
// Speaker s owns an identity vector v_s ~ N(0, I_C). Utterance u of speaker s
// at layer l and frame t is
//   x[:, l, t] = p_l v_s + (1 - p_l) g U (o_u + q_t) + sigma eps
// where p is the speaker layer profile, U (C x k) is a nuisance basis shared
// by all speakers, o_u ~ N(0, session^2 I_k) is a per-utterance offset,
// q_t ~ N(0, I_k) varies per frame and eps ~ N(0, I_C).

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/tensor.hpp"
#include "svpool/text_io.hpp"

namespace svpool {

struct SyntheticSpec {
  std::size_t n_speakers = 96;
  std::size_t utts_per_speaker = 8;
  std::size_t c = 32;
  std::size_t l = 6;
  std::size_t t_min = 150;
  std::size_t t_max = 300;
  std::vector<double> profile;  // empty: a bump over the middle layers
  double noise_sigma = 0.3;
  std::size_t nuisance_rank = 4;
  double nuisance_scale = 1.0;
  double session_scale = 1.0;
  std::uint64_t seed = 0;

  std::vector<double> resolved_profile() const {
    if (!profile.empty()) return profile;
    // Raised cosine peaking at the centre layer, zero at both ends.
    std::vector<double> p(l, 1.0);
    if (l >= 3) {
      for (std::size_t i = 0; i < l; ++i) {
        const double x = static_cast<double>(i) / static_cast<double>(l - 1);
        p[i] = 0.5 * (1.0 - std::cos(2.0 * 3.14159265358979323846 * x));
      }
    }
    return p;
  }

  void Validate() const {
    if (n_speakers < 2) throw DataError("synthetic corpus needs n_speakers >= 2");
    if (utts_per_speaker < 1) throw DataError("utts_per_speaker must be >= 1");
    if (c < 1 || l < 1 || t_min < 1 || t_max < t_min) {
      throw DataError("synthetic dims need C, L >= 1 and 1 <= t_min <= t_max");
    }
    const auto p = resolved_profile();
    if (p.size() != l) {
      throw DataError("speaker layer profile has " + std::to_string(p.size()) +
                      " entries for L=" + std::to_string(l));
    }
    bool any = false;
    for (double v : p) {
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("profile entries must lie in [0, 1]");
      any = any || v > 0.0;
    }
    if (!any) throw DataError("speaker layer profile needs an entry > 0");
    if (!(noise_sigma >= 0.0) || !(nuisance_scale >= 0.0) || !(session_scale >= 0.0)) {
      throw DataError("noise, nuisance and session scales must be >= 0");
    }
  }
};

struct SyntheticCorpus {
  std::vector<SpeakerAttr> speakers;
  std::vector<ManifestEntry> entries;   // path = feats/<utterance_id>.lsf
  std::vector<Tensor<float>> features;  // C x L x T, parallel to entries
  std::vector<std::vector<double>> identities;
};

inline std::string SpeakerName(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03zu", s);
  return buf;
}

inline SyntheticCorpus synth_dataset(const SyntheticSpec& spec) {
  spec.Validate();
  const auto profile = spec.resolved_profile();
  const std::size_t c = spec.c, l = spec.l, k = spec.nuisance_rank;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticCorpus out;
  out.identities.resize(spec.n_speakers);
  for (auto& v : out.identities) {
    v.resize(c);
    for (auto& x : v) x = normal(rng);
  }
  std::vector<double> basis(c * k);  // U, row-major C x k
  for (auto& x : basis) x = normal(rng);

  std::uniform_int_distribution<std::size_t> frames(spec.t_min, spec.t_max);
  std::vector<double> offset(k), latent(k), nuisance(c);
  for (std::size_t s = 0; s < spec.n_speakers; ++s) {
    SpeakerAttr attr;
    attr.speaker_id = SpeakerName(s);
    attr.strata["gender"] = s % 2 == 0 ? "m" : "f";
    attr.strata["accent"] = (s / 2) % 2 == 0 ? "a" : "b";
    out.speakers.push_back(attr);
    const auto& v = out.identities[s];
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      const std::size_t t_len = frames(rng);
      for (auto& x : offset) x = spec.session_scale * normal(rng);
      Tensor<float> x(Shape{c, l, t_len});
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t j = 0; j < k; ++j) latent[j] = offset[j] + normal(rng);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += basis[ch * k + j] * latent[j];
          nuisance[ch] = spec.nuisance_scale * acc;
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t layer = 0; layer < l; ++layer) {
            const double p = profile[layer];
            double val = p * v[ch] + (1.0 - p) * nuisance[ch];
            if (spec.noise_sigma > 0.0) val += spec.noise_sigma * normal(rng);
            x[(ch * l + layer) * t_len + t] = static_cast<float>(val);
          }
        }
      }
      char id[48];
      std::snprintf(id, sizeof id, "%s_u%02zu", attr.speaker_id.c_str(), u);
      out.entries.push_back({id, attr.speaker_id, std::string("feats/") + id + ".lsf", t_len});
      out.features.push_back(std::move(x));
    }
  }
  return out;
}

}  // namespace svpool
