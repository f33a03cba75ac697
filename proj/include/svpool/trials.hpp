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

// Verification trial lists with stratified negatives.
//
// Positives are within-speaker pairs of distinct utterances. Negatives first
// cover every speaker combination once; the rest are spread over the stratum
// cells (same/different value per attribute, e.g. gender and accent) by
// water-filling, so small cells are topped up before large ones grow.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/text_io.hpp"

namespace svpool {

struct TrialOptions {
  double target_pos_ratio = 0.5;
  std::uint64_t seed = 0;
  std::size_t max_positives = 0;  // 0 keeps every within-speaker pair
};

// "key=same|diff" per attribute present on either speaker, joined by ';'.
inline std::string StratumCell(const SpeakerAttr& a, const SpeakerAttr& b) {
  std::set<std::string> keys;
  for (const auto& [k, v] : a.strata) keys.insert(k);
  for (const auto& [k, v] : b.strata) keys.insert(k);
  std::string out;
  for (const auto& k : keys) {
    auto ia = a.strata.find(k);
    auto ib = b.strata.find(k);
    const bool same = ia != a.strata.end() && ib != b.strata.end() && ia->second == ib->second;
    if (!out.empty()) out += ';';
    out += k + (same ? "=same" : "=diff");
  }
  return out;
}

namespace detail {

// k indices drawn uniformly without replacement from [0, n), in draw order.
inline std::vector<std::size_t> SampleWithoutReplacement(std::size_t n, std::size_t k,
                                                         std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

inline std::size_t RoundCount(double v) { return static_cast<std::size_t>(std::llround(v)); }

}  // namespace detail

inline std::vector<TrialPair> build_trials(const std::vector<SpeakerAttr>& speakers,
                                           const std::vector<ManifestEntry>& entries,
                                           const TrialOptions& opts = {}) {
  const double r = opts.target_pos_ratio;
  if (!(r > 0.0 && r < 1.0)) throw DataError("target positive ratio must lie in (0, 1)");
  const std::size_t n_spk = speakers.size();
  if (n_spk < 2) throw DataError("trial building needs at least 2 speakers");
  std::unordered_map<std::string, std::size_t> spk_index;
  for (std::size_t s = 0; s < n_spk; ++s) {
    if (!spk_index.emplace(speakers[s].speaker_id, s).second) {
      throw DataError("duplicate speaker '" + speakers[s].speaker_id + "'");
    }
  }
  std::vector<std::vector<std::size_t>> by_spk(n_spk);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto it = spk_index.find(entries[i].speaker_id);
    if (it == spk_index.end()) {
      throw DataError("utterance '" + entries[i].utterance_id + "' has unknown speaker '" +
                      entries[i].speaker_id + "'");
    }
    by_spk[it->second].push_back(i);
  }
  for (std::size_t s = 0; s < n_spk; ++s) {
    if (by_spk[s].size() < 2) {
      throw DataError("speaker '" + speakers[s].speaker_id + "' has " +
                      std::to_string(by_spk[s].size()) + " utterances; positives need >= 2");
    }
  }
  std::mt19937_64 rng(opts.seed);

  std::vector<TrialPair> positives;
  for (std::size_t s = 0; s < n_spk; ++s) {
    const auto& u = by_spk[s];
    for (std::size_t i = 0; i < u.size(); ++i) {
      for (std::size_t j = i + 1; j < u.size(); ++j) positives.push_back({u[i], u[j], 1, ""});
    }
  }
  std::size_t pos_avail = positives.size();
  if (opts.max_positives > 0) pos_avail = std::min(pos_avail, opts.max_positives);

  // Speaker pairs grouped by stratum cell.
  struct Cell {
    std::vector<std::pair<std::size_t, std::size_t>> spk_pairs;
    std::size_t capacity = 0;  // all cross utterance pairs in the cell
  };
  std::map<std::string, Cell> cells;
  std::size_t cross_total = 0;
  for (std::size_t a = 0; a < n_spk; ++a) {
    for (std::size_t b = a + 1; b < n_spk; ++b) {
      auto& cell = cells[StratumCell(speakers[a], speakers[b])];
      cell.spk_pairs.emplace_back(a, b);
      cell.capacity += by_spk[a].size() * by_spk[b].size();
      cross_total += by_spk[a].size() * by_spk[b].size();
    }
  }
  const std::size_t coverage = n_spk * (n_spk - 1) / 2;

  std::size_t n_pos = pos_avail;
  std::size_t n_neg = detail::RoundCount(static_cast<double>(n_pos) * (1.0 - r) / r);
  if (n_neg < coverage) {
    n_neg = coverage;
    n_pos = std::min(pos_avail, detail::RoundCount(static_cast<double>(n_neg) * r / (1.0 - r)));
  }
  if (n_neg > cross_total) {
    n_neg = cross_total;
    n_pos = std::min(pos_avail, detail::RoundCount(static_cast<double>(n_neg) * r / (1.0 - r)));
  }

  std::vector<TrialPair> out;
  {
    auto keep = detail::SampleWithoutReplacement(positives.size(), n_pos, rng);
    std::sort(keep.begin(), keep.end());
    for (auto i : keep) out.push_back(positives[i]);
  }

  // Coverage: one random utterance pair per speaker combination.
  std::set<std::pair<std::size_t, std::size_t>> used;
  for (auto& [key, cell] : cells) {
    for (const auto& [a, b] : cell.spk_pairs) {
      std::uniform_int_distribution<std::size_t> pa(0, by_spk[a].size() - 1);
      std::uniform_int_distribution<std::size_t> pb(0, by_spk[b].size() - 1);
      const std::size_t ua = by_spk[a][pa(rng)];
      const std::size_t ub = by_spk[b][pb(rng)];
      used.emplace(std::min(ua, ub), std::max(ua, ub));
      out.push_back({ua, ub, 0, key});
    }
  }

  // Water-fill the remaining negatives: raise every cell's total towards a
  // common level, bounded below by its coverage and above by its capacity.
  const std::size_t extra = n_neg - coverage;
  std::vector<Cell*> cell_list;
  std::vector<std::string> cell_keys;
  for (auto& [key, cell] : cells) {
    cell_list.push_back(&cell);
    cell_keys.push_back(key);
  }
  auto filled = [&](std::size_t level) {
    std::size_t total = 0;
    for (const auto* c : cell_list) {
      total += std::min(std::max(level, c->spk_pairs.size()), c->capacity) - c->spk_pairs.size();
    }
    return total;
  };
  std::size_t lo = 0, hi = 0;
  for (const auto* c : cell_list) hi = std::max(hi, c->capacity);
  while (lo < hi) {  // smallest level with filled(level) >= extra
    const std::size_t mid = lo + (hi - lo) / 2;
    if (filled(mid) >= extra) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  const std::size_t level = lo;
  std::vector<std::size_t> alloc(cell_list.size());
  std::vector<std::size_t> growable;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < cell_list.size(); ++i) {
    const auto* c = cell_list[i];
    const std::size_t below = level == 0 ? 0 : level - 1;
    const std::size_t at_below = std::min(std::max(below, c->spk_pairs.size()), c->capacity);
    const std::size_t at_level = std::min(std::max(level, c->spk_pairs.size()), c->capacity);
    alloc[i] = at_below - c->spk_pairs.size();
    assigned += alloc[i];
    if (at_level > at_below) growable.push_back(i);
  }
  std::shuffle(growable.begin(), growable.end(), rng);
  for (std::size_t k = 0; assigned < extra && k < growable.size(); ++k, ++assigned) {
    ++alloc[growable[k]];
  }

  for (std::size_t i = 0; i < cell_list.size(); ++i) {
    if (alloc[i] == 0) continue;
    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    for (const auto& [a, b] : cell_list[i]->spk_pairs) {
      for (auto ua : by_spk[a]) {
        for (auto ub : by_spk[b]) {
          if (!used.contains({std::min(ua, ub), std::max(ua, ub)})) candidates.emplace_back(ua, ub);
        }
      }
    }
    for (auto k : detail::SampleWithoutReplacement(candidates.size(), alloc[i], rng)) {
      const auto [ua, ub] = candidates[k];
      used.emplace(std::min(ua, ub), std::max(ua, ub));
      out.push_back({ua, ub, 0, cell_keys[i]});
    }
  }

  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace svpool
