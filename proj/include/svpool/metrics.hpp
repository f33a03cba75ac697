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

// Verification metrics over scored trials.
//
// Decision rule: a trial is accepted when score >= threshold. Hence
//   FAR(t) = |{nontarget : score >= t}| / |N|
//   FRR(t) = |{target    : score <  t}| / |P|
// The rates at a sweep point t_k hold on the whole interval (t_{k-1}, t_k].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "svpool/error.hpp"

namespace svpool {

struct ScoredTrial {
  double score;
  int label;  // 1 = target, 0 = nontarget
};

struct DetPoint {
  double threshold;
  double far;
  double frr;
};

struct EerResult {
  double eer;
  double threshold;
  // Size of the sweep step the crossing was interpolated over (0 when an
  // exact FAR == FRR point exists).
  double step;
};

struct ErrorRates {
  double far;
  double frr;
};

struct EerStarResult {
  double eer_star;
  double far_star;
  double frr_star;
  double threshold;
};

struct DcfResult {
  double min_dcf;
  double threshold;
};

struct DcfParams {
  double c_miss = 1.0;
  double c_fa = 1.0;
  double p_target = 0.01;
};

struct MetricReport {
  double eer = 0;
  double eer_threshold = 0;
  double eer_star = 0;
  double far_star = 0;
  double frr_star = 0;
  double min_dcf = 0;
  double dcf_threshold = 0;
};

template <typename T>
double cosine_score(std::span<const T> a, std::span<const T> b) {
  SVPOOL_CHECK_SHAPE(a.size() == b.size(), "cosine_score length mismatch: ",
                     a.size(), " vs ", b.size());
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (na == 0.0 || nb == 0.0) {
    throw NumericalError("cosine_score: zero-norm embedding");
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace detail {

struct ClassCounts {
  std::size_t targets = 0;
  std::size_t nontargets = 0;
};

inline ClassCounts CountClasses(std::span<const ScoredTrial> trials) {
  ClassCounts c;
  for (const auto& t : trials) {
    if (!std::isfinite(t.score)) throw DataError("trial score is not finite");
    if (t.label == 1) {
      ++c.targets;
    } else if (t.label == 0) {
      ++c.nontargets;
    } else {
      throw DataError("trial label must be 0 or 1, got " + std::to_string(t.label));
    }
  }
  if (c.targets == 0 || c.nontargets == 0) {
    throw DataError("metrics need at least one target and one nontarget trial");
  }
  return c;
}

}  // namespace detail

// FAR/FRR at -inf, every distinct score, and +inf, sorted by threshold.
inline std::vector<DetPoint> det_sweep(std::span<const ScoredTrial> trials) {
  const auto counts = detail::CountClasses(trials);
  std::vector<ScoredTrial> sorted(trials.begin(), trials.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredTrial& a, const ScoredTrial& b) { return a.score < b.score; });
  const double p = static_cast<double>(counts.targets);
  const double n = static_cast<double>(counts.nontargets);
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<DetPoint> pts;
  pts.push_back({-kInf, 1.0, 0.0});
  std::size_t targets_below = 0, nontargets_below = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double s = sorted[i].score;
    pts.push_back({s, static_cast<double>(counts.nontargets - nontargets_below) / n,
                   static_cast<double>(targets_below) / p});
    for (; i < sorted.size() && sorted[i].score == s; ++i) {
      if (sorted[i].label == 1) {
        ++targets_below;
      } else {
        ++nontargets_below;
      }
    }
  }
  pts.push_back({kInf, 0.0, 1.0});
  return pts;
}

inline ErrorRates rates_at(std::span<const ScoredTrial> trials, double threshold) {
  const auto counts = detail::CountClasses(trials);
  std::size_t fa = 0, fr = 0;
  for (const auto& t : trials) {
    if (t.label == 0 && t.score >= threshold) ++fa;
    if (t.label == 1 && t.score < threshold) ++fr;
  }
  return {static_cast<double>(fa) / static_cast<double>(counts.nontargets),
          static_cast<double>(fr) / static_cast<double>(counts.targets)};
}

// Equal error rate from the sweep. When FAR == FRR holds exactly on a run of
// sweep points the threshold is the midpoint of the interval where it holds;
// otherwise both curves are linearly interpolated between the two sweep
// points that straddle the crossing.
inline EerResult eer_from_sweep(const std::vector<DetPoint>& pts) {
  std::size_t k = 0;
  while (k < pts.size() && pts[k].frr - pts[k].far < 0.0) ++k;
  // The +inf sentinel has FRR - FAR = 1, and the first point has -1.
  if (pts[k].frr - pts[k].far == 0.0) {
    std::size_t j = k;
    while (j + 1 < pts.size() && pts[j + 1].frr - pts[j + 1].far == 0.0) ++j;
    const double lo = pts[k - 1].threshold;
    const double hi = pts[j].threshold;
    return {pts[k].far, lo + (hi - lo) / 2.0, 0.0};
  }
  const DetPoint& a = pts[k - 1];
  const DetPoint& b = pts[k];
  const double da = a.frr - a.far;
  const double db = b.frr - b.far;
  const double frac = -da / (db - da);
  const double far = a.far + frac * (b.far - a.far);
  const double frr = a.frr + frac * (b.frr - a.frr);
  double threshold;
  if (std::isinf(b.threshold)) {
    threshold = std::nextafter(a.threshold, b.threshold);
  } else if (std::isinf(a.threshold)) {
    threshold = b.threshold;
  } else {
    threshold = a.threshold + frac * (b.threshold - a.threshold);
  }
  const double step = std::max(std::abs(b.far - a.far), std::abs(b.frr - a.frr));
  return {(far + frr) / 2.0, threshold, step};
}

inline EerResult eer(std::span<const ScoredTrial> trials) {
  return eer_from_sweep(det_sweep(trials));
}

// Test-set error at the validation EER threshold.
inline EerStarResult eer_star(std::span<const ScoredTrial> val_trials,
                              std::span<const ScoredTrial> test_trials) {
  const double tau = eer(val_trials).threshold;
  const auto r = rates_at(test_trials, tau);
  return {(r.far + r.frr) / 2.0, r.far, r.frr, tau};
}

// Minimum raw detection cost over the sweep; ties go to the smallest threshold.
inline DcfResult min_dcf(std::span<const ScoredTrial> trials, DcfParams params = {}) {
  const auto pts = det_sweep(trials);
  DcfResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (const auto& pt : pts) {
    const double cost = params.c_miss * pt.frr * params.p_target +
                        params.c_fa * pt.far * (1.0 - params.p_target);
    if (cost < best.min_dcf) best = {cost, pt.threshold};
  }
  return best;
}

inline double detection_cost(const ErrorRates& r, DcfParams params = {}) {
  return params.c_miss * r.frr * params.p_target +
         params.c_fa * r.far * (1.0 - params.p_target);
}

// EER and minDCF on `test`; EER* transfers the threshold from `val` when
// given, otherwise from `test` itself.
inline MetricReport evaluate_trials(std::span<const ScoredTrial> test,
                                    std::optional<std::span<const ScoredTrial>> val = {},
                                    DcfParams params = {}) {
  MetricReport r;
  const auto e = eer(test);
  r.eer = e.eer;
  r.eer_threshold = e.threshold;
  const auto star = eer_star(val ? *val : test, test);
  r.eer_star = star.eer_star;
  r.far_star = star.far_star;
  r.frr_star = star.frr_star;
  const auto d = min_dcf(test, params);
  r.min_dcf = d.min_dcf;
  r.dcf_threshold = d.threshold;
  return r;
}

inline void WriteReportTable(std::ostream& os, const MetricReport& r) {
  const auto flags = os.flags();
  os << std::fixed << std::setprecision(4);
  os << "metric          value\n";
  os << "EER (%)         " << 100.0 * r.eer << "\n";
  os << "EER* (%)        " << 100.0 * r.eer_star << "\n";
  os << "  FAR* (%)      " << 100.0 * r.far_star << "\n";
  os << "  FRR* (%)      " << 100.0 * r.frr_star << "\n";
  os << "minDCF (1e-3)   " << 1000.0 * r.min_dcf << "\n";
  os << "EER threshold   " << r.eer_threshold << "\n";
  os << "DCF threshold   " << r.dcf_threshold << "\n";
  os.flags(flags);
}

inline void WriteReportCsv(std::ostream& os, const MetricReport& r) {
  const auto flags = os.flags();
  os << "eer,eer_threshold,eer_star,far_star,frr_star,min_dcf,dcf_threshold\n";
  os << std::setprecision(17) << r.eer << "," << r.eer_threshold << ","
     << r.eer_star << "," << r.far_star << "," << r.frr_star << "," << r.min_dcf
     << "," << r.dcf_threshold << "\n";
  os.flags(flags);
}

}  // namespace svpool
