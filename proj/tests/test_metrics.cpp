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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <vector>

#include "oracles.hpp"

namespace svpool {
namespace {

using testing::CountRates;
using testing::kInf;
using testing::OracleEerOf;
using testing::OracleMinDcf;
using testing::OracleSweep;
using testing::RandomTrials;
using testing::Trials;

// ---------------------------------------------------------------------------

TEST(DetSweep, SeparableSetAndSentinels) {
  const Trials t{{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}};
  const auto pts = det_sweep(t);
  EXPECT_EQ(pts.front().threshold, -kInf);
  EXPECT_EQ(pts.front().far, 1.0);
  EXPECT_EQ(pts.front().frr, 0.0);
  EXPECT_EQ(pts.back().threshold, kInf);
  EXPECT_EQ(pts.back().far, 0.0);
  EXPECT_EQ(pts.back().frr, 1.0);
  const auto mid = rates_at(t, 0.5);
  EXPECT_EQ(mid.far, 0.0);
  EXPECT_EQ(mid.frr, 0.0);
  EXPECT_EQ(pts.size(), 6u);
}

TEST(DetSweep, NeedsBothClasses) {
  EXPECT_THROW(det_sweep(Trials{{0.1, 1}, {0.2, 1}}), DataError);
  EXPECT_THROW(det_sweep(Trials{{0.1, 0}}), DataError);
  EXPECT_THROW(det_sweep(Trials{}), DataError);
  EXPECT_THROW(det_sweep(Trials{{0.1, 1}, {0.2, 2}}), DataError);
  EXPECT_THROW(det_sweep(Trials{{NAN, 1}, {0.2, 0}}), DataError);
}

TEST(DetSweep, MatchesDirectCountsAndIsMonotone) {
  std::mt19937_64 rng(1);
  for (int c = 0; c < 1000; ++c) {
    const auto t = RandomTrials(rng, c < 50 ? 50 : 200);
    const auto pts = det_sweep(t);
    const auto ref = OracleSweep(t);
    ASSERT_EQ(pts.size(), ref.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ASSERT_EQ(pts[i].threshold, ref[i].tau);
      ASSERT_EQ(pts[i].far, ref[i].far);
      ASSERT_EQ(pts[i].frr, ref[i].frr);
      if (i > 0) {
        ASSERT_LE(pts[i].far, pts[i - 1].far);
        ASSERT_GE(pts[i].frr, pts[i - 1].frr);
      }
    }
  }
}

TEST(Eer, HandDerivedCases) {
  const Trials separable{{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}};
  EXPECT_EQ(eer(separable).eer, 0.0);

  const Trials four{{0.8, 1}, {0.6, 1}, {0.7, 0}, {0.2, 0}};
  const auto e = eer(four);
  EXPECT_EQ(e.eer, 0.5);
  EXPECT_DOUBLE_EQ(e.threshold, 0.65);
  const auto r = rates_at(four, e.threshold);
  EXPECT_EQ(r.far, 0.5);
  EXPECT_EQ(r.frr, 0.5);

  const Trials inverted{{0.1, 1}, {0.2, 1}, {0.8, 0}, {0.9, 0}};
  EXPECT_EQ(eer(inverted).eer, 1.0);
}

TEST(EerStar, TransfersTheValidationThreshold) {
  const Trials val{{0.8, 1}, {0.6, 1}, {0.7, 0}, {0.2, 0}};
  const Trials test{{0.9, 1}, {0.66, 1}, {0.64, 0}, {0.1, 0}};
  const auto s = eer_star(val, test);
  EXPECT_DOUBLE_EQ(s.threshold, 0.65);
  EXPECT_EQ(s.eer_star, 0.0);

  const Trials flipped{{0.1, 1}, {0.64, 1}, {0.66, 0}, {0.9, 0}};
  const auto f = eer_star(val, flipped);
  EXPECT_EQ(f.eer_star, 1.0);
  EXPECT_EQ(f.far_star, 1.0);
  EXPECT_EQ(f.frr_star, 1.0);
}

TEST(MinDcf, SeparableIsZeroAndSentinelBoundHolds) {
  const Trials separable{{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}};
  EXPECT_EQ(min_dcf(separable).min_dcf, 0.0);
  std::mt19937_64 rng(2);
  for (int c = 0; c < 200; ++c) {
    EXPECT_LE(min_dcf(RandomTrials(rng)).min_dcf, 0.01);
  }
  EXPECT_DOUBLE_EQ(min_dcf(Trials{{0.1, 1}, {0.9, 0}}).min_dcf, 0.01);
}

TEST(MinDcf, NotAboveCostAtTheEerThreshold) {
  std::mt19937_64 rng(3);
  for (int c = 0; c < 200; ++c) {
    const auto t = RandomTrials(rng);
    EXPECT_LE(min_dcf(t).min_dcf, detection_cost(rates_at(t, eer(t).threshold)) + 1e-15);
  }
}

// All three metrics on 1000 random sets of up to 200 trials.
TEST(Metrics, AgreeWithBruteForceOracle) {
  std::mt19937_64 rng(4);
  for (int c = 0; c < 1000; ++c) {
    const auto val = RandomTrials(rng);
    const auto test = RandomTrials(rng);
    const auto e = eer(test);
    const auto oe = OracleEerOf(test);
    ASSERT_EQ(e.eer, oe.eer) << "set " << c;
    ASSERT_EQ(e.threshold, oe.tau) << "set " << c;

    const auto s = eer_star(val, test);
    const auto [far, frr] = CountRates(test, OracleEerOf(val).tau);
    ASSERT_EQ(s.far_star, far);
    ASSERT_EQ(s.frr_star, frr);
    ASSERT_EQ(s.eer_star, (far + frr) / 2.0);

    const auto d = min_dcf(test);
    const auto [od, otau] = OracleMinDcf(test);
    ASSERT_EQ(d.min_dcf, od);
    ASSERT_EQ(d.threshold, otau);
  }
}

TEST(Metrics, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(5);
  for (int c = 0; c < 100; ++c) {
    const auto t = RandomTrials(rng);
    Trials u = t;
    for (auto& x : u) x.score = std::exp(3.0 * x.score) - 7.0;
    EXPECT_EQ(eer(t).eer, eer(u).eer);
    EXPECT_EQ(min_dcf(t).min_dcf, min_dcf(u).min_dcf);
    const auto a = evaluate_trials(t, std::span<const ScoredTrial>(t));
    const auto b = evaluate_trials(u, std::span<const ScoredTrial>(u));
    EXPECT_EQ(a.eer_star, b.eer_star);
  }
}

TEST(Metrics, InvariantUnderPermutation) {
  std::mt19937_64 rng(6);
  for (int c = 0; c < 100; ++c) {
    auto t = RandomTrials(rng);
    const auto before = evaluate_trials(t);
    std::shuffle(t.begin(), t.end(), rng);
    const auto after = evaluate_trials(t);
    EXPECT_EQ(before.eer, after.eer);
    EXPECT_EQ(before.eer_threshold, after.eer_threshold);
    EXPECT_EQ(before.eer_star, after.eer_star);
    EXPECT_EQ(before.min_dcf, after.min_dcf);
  }
}

// EER* on the validation set itself stays within one sweep step of the EER.
TEST(EerStar, SelfConsistentWithinOneSweepStep) {
  std::mt19937_64 rng(7);
  for (int c = 0; c < 100; ++c) {
    const auto t = RandomTrials(rng);
    const auto e = eer(t);
    const auto s = eer_star(t, t);
    EXPECT_LE(std::abs(s.eer_star - e.eer), e.step + 1e-12) << "set " << c;
  }
}

TEST(Report, FieldsAreRatesAndBounded) {
  std::mt19937_64 rng(8);
  for (int c = 0; c < 100; ++c) {
    const auto r = evaluate_trials(RandomTrials(rng));
    for (double v : {r.eer, r.eer_star, r.far_star, r.frr_star, r.min_dcf}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(r.min_dcf, 0.01);
  }
}

TEST(CosineScore, BasicCases) {
  const std::vector<double> a{1, 2, 3}, b{-2, 1, 0}, c{3, 6, 9};
  EXPECT_DOUBLE_EQ(cosine_score<double>(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_score<double>(a, b), 0.0);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(8), y(8), x3(8);
    for (std::size_t k = 0; k < 8; ++k) {
      x[k] = nd(rng);
      y[k] = nd(rng);
      x3[k] = 3 * x[k];
    }
    const double s = cosine_score<double>(x, y);
    EXPECT_NEAR(cosine_score<double>(x3, y), s, 1e-12);
    EXPECT_LE(std::abs(s), 1.0);
  }
  EXPECT_THROW(cosine_score<double>(a, std::vector<double>{0, 0, 0}), NumericalError);
  EXPECT_THROW(cosine_score<double>(a, std::vector<double>{1, 2}), ShapeError);
}

}  // namespace
}  // namespace svpool
