#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

#include "anomalens/segmetrics.hpp"
#include "support.hpp"

using namespace anomalens;
using namespace anomalens::seg;
using anomalens::testing::brute_auprc;
using anomalens::testing::brute_best_dice;
using anomalens::testing::brute_grow;
using anomalens::testing::flood_fill_count;

namespace {

Shape3 random_shape(Rng& rng, int max_side) {
  return {static_cast<int>(uniform_int(rng, 1, max_side)), static_cast<int>(uniform_int(rng, 1, max_side)),
          static_cast<int>(uniform_int(rng, 1, max_side))};
}

Mask random_mask(Rng& rng, Shape3 s, double p) {
  Mask m(s, 0);
  for (auto& v : m.data) v = uniform01(rng) < p;
  return m;
}

// Scores drawn from a small alphabet so ties are common.
Volume random_map(Rng& rng, Shape3 s, int levels) {
  Volume v(s);
  for (auto& x : v.data) x = static_cast<float>(uniform_int(rng, 0, levels - 1)) / static_cast<float>(levels);
  return v;
}

Mask line(std::vector<std::uint8_t> v) {
  const Shape3 s{1, 1, static_cast<int>(v.size())};
  return Mask(s, std::move(v));
}
Volume line(std::vector<float> v) {
  const Shape3 s{1, 1, static_cast<int>(v.size())};
  return Volume(s, std::move(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Components

TEST(ConnectedComponents, Examples) {
  Mask one({3, 3, 3}, 0);
  one(1, 1, 1) = 1;
  EXPECT_EQ(connected_components(one).count, 1);
  Mask diagonal({2, 2, 1}, 0);
  diagonal(0, 0, 0) = diagonal(1, 1, 0) = 1;
  EXPECT_EQ(connected_components(diagonal).count, 2);
  EXPECT_EQ(connected_components(Mask({4, 4, 4}, 0)).count, 0);
}

TEST(ConnectedComponents, MatchesFloodFillLabels) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_mask(rng, random_shape(rng, 16), uniform(rng, 0.1, 0.6));
    Grid3<int> oracle;
    const int n = flood_fill_count(m, &oracle);
    const auto c = connected_components(m);
    EXPECT_EQ(c.count, n);
    EXPECT_EQ(c.labels, oracle);
  }
}

// ---------------------------------------------------------------------------
// Growing

TEST(ClinicalGrow, LineExample) {
  const auto grown = clinical_grow(line(std::vector<std::uint8_t>{1, 0, 0, 0}), line(std::vector<float>{10, 5, 3, 10}));
  EXPECT_EQ(grown.data, (std::vector<std::uint8_t>{1, 1, 0, 0}));
}

TEST(ClinicalGrow, SuperlevelComponentIsAFixedPoint) {
  const auto v = line(std::vector<float>{1, 6, 9, 10, 5, 1});
  const auto seed = line(std::vector<std::uint8_t>{0, 1, 1, 1, 1, 0});
  EXPECT_EQ(clinical_grow(seed, v), seed);
}

TEST(ClinicalGrow, UniformIntensityFillsTheVolume) {
  Mask seed({4, 5, 6}, 0);
  seed(2, 2, 2) = 1;
  const auto grown = clinical_grow(seed, Volume({4, 5, 6}, 3.0f));
  for (auto v : grown.data) EXPECT_EQ(v, 1);
}

TEST(ClinicalGrow, FractionOutsideRangeIsContractError) {
  const auto v = line(std::vector<float>{1, 2});
  const auto s = line(std::vector<std::uint8_t>{1, 0});
  EXPECT_THROW(clinical_grow(s, v, 0.0), ContractError);
  EXPECT_THROW(clinical_grow(s, v, 1.5), ContractError);
}

TEST(ClinicalGrow, MatchesFixpointOracleAndSuperlevelDefinition) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_shape(rng, 12);
    const auto seeds = random_mask(rng, s, 0.05);
    Volume intensity(s);
    for (auto& x : intensity.data) x = static_cast<float>(uniform(rng, 0, 1));
    const auto grown = clinical_grow(seeds, intensity);
    EXPECT_EQ(grown, brute_grow(seeds, intensity, 0.4));
    // Every grown voxel meets the threshold of some seed component.
    Grid3<int> labels;
    const int n = flood_fill_count(seeds, &labels);
    float lowest = std::numeric_limits<float>::infinity();
    for (int l = 1; l <= n; ++l) {
      float peak = 0;
      for (std::size_t i = 0; i < seeds.size(); ++i)
        if (labels[i] == l) peak = std::max(peak, intensity[i]);
      lowest = std::min(lowest, 0.4f * peak);
    }
    for (std::size_t i = 0; i < grown.size(); ++i)
      if (grown[i]) {
        EXPECT_GE(intensity[i], lowest);
      }
  }
}

TEST(ClinicalGrow, ManySmallComponentsSharingRegions) {
  // Dense seeds on a low-contrast background: most components' 40% levels
  // cover nearly everything, so regions overlap heavily.
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = random_shape(rng, 10);
    const auto seeds = random_mask(rng, s, uniform(rng, 0.1, 0.6));
    Volume intensity(s);
    for (auto& x : intensity.data) x = static_cast<float>(uniform(rng, 0.2, 1.0));
    if (trial % 3 == 0) intensity.data[0] = 0.05f;
    const double fraction = uniform(rng, 0.2, 0.9);
    EXPECT_EQ(clinical_grow(seeds, intensity, fraction), brute_grow(seeds, intensity, fraction));
  }
}

// ---------------------------------------------------------------------------
// Overlap metrics

TEST(Dice, Examples) {
  const auto a = line(std::vector<std::uint8_t>{1, 1, 0, 0});
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, line(std::vector<std::uint8_t>{0, 0, 1, 1})), 0.0);
  EXPECT_EQ(dice(a, line(std::vector<std::uint8_t>{0, 1, 1, 0})), 0.5);
  EXPECT_EQ(dice(line(std::vector<std::uint8_t>{0, 0}), line(std::vector<std::uint8_t>{0, 0})), 1.0);
  EXPECT_THROW(dice(a, line(std::vector<std::uint8_t>{0})), ContractError);
}

TEST(Dice, SymmetricAndBounded) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = random_shape(rng, 8);
    const auto a = random_mask(rng, s, 0.3), b = random_mask(rng, s, 0.3);
    EXPECT_EQ(dice(a, b), dice(b, a));
    EXPECT_GE(dice(a, b), 0.0);
    EXPECT_LE(dice(a, b), 1.0);
  }
}

TEST(BestDice, PerfectSeparationAndConstantMap) {
  const auto gt = line(std::vector<std::uint8_t>{0, 1, 1, 0, 0});
  EXPECT_EQ(best_dice(line(std::vector<float>{0.1f, 0.9f, 0.8f, 0.2f, 0.3f}), gt).dice, 1.0);
  const auto flat = line(std::vector<float>(5, 0.5f));
  const double all = dice(Mask(gt.shape, 1), gt), none = dice(Mask(gt.shape, 0), gt);
  EXPECT_EQ(best_dice(flat, gt).dice, std::max(all, none));
}

TEST(BestDice, MatchesExhaustiveSweep) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_shape(rng, 10);
    const auto gt = random_mask(rng, s, uniform(rng, 0, 0.3));
    const auto map = random_map(rng, s, trial % 2 ? 7 : 1000);
    const auto b = best_dice(map, gt);
    EXPECT_NEAR(b.dice, brute_best_dice(map, gt), 1e-12);
    EXPECT_NEAR(dice(threshold_mask(map, b.threshold), gt), b.dice, 1e-12);
  }
}

TEST(BestDice, InvariantUnderIncreasingTransforms) {
  Rng rng(5);
  const Shape3 s{6, 6, 6};
  const auto gt = random_mask(rng, s, 0.2);
  const auto map = random_map(rng, s, 50);
  Volume t = map;
  for (auto& v : t.data) v = std::exp(3 * v) + 2;
  EXPECT_EQ(best_dice(map, gt).dice, best_dice(t, gt).dice);
}

TEST(Auprc, Examples) {
  const auto gt = line(std::vector<std::uint8_t>{1, 0, 1, 0});
  const auto ranked = line(std::vector<float>{4, 3, 2, 1});
  EXPECT_NEAR(auprc(ranked, gt).score, 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
  EXPECT_EQ(auprc(line(std::vector<float>{4, 1, 3, 2}), gt).score, 1.0);
  // Constant scores: one threshold, precision equals prevalence.
  EXPECT_NEAR(auprc(line(std::vector<float>(4, 0.3f)), gt).score, 0.5, 1e-15);
  EXPECT_THROW(auprc(ranked, line(std::vector<std::uint8_t>(4, 0))), UndefinedMetricError);
}

TEST(Auprc, MatchesBruteForceAndCurveIsMonotone) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_shape(rng, 10);
    auto gt = random_mask(rng, s, uniform(rng, 0.02, 0.4));
    gt[0] = 1;
    const auto map = random_map(rng, s, trial % 2 ? 5 : 1000);
    const auto a = auprc(map, gt);
    EXPECT_NEAR(a.score, brute_auprc(map, gt), 1e-12);
    for (std::size_t k = 1; k < a.curve.size(); ++k) EXPECT_GE(a.curve[k].recall, a.curve[k - 1].recall);
    EXPECT_DOUBLE_EQ(a.curve.back().recall, 1.0);
  }
}

TEST(GrownMap, SuperlevelSetsContainEachGrownMask) {
  Rng rng(7);
  const Shape3 s{8, 8, 8};
  const auto map = random_map(rng, s, 200);
  Volume pet(s);
  for (auto& x : pet.data) x = static_cast<float>(uniform(rng, 0, 1));
  const auto g = grown_map(map, pet);
  for (float thr : quantile_thresholds(map)) {
    const auto grown = clinical_grow(threshold_mask(map, thr), pet);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (grown[i]) {
        EXPECT_GE(g[i], thr);
      }
  }
}

TEST(GrownDice, MaximizesOverGrownMasksAtEachQuantile) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = random_shape(rng, 10);
    const auto map = random_map(rng, s, 30);
    auto gt = random_mask(rng, s, 0.15);
    gt[0] = 1;
    Volume pet(s);
    for (auto& x : pet.data) x = static_cast<float>(uniform(rng, 0, 1));
    double want = 0;
    for (float thr : quantile_thresholds(map))
      want = std::max(want, dice(brute_grow(threshold_mask(map, thr), pet, 0.4), gt));
    const auto got = best_grown_dice(map, pet, gt);
    EXPECT_EQ(got.dice, want);
    EXPECT_EQ(dice(clinical_grow(threshold_mask(map, got.threshold), pet), gt), got.dice);
  }
}

// ---------------------------------------------------------------------------
// Paired t-test

TEST(PairedTTest, IdenticalSamples) {
  const std::vector<double> a{0.1, 0.4, 0.3};
  const auto r = paired_ttest(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
}

TEST(PairedTTest, DifferencesOneTwoThree) {
  const std::vector<double> a{1, 2, 3}, b{0, 0, 0};
  const auto r = paired_ttest(a, b);
  EXPECT_NEAR(r.t, 2 * std::sqrt(3.0), 1e-12);
  EXPECT_EQ(r.df, 2);
  // Two degrees of freedom: P(|T| > t) = 1 - t / sqrt(2 + t^2).
  EXPECT_NEAR(r.p, 1 - r.t / std::sqrt(2 + r.t * r.t), 1e-10);
  EXPECT_NEAR(r.p, 0.0742, 1e-4);
}

TEST(PairedTTest, OneDegreeOfFreedomIsCauchy) {
  const std::vector<double> a{0.3, 1.1}, b{0.0, 0.2};
  const auto r = paired_ttest(a, b);
  EXPECT_NEAR(r.p, 1 - 2 / std::numbers::pi * std::atan(std::abs(r.t)), 1e-10);
}

TEST(PairedTTest, ZeroVarianceAndErrors) {
  const std::vector<double> a{2, 3, 4}, b{1, 2, 3};
  EXPECT_EQ(paired_ttest(a, b).p, 0.0);
  EXPECT_THROW(paired_ttest(std::vector<double>{1}, std::vector<double>{1}), ContractError);
  EXPECT_THROW(paired_ttest(a, std::vector<double>{1, 2}), ContractError);
}

TEST(Reports, CsvLayout) {
  std::ostringstream os;
  write_metrics_csv(os, {{"p1", 0.5, 0.25, 0.75, "kde", "gaussian", 0.05}});
  EXPECT_EQ(os.str(), "id,best_dice,best_threshold,auprc,map_kind,kernel,epsilon\np1,0.5,0.25,0.75,kde,gaussian,0.050000000000000003\n");
  std::ostringstream c;
  write_curve_csv(c, {{1.0, 0.5, 1.0}});
  EXPECT_EQ(c.str(), "recall,precision\n0.5,1\n");
}
