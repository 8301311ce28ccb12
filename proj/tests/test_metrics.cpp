#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "aepl/errors.hpp"
#include "aepl/metrics.hpp"
#include "oracles.hpp"

using namespace aepl;

namespace {

Mask3 make_mask(const Shape3& shape, std::initializer_list<Shape3> voxels) {
  Mask3 m(shape);
  for (const auto& v : voxels) m.data[static_cast<std::size_t>(linear_index(shape, v[0], v[1], v[2]))] = 1;
  return m;
}

}  // namespace

TEST(Regions, AllZeroGivesEmptyMasks) {
  const Shape3 shape{2, 2, 2};
  const std::vector<std::uint8_t> labels(8, 0);
  const auto r = regions_from_labels(labels, shape);
  EXPECT_TRUE(r.et.empty() && r.wt.empty() && r.tc.empty());
}

TEST(Regions, LabelFourIsInAllThree) {
  const Shape3 shape{2, 2, 2};
  std::vector<std::uint8_t> labels(8, 0);
  labels[5] = 4;
  const auto r = regions_from_labels(labels, shape);
  for (const auto* m : {&r.et, &r.wt, &r.tc}) {
    EXPECT_EQ(m->count(), 1);
    EXPECT_EQ(m->data[5], 1);
  }
}

TEST(Regions, MembershipByLabel) {
  const Shape3 shape{3, 1, 1};
  const std::vector<std::uint8_t> labels{1, 2, 4};
  const auto r = regions_from_labels(labels, shape);
  EXPECT_EQ(r.wt.data, (std::vector<std::uint8_t>{1, 1, 1}));
  EXPECT_EQ(r.tc.data, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(r.et.data, (std::vector<std::uint8_t>{0, 0, 1}));
  EXPECT_EQ(labels_from_regions(r), labels);
}

TEST(Regions, UnknownLabelThrows) {
  const std::vector<std::uint8_t> labels{0, 3};
  EXPECT_THROW(regions_from_labels(labels, {2, 1, 1}), UnknownLabelError);
}

TEST(Regions, NestingHoldsOnRandomLabels) {
  std::mt19937_64 rng(3);
  const std::array<std::uint8_t, 4> values{0, 1, 2, 4};
  std::vector<std::uint8_t> labels(512);
  for (auto& l : labels) l = values[rng() % 4];
  const auto r = regions_from_labels(labels, {8, 8, 8});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EXPECT_LE(r.et.data[i], r.tc.data[i]);
    EXPECT_LE(r.tc.data[i], r.wt.data[i]);
  }
}

TEST(Dice, Examples) {
  const Shape3 s{4, 4, 4};
  const auto a = make_mask(s, {{0, 0, 0}, {1, 1, 1}});
  const auto b = make_mask(s, {{2, 2, 2}});
  EXPECT_EQ(dice_score(a, a), 1.0);
  EXPECT_EQ(dice_score(a, b), 0.0);
  EXPECT_EQ(dice_score(make_mask(s, {}), make_mask(s, {})), 1.0);

  // |P| = 8, |G| = 8, overlap 4.
  Mask3 p = make_mask(s, {}), g = make_mask(s, {});
  for (int i = 0; i < 8; ++i) p.data[static_cast<std::size_t>(i)] = 1;
  for (int i = 4; i < 12; ++i) g.data[static_cast<std::size_t>(i)] = 1;
  EXPECT_DOUBLE_EQ(dice_score(p, g), 0.5);
}

TEST(Dice, ShapeMismatchThrows) {
  EXPECT_THROW(dice_score(make_mask({2, 2, 2}, {}), make_mask({2, 2, 3}, {})), ShapeMismatchError);
}

TEST(Diagonal, Examples) {
  EXPECT_NEAR(volume_diagonal({240, 240, 155}, kUnitSpacing), 373.13, 0.005);
  EXPECT_EQ(std::lround(volume_diagonal({240, 240, 155}, kUnitSpacing)), 373);
  EXPECT_DOUBLE_EQ(volume_diagonal({1, 1, 1}, kUnitSpacing), std::sqrt(3.0));
  EXPECT_DOUBLE_EQ(volume_diagonal({3, 4, 12}, kUnitSpacing), 13.0);
  EXPECT_DOUBLE_EQ(volume_diagonal({3, 4, 12}, {2.0, 2.0, 2.0}), 26.0);
}

TEST(Hd95, Examples) {
  const Shape3 s{10, 4, 4};
  const auto a = make_mask(s, {{1, 1, 1}});
  const auto b = make_mask(s, {{6, 1, 1}});
  const auto r = hd95(a, b, kUnitSpacing, 99.0);
  EXPECT_DOUBLE_EQ(r.value, 5.0);
  EXPECT_FALSE(r.degenerate);

  const auto same = hd95(a, a, kUnitSpacing, 99.0);
  EXPECT_EQ(same.value, 0.0);
  EXPECT_FALSE(same.degenerate);
}

TEST(Hd95, DegenerateUsesDiagonalExactly) {
  const Shape3 brats{240, 240, 155};
  Mask3 empty(brats);
  Mask3 gt = empty;
  gt.data[12345] = 1;
  const double diag = volume_diagonal(brats, kUnitSpacing);
  const auto r = hd95(empty, gt, kUnitSpacing, diag);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, diag);
  EXPECT_NEAR(r.value, 373.13, 0.005);

  const auto rev = hd95(gt, empty, kUnitSpacing, diag);
  EXPECT_TRUE(rev.degenerate);
  EXPECT_EQ(rev.value, diag);

  const auto both = hd95(empty, empty, kUnitSpacing, diag);
  EXPECT_FALSE(both.degenerate);
  EXPECT_EQ(both.value, 0.0);
}

TEST(Hd95, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  const Shape3 s{8, 8, 8};
  const std::array<Spacing, 3> spacings{kUnitSpacing, Spacing{1.0, 1.5, 2.0}, Spacing{0.7, 0.7, 3.0}};
  for (int trial = 0; trial < 100; ++trial) {
    const double density = 0.05 + 0.5 * static_cast<double>(trial % 10) / 10.0;
    const auto a = oracle::random_mask(s, density, rng);
    const auto b = oracle::random_mask(s, density * 0.8, rng);
    const auto& sp = spacings[static_cast<std::size_t>(trial) % spacings.size()];
    if (a.empty() || b.empty()) continue;
    EXPECT_NEAR(hd95(a, b, sp, -1.0).value, oracle::hd95(a, b, sp), 1e-9) << "trial " << trial;
    EXPECT_NEAR(dice_score(a, b), oracle::dice(a, b), 1e-9);
    EXPECT_EQ(dice_score(a, b), dice_score(b, a));
  }
}

TEST(Hd95, ScalesWithUniformSpacing) {
  std::mt19937_64 rng(5);
  const Shape3 s{8, 8, 8};
  const auto a = oracle::random_mask(s, 0.2, rng);
  const auto b = oracle::random_mask(s, 0.2, rng);
  const double base = hd95(a, b, kUnitSpacing, -1).value;
  EXPECT_NEAR(hd95(a, b, {2.5, 2.5, 2.5}, -1).value, 2.5 * base, 1e-9);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 95.0), 9.5);
  EXPECT_DOUBLE_EQ(percentile({3}, 95.0), 3.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 50.0), 2.5);
}

TEST(Report, PerfectCase) {
  std::vector<std::uint8_t> labels(64, 0);
  labels[1] = 1;
  labels[2] = 2;
  labels[3] = 4;
  const auto r = regions_from_labels(labels, {4, 4, 4});
  const auto rep = evaluate_case("c", r, r, kUnitSpacing);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(rep.dice[i], 1.0);
    EXPECT_EQ(rep.hd95[i], 0.0);
  }
}

TEST(Report, TwoCaseMeanAndPopulationStd) {
  CaseReport a, b;
  a.case_id = "b";
  b.case_id = "a";
  a.dice = {0.6, 1, 1};
  b.dice = {0.8, 1, 1};
  const auto t = evaluate_dataset({a, b});
  EXPECT_NEAR(t.columns[0].mean, 0.7, 1e-12);
  EXPECT_NEAR(t.columns[0].std, 0.1, 1e-12);
  EXPECT_EQ(t.n_cases, 2u);
  EXPECT_EQ(t.cell(0), "0.7000±0.1000");
  EXPECT_THROW(evaluate_dataset({}), EmptyInputError);
}

TEST(Report, ColumnOrder) {
  const std::array<std::string, 6> expected{"Dice_ET", "Dice_WT", "Dice_TC", "HD95_ET", "HD95_WT", "HD95_TC"};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(AggregateTable::kColumns[i], expected[i]);
  CaseReport r;
  r.case_id = "x";
  std::ostringstream os;
  write_case_csv(os, {r});
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "case_id,Dice_ET,Dice_WT,Dice_TC,HD95_ET,HD95_WT,HD95_TC,Degenerate_ET,Degenerate_WT,Degenerate_TC");
}
