#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "univa/eval.h"

using namespace univa;

namespace {

EvalSample sample(int64_t truth, double gmv, std::vector<int64_t> ranked) {
  EvalSample s;
  s.truth = truth;
  s.gmv = gmv;
  s.ranked = std::move(ranked);
  return s;
}

std::vector<EvalSample> random_samples(uint64_t seed, int n) {
  Rng rng(seed);
  std::uniform_int_distribution<int64_t> item(0, 29);
  std::uniform_real_distribution<double> gmv(0.0, 500.0);
  std::vector<EvalSample> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int64_t> ranked(30);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::shuffle(ranked.begin(), ranked.end(), rng);
    ranked.resize(20);
    out.push_back(sample(item(rng), 1.0 + gmv(rng), ranked));
  }
  return out;
}

}  // namespace

TEST(Metrics, HitRateHandCases) {
  std::vector<EvalSample> s{sample(1, 5, {1, 2}), sample(3, 5, {1, 2}), sample(2, 5, {2, 1})};
  EXPECT_DOUBLE_EQ(hr_at_k(s, 2), 2.0 / 3.0);
  std::vector<EvalSample> miss{sample(9, 5, {1, 2})};
  EXPECT_DOUBLE_EQ(hr_at_k(miss, 2), 0.0);
  std::vector<EvalSample> full{sample(0, 1, {2, 0, 1}), sample(2, 1, {1, 0, 2})};
  EXPECT_DOUBLE_EQ(hr_at_k(full, 3), 1.0);
  EXPECT_THROW(hr_at_k(std::vector<EvalSample>{}, 1), Error);
}

TEST(Metrics, ValueHitRateHandCases) {
  std::vector<EvalSample> s{sample(1, 10, {1}), sample(2, 90, {1})};
  EXPECT_DOUBLE_EQ(value_hr_at_k(s, 1), 0.1);
  std::vector<EvalSample> all{sample(1, 10, {1}), sample(2, 90, {2})};
  EXPECT_DOUBLE_EQ(value_hr_at_k(all, 1), 1.0);
  std::vector<EvalSample> zero{sample(1, 0, {1}), sample(2, 0, {1})};
  EXPECT_THROW(value_hr_at_k(zero, 1), Error);
}

TEST(Metrics, WeightedNdcgHandCases) {
  std::vector<EvalSample> s{sample(7, 50, {1, 2, 7, 4})};
  EXPECT_DOUBLE_EQ(wndcg_at_k(s, 4), 0.5);
  EXPECT_DOUBLE_EQ(wndcg_at_k(s, 2), 0.0);
  std::vector<EvalSample> ideal{sample(1, 3, {1, 2}), sample(5, 80, {5, 1})};
  EXPECT_DOUBLE_EQ(wndcg_at_k(ideal, 2), 1.0);
  std::vector<EvalSample> zero{sample(1, 0, {1})};
  EXPECT_THROW(wndcg_at_k(zero, 1), Error);
}

TEST(Metrics, WeightedNdcgMatchesDirectComputation) {
  const auto s = random_samples(4, 50);
  for (int k : {1, 5, 20}) {
    double num = 0, den = 0;
    for (const auto& x : s) {
      const double w = std::log10(1.0 + x.gmv);
      den += w;
      for (int r = 0; r < k; ++r)
        if (x.ranked[r] == x.truth) num += w / std::log2(2.0 + r);
    }
    EXPECT_NEAR(wndcg_at_k(s, k), num / den, 1e-12);
  }
}

TEST(Metrics, ValueHrEqualsHrUnderUniformGmv) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto s = random_samples(seed, 40);
    for (auto& x : s) x.gmv = 7.0;
    for (int k : {1, 3, 10, 20}) EXPECT_DOUBLE_EQ(value_hr_at_k(s, k), hr_at_k(s, k));
  }
}

TEST(Metrics, WndcgAtOneIsWeightedHitRate) {
  const auto s = random_samples(9, 60);
  double num = 0, den = 0;
  for (const auto& x : s) {
    const double w = std::log10(1.0 + x.gmv);
    den += w;
    num += w * (x.ranked[0] == x.truth);
  }
  EXPECT_NEAR(wndcg_at_k(s, 1), num / den, 1e-12);
}

TEST(Metrics, MonotoneInCutoff) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = random_samples(seed, 25);
    double hr = 0, vhr = 0, nd = 0;
    for (int k = 1; k <= 20; ++k) {
      EXPECT_GE(hr_at_k(s, k), hr);
      EXPECT_GE(value_hr_at_k(s, k), vhr);
      EXPECT_GE(wndcg_at_k(s, k), nd);
      hr = hr_at_k(s, k);
      vhr = value_hr_at_k(s, k);
      nd = wndcg_at_k(s, k);
      EXPECT_LE(nd, 1.0);
    }
  }
}

TEST(Metrics, CutoffCsv) {
  std::vector<EvalSample> s{sample(1, 10, {1}), sample(2, 90, {1})};
  const std::vector<int> ks{1, 10};
  const std::string csv = metrics_csv(evaluate_cutoffs(s, ks));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,hr,value_hr,wndcg");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(StrategyGrid, EqualWidthCutsAreUniform) {
  const Vec v{1, 2, 3, 10};
  const Vec cuts = equal_width_boundaries(v, 3);
  ASSERT_EQ(cuts.size(), 2u);
  EXPECT_DOUBLE_EQ(cuts[0], 4.0);
  EXPECT_DOUBLE_EQ(cuts[1], 7.0);
}

TEST(StrategyGrid, EqualFrequencyBeatsEqualWidthOnSkewedAndUniform) {
  Rng rng(1);
  std::lognormal_distribution<double> ln(3.0, 1.2);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  for (int kind = 0; kind < 2; ++kind) {
    std::vector<double> g;
    for (int i = 0; i < 500; ++i) g.push_back(kind ? ln(rng) : u(rng));
    const std::vector<std::vector<double>> groups{g};
    const GridCell ef = evaluate_binning(groups, InBinStrategy::kEqualFrequency, 3, 10, 10, 0);
    const GridCell ew = evaluate_binning(groups, InBinStrategy::kEqualWidth, 3, 10, 10, 0);
    EXPECT_GE(ef.weighted_entropy, ew.weighted_entropy - 1e-12);
    EXPECT_LE(ef.vocab, 10);
  }
}

TEST(StrategyGrid, AllCellsRespectBudgetAndReproduce) {
  WorldConfig wc;
  wc.catalog_size = 800;
  wc.seed = 2;
  const World w = generate_world(wc);
  TokenizerConfig tc;
  tc.budget = 2048;
  const auto cells = strategy_grid(w.catalog, tc);
  ASSERT_EQ(cells.size(), 9u);
  std::set<std::pair<int, int>> combos;
  for (const auto& c : cells) {
    EXPECT_LE(c.vocab, tc.budget);
    combos.insert({static_cast<int>(c.grouping), static_cast<int>(c.in_bin)});
  }
  EXPECT_EQ(combos.size(), 9u);
  EXPECT_EQ(grid_csv(cells), grid_csv(strategy_grid(w.catalog, tc)));
}
