#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "univa/io.h"
#include "univa/simulator.h"

using namespace univa;

namespace {

WorldConfig small(uint64_t seed) {
  WorldConfig wc;
  wc.catalog_size = 120;
  wc.user_count = 30;
  wc.seed = seed;
  return wc;
}

}  // namespace

TEST(World, SameSeedIsByteIdentical) {
  const World a = generate_world(small(3)), b = generate_world(small(3));
  EXPECT_EQ(catalog_to_jsonl(a.catalog), catalog_to_jsonl(b.catalog));
  EXPECT_EQ(users_to_jsonl(a.users), users_to_jsonl(b.users));
  EXPECT_NE(catalog_to_jsonl(a.catalog), catalog_to_jsonl(generate_world(small(4)).catalog));
}

TEST(World, SingleItemCatalog) {
  WorldConfig wc = small(1);
  wc.catalog_size = 1;
  const World w = generate_world(wc);
  for (const auto& u : w.users) {
    ASSERT_FALSE(u.history.empty());
    for (int64_t id : u.history) EXPECT_EQ(id, 0);
  }
}

TEST(World, AffinityMatchesLatentRecomputation) {
  const World w = generate_world(small(5));
  for (int64_t u = 0; u < 30; u += 7)
    for (int64_t i = 0; i < 120; i += 11) {
      double dot = 0;
      for (int d = 0; d < w.cfg.latent_dim; ++d) dot += w.users[u].preference[d] * w.item_latent[i][d];
      const double want = w.cfg.affinity_scale * dot / std::sqrt(8.0) + w.item_quality[i] + w.cfg.affinity_bias;
      EXPECT_NEAR(w.affinity(u, i), want, 1e-12);
    }
}

TEST(World, RejectsInvalidConfig) {
  WorldConfig wc = small(0);
  wc.targeting_density = 0.0;
  EXPECT_THROW(generate_world(wc), Error);
  wc = small(0);
  wc.catalog_size = 0;
  EXPECT_THROW(generate_world(wc), Error);
}

TEST(Reward, EcpmMatchesHandRecomputation) {
  const World w = generate_world(small(6));
  TokenizerConfig tc;
  tc.codebook_size = 4;
  tc.budget = 400;
  const Tokenizer tok = fit_tokenizer(w.catalog, tc);
  const CatalogIndex index(w.catalog, tok);
  const Request req = generate_requests(w, 1, 2).front();
  for (const auto& [path, ids] : index.paths()) {
    // Resolution: highest bid, then lowest id.
    int64_t best = ids.front();
    for (int64_t id : ids) {
      const auto& a = w.catalog[id];
      const auto& b = w.catalog[best];
      if (a.bid > b.bid || (a.bid == b.bid && id < best)) best = id;
    }
    const double want = 1000.0 * w.catalog[best].bid / (1.0 + std::exp(-w.affinity(req.user_id, best)));
    const double got = ecpm_reward(w, req, path, index);
    EXPECT_NEAR(got, want, 1e-9 * want);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, w.catalog[best].bid * 1000.0);
  }
  SidPath bogus = index.paths().begin()->first;
  bogus.back() = tok.level_vocab_sizes().back() + 3;
  EXPECT_EQ(ecpm_reward(w, req, bogus, index), 0.0);
}

TEST(Reward, MidpointAffinityGivesHalfBid) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0) * 42.0 * 1000.0, 0.5 * 42.0 * 1000.0);
}

TEST(Reward, Normalization) {
  for (double r : normalize_rewards(Vec{3, 3, 3})) EXPECT_EQ(r, 0.0);
  const Vec two = normalize_rewards(Vec{1, 3}, 1e-8);
  EXPECT_NEAR(two[0], -1.0, 1e-6);
  EXPECT_NEAR(two[1], 1.0, 1e-6);

  Rng rng(8);
  std::normal_distribution<double> g(5, 2);
  Vec r(10);
  for (double& v : r) v = g(rng);
  const double eps = 1e-8;
  const Vec z = normalize_rewards(r, eps);
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / 10;
  double var = 0;
  for (double v : r) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / 10);
  const double zm = std::accumulate(z.begin(), z.end(), 0.0) / 10;
  double zv = 0;
  for (double v : z) zv += (v - zm) * (v - zm);
  EXPECT_LT(std::abs(zm), 1e-9);
  EXPECT_LT(std::abs(std::sqrt(zv / 10) - sigma / (sigma + eps)), 1e-6);

  Vec shifted = r;
  for (double& v : shifted) v += 100.0;
  const Vec zs = normalize_rewards(shifted, eps);
  for (size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(zs[i], z[i], 1e-9);
}

TEST(Targeting, FullDensityAndIndustryExclusion) {
  WorldConfig wc = small(7);
  wc.targeting_density = 1.0;
  const World w = generate_world(wc);
  Request req = generate_requests(w, 1, 1).front();
  EXPECT_EQ(targeting_filter(req, w.catalog).size(), w.catalog.size());
  req.targeting.excluded_industries = {w.catalog[0].industry};
  for (int64_t id : targeting_filter(req, w.catalog)) EXPECT_NE(w.catalog[id].industry, w.catalog[0].industry);
  EXPECT_EQ(targeting_filter(req, w.catalog), targeting_filter(req, w.catalog));
}

TEST(Targeting, MeanEligibleFractionTracksDensity) {
  WorldConfig wc = small(8);
  wc.catalog_size = 400;
  wc.targeting_density = 0.3;
  const World w = generate_world(wc);
  double total = 0;
  for (const auto& r : generate_requests(w, 100, 3))
    total += static_cast<double>(targeting_filter(r, w.catalog).size()) / w.catalog.size();
  EXPECT_NEAR(total / 100, 0.3, 0.3 * 0.2);
}

TEST(Targeting, TargetsAreEligible) {
  const World w = generate_world(small(9));
  for (const auto& r : generate_requests(w, 50, 4)) {
    ASSERT_GE(r.target_item, 0);
    EXPECT_TRUE(is_eligible(r.targeting, w.catalog[r.target_item]));
    EXPECT_DOUBLE_EQ(r.target_gmv, w.catalog[r.target_item].gmv);
  }
}

TEST(Sampling, UniformFullBudgetIsWholePool) {
  const std::vector<RequestStats> pool(17);
  const auto picked = sample_training_requests(pool, 17, SamplingMode::kUniform, 1);
  std::vector<size_t> all(17);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(picked, all);
  EXPECT_THROW(sample_training_requests(pool, 18, SamplingMode::kUniform, 1), Error);
}

TEST(Sampling, EqualAdaptiveWeightsAreUniform) {
  std::vector<RequestStats> pool(10, RequestStats{1.0, 1.0});
  std::vector<int> counts(10, 0);
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) ++counts[sample_training_requests(pool, 1, SamplingMode::kAdaptive, s)[0]];
  double chi2 = 0;
  for (int c : counts) chi2 += (c - draws / 10.0) * (c - draws / 10.0) / (draws / 10.0);
  // 9 degrees of freedom: the 0.99 quantile is 21.67.
  EXPECT_LT(chi2, 21.67);
}

TEST(Sampling, DominantWeightIsPickedAlmostAlways) {
  std::vector<RequestStats> pool(20, RequestStats{0.001, 0.001});
  pool[13] = {100.0, 100.0};
  int hits = 0;
  for (int s = 0; s < 1000; ++s) hits += sample_training_requests(pool, 1, SamplingMode::kAdaptive, s)[0] == 13;
  EXPECT_GT(hits, 950);
}

TEST(CatalogIndexTest, ResolvesByBidThenId) {
  const World w = generate_world(small(10));
  TokenizerConfig tc;
  tc.codebook_size = 4;
  tc.budget = 400;
  const Tokenizer tok = fit_tokenizer(w.catalog, tc);
  const CatalogIndex index(w.catalog, tok);
  for (const auto& [path, ids] : index.paths()) {
    for (size_t i = 1; i < ids.size(); ++i) {
      const auto& a = w.catalog[ids[i - 1]];
      const auto& b = w.catalog[ids[i]];
      EXPECT_TRUE(a.bid > b.bid || (a.bid == b.bid && a.id < b.id));
    }
    std::vector<char> mask(w.catalog.size(), 0);
    mask[ids.back()] = 1;
    EXPECT_EQ(index.resolve(path, &mask), ids.back());
    mask[ids.back()] = 0;
    EXPECT_FALSE(index.resolve(path, &mask).has_value());
  }
}
