#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "support.h"
#include "univa/training.h"

using namespace univa;
using namespace univa::testing;

namespace {

Trajectory trajectory(SidPath actions, Vec values, double reward) {
  Trajectory t;
  t.actions = std::move(actions);
  t.values = std::move(values);
  t.behavior_probs.assign(t.actions.size(), 0.5);
  t.normalized_reward = reward;
  return t;
}

// A_l = sum_{j>=l} (g*lam)^{j-l} delta_j with delta_j written out directly.
Vec gae_oracle(const Trajectory& t, double g, double lam) {
  const size_t n = t.actions.size();
  Vec a(n, 0.0);
  for (size_t l = 0; l < n; ++l)
    for (size_t j = l; j < n; ++j) {
      const double r = j + 1 == n ? t.normalized_reward : 0.0;
      const double next = j + 1 < n ? t.values[j + 1] : 0.0;
      a[l] += std::pow(g * lam, static_cast<double>(j - l)) * (r + g * next - t.values[j]);
    }
  return a;
}

MctsNode node(std::vector<int> actions, Vec q, Vec n, double visits, double c) {
  MctsNode m;
  m.actions = std::move(actions);
  m.q = std::move(q);
  m.edge_visits = std::move(n);
  m.visits = visits;
  m.c = c;
  return m;
}

RlSample rl_sample(const RequestContext* ctx, SidPath path, Vec adv, Vec ret) {
  RlSample s;
  s.context = ctx;
  s.trajectory.actions = std::move(path);
  s.advantage.advantages = std::move(adv);
  s.advantage.returns = std::move(ret);
  return s;
}

}  // namespace

// --- GAE --------------------------------------------------------------------

TEST(Gae, UndiscountedTerminalRewardPropagates) {
  const auto rec = compute_gae(trajectory({0, 1, 2}, {0, 0, 0}, 1.7), 1.0, 1.0);
  for (double a : rec.advantages) EXPECT_DOUBLE_EQ(a, 1.7);
}

TEST(Gae, PerfectCriticGivesZeroAdvantage) {
  const auto rec = compute_gae(trajectory({0, 1, 2}, {0.8, 0.8, 0.8}, 0.8), 1.0, 0.95);
  for (double a : rec.advantages) EXPECT_NEAR(a, 0.0, 1e-15);
}

TEST(Gae, MatchesDirectSumOracle) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int rep = 0; rep < 50; ++rep) {
    const auto t = trajectory({0, 0, 0}, {u(rng), u(rng), u(rng)}, u(rng));
    const double g = 0.5 + 0.5 * std::abs(u(rng)) / 2, lam = std::abs(u(rng)) / 2;
    const auto rec = compute_gae(t, g, lam);
    const Vec oracle = gae_oracle(t, g, lam);
    for (size_t l = 0; l < 3; ++l) {
      EXPECT_NEAR(rec.advantages[l], oracle[l], 1e-9);
      EXPECT_DOUBLE_EQ(rec.returns[l], rec.advantages[l] + t.values[l]);
    }
  }
}

TEST(Gae, LinearInRewardsAndValues) {
  const auto t = trajectory({0, 0, 0, 0}, {0.3, -0.2, 1.1, 0.4}, -0.9);
  auto scaled = t;
  for (double& v : scaled.values) v *= 3.5;
  scaled.normalized_reward *= 3.5;
  const auto a = compute_gae(t, 0.97, 0.9), b = compute_gae(scaled, 0.97, 0.9);
  for (size_t l = 0; l < 4; ++l) EXPECT_NEAR(b.advantages[l], 3.5 * a.advantages[l], 1e-12);
}

// --- MCTS selection ---------------------------------------------------------

TEST(Mcts, HandUctScores) {
  const auto n = node({4, 7}, {0.5, 0.1}, {1, 0}, 2.0, 1.0);
  EXPECT_NEAR(0.5 + std::sqrt(std::log(2.0) / 2.0), 1.089, 1e-3);
  EXPECT_NEAR(0.1 + std::sqrt(std::log(2.0)), 0.933, 1e-3);
  EXPECT_EQ(mcts_select(n), 4);
}

TEST(Mcts, SingletonGreedyTiesAndErrors) {
  EXPECT_EQ(mcts_select(node({3}, {-5}, {0}, 1, 1)), 3);
  EXPECT_EQ(mcts_select(node({0, 1, 2}, {0.2, 0.9, 0.4}, {0, 9, 0}, 10, 0.0)), 1);
  EXPECT_EQ(mcts_select(node({5, 2, 8}, {0.4, 0.4, 0.1}, {1, 1, 1}, 4, 1.0)), 2);
  EXPECT_THROW(mcts_select(node({}, {}, {}, 1, 1)), Error);
  EXPECT_THROW(mcts_select(node({1}, {0}, {0}, 0.5, 1)), Error);
}

TEST(Mcts, PuctUsesPriors) {
  auto n = node({0, 1}, {0.0, 0.0}, {0, 0}, 4, 1.0);
  n.priors = {0.2, 0.8};
  EXPECT_EQ(mcts_select(n, true), 1);
}

// --- PPO --------------------------------------------------------------------

TEST(Ppo, ClippedSurrogateHandCase) {
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 2.0, 0.2), 2.4);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.1, 1.0, 0.2), 1.1);
}

TEST(Ppo, RatioIdentityWhenReferenceEqualsModel) {
  Model model(tiny_config({3, 4}));
  const Model ref = model;
  const RequestContext c1 = tiny_context(1), c2 = tiny_context(2);
  const std::vector<RlSample> batch{rl_sample(&c1, {0, 3}, {0.7, -0.2}, {0.1, 0.2}),
                                    rl_sample(&c2, {2, 1}, {1.5, 0.4}, {0.0, -0.3})};
  const RlLoss l = ppo_value_loss(model, ref, batch, 0.2, 0.5);
  EXPECT_NEAR(l.mean_ratio, 1.0, 1e-12);
  EXPECT_NEAR(l.ppo, -(0.7 - 0.2 + 1.5 + 0.4) / 4.0, 1e-9);
  EXPECT_EQ(l.steps, 4u);
  EXPECT_EQ(l.skipped, 0u);
}

TEST(Ppo, ValueLossZeroAtPerfectRegression) {
  Model model(tiny_config({3, 4}));
  const RequestContext ctx = tiny_context(3);
  const SidPath path{1, 2};
  Vec v;
  {
    const auto out = model.decode_teacher(path, model.encode(ctx));
    v = {out.value[0].value()[1], out.value[1].value()[2]};
  }
  const std::vector<RlSample> batch{rl_sample(&ctx, path, {0.0, 0.0}, v)};
  EXPECT_NEAR(ppo_value_loss(model, model, batch, 0.2, 0.5).value, 0.0, 1e-20);
}

TEST(Ppo, ClippedRegionHasZeroGradient) {
  Model model(tiny_config({3, 4}));
  const Model ref = model;
  const RequestContext ctx = tiny_context(4);
  const SidPath path{2, 1};
  // Push the current policy toward the chosen tokens so rho > 1 + eps at both steps.
  for (int l = 0; l < 2; ++l) {
    Tensor b = model.params().get("head.gen.b" + std::to_string(l));
    b.mutable_value()[static_cast<size_t>(path[l])] += 3.0;
  }
  const std::vector<RlSample> batch{rl_sample(&ctx, path, {1.0, 2.0}, {0.0, 0.0})};
  const RlLoss probe = ppo_value_loss(model, ref, batch, 0.2, 0.0);
  ASSERT_GT(probe.mean_ratio, 1.5);
  const auto check = finite_difference_check(
      model, [&] { return ppo_value_loss(model, ref, batch, 0.2, 0.0).loss; }, nullptr, 2);
  model.params().zero_grad();
  ag::backward(ppo_value_loss(model, ref, batch, 0.2, 0.0).loss);
  for (const auto& [name, t] : model.params().entries())
    for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
  EXPECT_GT(check.checked, 0u);
  // Numeric gradients are flat too: every relative error is measured against the 1e-4 floor.
  EXPECT_LT(check.worst, 1e-6);
}

TEST(Ppo, NonFiniteRatioSkipsTrajectory) {
  Model model(tiny_config({3, 4}));
  Model ref = model;
  Tensor b = ref.params().get("head.gen.b0");
  b.mutable_value()[0] = -1e6;  // reference probability underflows to 0
  const RequestContext ctx = tiny_context(5);
  const std::vector<RlSample> batch{rl_sample(&ctx, {0, 1}, {1.0, 1.0}, {0, 0}),
                                    rl_sample(&ctx, {1, 1}, {1.0, 1.0}, {0, 0})};
  const RlLoss l = ppo_value_loss(model, ref, batch, 0.2, 0.5);
  EXPECT_EQ(l.skipped, 1u);
  EXPECT_EQ(l.steps, 2u);
}

TEST(Ppo, CombinedLossMatchesFiniteDifferences) {
  Model model(tiny_config({3, 4}, 7));
  Model ref = model;
  Rng rng(2);
  std::normal_distribution<double> g(0, 0.01);
  for (const auto& [name, t] : ref.params().entries()) {
    Tensor p = t;
    for (double& v : p.mutable_value()) v += g(rng);
  }
  const RequestContext c1 = tiny_context(11), c2 = tiny_context(12);
  const std::vector<RlSample> batch{rl_sample(&c1, {0, 3}, {0.7, -0.4}, {0.3, 0.1}),
                                    rl_sample(&c2, {2, 1}, {-1.1, 0.9}, {-0.5, 0.6})};
  const auto check = finite_difference_check(
      model, [&] { return ppo_value_loss(model, ref, batch, 0.2, 0.5).loss; }, nullptr);
  EXPECT_LT(check.worst, 1e-3) << check.worst_param;
}

// --- SL ---------------------------------------------------------------------

TEST(Sl, UniformPolicyLossIsLevelsTimesLogVocab) {
  Model model(tiny_config({4, 4, 4}));
  for (const auto& [name, t] : model.params().entries())
    if (name.rfind("head.gen.", 0) == 0) {
      Tensor p = t;
      std::fill(p.mutable_value().begin(), p.mutable_value().end(), 0.0);
    }
  const RequestContext ctx = tiny_context(1);
  const std::vector<SlSample> batch{{&ctx, {0, 3, 2}}, {&ctx, {1, 1, 1}}};
  EXPECT_NEAR(sl_loss(model, batch).item(), 3 * std::log(4.0), 1e-12);
}

TEST(Sl, CertainPolicyLossIsZero) {
  Model model(tiny_config({3, 3}));
  const SidPath target{2, 0};
  for (int l = 0; l < 2; ++l) {
    Tensor w = model.params().get("head.gen.w" + std::to_string(l));
    std::fill(w.mutable_value().begin(), w.mutable_value().end(), 0.0);
    Tensor b = model.params().get("head.gen.b" + std::to_string(l));
    b.mutable_value() = {0.0, 0.0, 0.0};
    b.mutable_value()[static_cast<size_t>(target[l])] = 60.0;
  }
  const RequestContext ctx = tiny_context(2);
  const std::vector<SlSample> batch{{&ctx, target}};
  EXPECT_NEAR(sl_loss(model, batch).item(), 0.0, 1e-20);
}

TEST(Sl, RejectsOutOfVocabularyTarget) {
  Model model(tiny_config({3, 3}));
  const RequestContext ctx = tiny_context(2);
  const std::vector<SlSample> batch{{&ctx, {0, 3}}};
  EXPECT_THROW(sl_loss(model, batch), Error);
}

TEST(Sl, GradientMatchesFiniteDifferencesAndSkipsValueHead) {
  Model model(tiny_config({3, 5}, 3));
  const RequestContext c1 = tiny_context(21), c2 = tiny_context(22);
  const std::vector<SlSample> batch{{&c1, {0, 4}}, {&c2, {2, 1}}};
  const auto check = finite_difference_check(model, [&] { return sl_loss(model, batch); },
                                             [](const std::string& n) { return !is_value_head_parameter(n); });
  EXPECT_GT(check.checked, 40u);
  EXPECT_LT(check.worst, 1e-3) << check.worst_param;
  model.params().zero_grad();
  ag::backward(sl_loss(model, batch));
  for (const auto& [name, t] : model.params().entries())
    if (is_value_head_parameter(name))
      for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
}

TEST(Adam, FilteredParametersStayFixed) {
  Model model(tiny_config({3, 3}));
  const Model before = model;
  const RequestContext ctx = tiny_context(2);
  const std::vector<SlSample> batch{{&ctx, {1, 2}}};
  ag::backward(sl_loss(model, batch));
  Adam opt(1e-2);
  opt.step(model.params(), [](const std::string& n) { return !is_value_head_parameter(n); });
  const auto& a = model.params().entries();
  const auto& b = before.params().entries();
  bool trunk_moved = false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (is_value_head_parameter(a[i].first)) EXPECT_EQ(a[i].second.value(), b[i].second.value());
    else trunk_moved |= a[i].second.value() != b[i].second.value();
  }
  EXPECT_TRUE(trunk_moved);
}

TEST(Kl, ZeroAfterSyncPositiveAfterUpdate) {
  Model model(tiny_config({3, 3}));
  Model ref(tiny_config({3, 3}, 99));
  ref.copy_from(model);
  const RequestContext ctx = tiny_context(8);
  EXPECT_DOUBLE_EQ(policy_kl(model, ref, ctx, {1, 1}), 0.0);
  const std::vector<SlSample> batch{{&ctx, {1, 2}}};
  ag::backward(sl_loss(model, batch));
  Adam(1e-2).step(model.params());
  EXPECT_GT(policy_kl(model, ref, ctx, {1, 1}), 0.0);
}

// --- rollouts ---------------------------------------------------------------

class Rollouts : public ::testing::Test {
 protected:
  Rollouts()
      : tok(grid_tokenizer()),
        catalog(grid_catalog()),
        trie(catalog, tok),
        model(tiny_config({3, 3}, 5)),
        ptrie(personalize(trie, std::vector<char>(catalog.size(), 1))),
        ctx(tiny_context(3)),
        h(model.encode(ctx)) {}

  double reward(const SidPath& p) const { return catalog[static_cast<size_t>(p[0] * 3 + p[1])].bid; }

  Tokenizer tok;
  std::vector<AdItem> catalog;
  Trie trie;
  Model model;
  PersonalizedTrie ptrie;
  RequestContext ctx;
  Tensor h;
};

TEST_F(Rollouts, FullBeamEnumeratesEveryPathInScoreOrder) {
  RolloutConfig cfg;
  cfg.beam_width = 9;
  cfg.mcts_simulations = 0;
  const auto ts = collect_trajectories(model, h, ptrie, cfg, [&](const SidPath& p) { return reward(p); });
  ASSERT_EQ(ts.size(), 9u);
  std::vector<std::pair<double, SidPath>> oracle;
  for (const auto& p : all_paths({3, 3})) oracle.push_back({fused_path_score(model, h, p), p});
  std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (size_t i = 0; i < 9; ++i) EXPECT_EQ(ts[i].actions, oracle[i].second);
  double mean = 0;
  for (const auto& t : ts) mean += t.normalized_reward;
  EXPECT_NEAR(mean / 9, 0.0, 1e-12);
}

TEST_F(Rollouts, BeamTopOneIsExhaustiveArgmax) {
  RolloutConfig cfg;
  cfg.beam_width = 2;
  cfg.mcts_simulations = 0;
  const auto ts = collect_trajectories(model, h, ptrie, cfg, [&](const SidPath& p) { return reward(p); });
  SidPath best;
  double bs = -1e300;
  for (const auto& p : all_paths({3, 3})) {
    const double s = fused_path_score(model, h, p);
    if (s > bs) bs = s, best = p;
  }
  EXPECT_EQ(ts.front().actions, best);
}

TEST_F(Rollouts, DuplicatePathsAppearOnce) {
  RolloutConfig cfg;
  cfg.beam_width = 3;
  cfg.mcts_simulations = 30;
  const auto ts = collect_trajectories(model, h, ptrie, cfg, [&](const SidPath& p) { return reward(p); });
  std::set<SidPath> distinct;
  size_t beam = 0;
  for (const auto& t : ts) {
    distinct.insert(t.actions);
    beam += t.source == TrajectorySource::kBeam;
    ASSERT_EQ(t.behavior_probs.size(), 2u);
    for (double p : t.behavior_probs) {
      EXPECT_GT(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
  }
  EXPECT_EQ(distinct.size(), ts.size());
  EXPECT_EQ(beam, 3u);
  EXPECT_GT(ts.size(), 3u);
  EXPECT_LE(ts.size(), 9u);
}

TEST_F(Rollouts, RestrictedToLivePaths) {
  std::vector<char> eligible(catalog.size(), 0);
  eligible[4] = eligible[8] = 1;
  const PersonalizedTrie narrow = personalize(trie, eligible);
  RolloutConfig cfg;
  cfg.beam_width = 5;
  cfg.mcts_simulations = 10;
  const auto ts = collect_trajectories(model, h, narrow, cfg, [&](const SidPath& p) { return reward(p); });
  ASSERT_EQ(ts.size(), 2u);
  for (const auto& t : ts) EXPECT_TRUE(t.actions == SidPath({1, 1}) || t.actions == SidPath({2, 2}));
}

// --- schedule ---------------------------------------------------------------

TEST(Schedule, WarnsWhenRlStartsFromScratch) {
  TrainingConfig cfg;
  cfg.sl_ratio = 0;
  EXPECT_FALSE(cfg.warnings().empty());
  cfg.sl_ratio = 1;
  EXPECT_TRUE(cfg.warnings().empty());
}

TEST(Schedule, PureSlLossDecreasesOnToyWorld) {
  WorldConfig wc;
  wc.catalog_size = 60;
  wc.user_count = 20;
  wc.seed = 4;
  const World world = generate_world(wc);
  TokenizerConfig tc;
  tc.codebook_size = 4;
  tc.budget = 300;
  const Tokenizer tok = fit_tokenizer(world.catalog, tc);
  const CatalogIndex index(world.catalog, tok);
  const Trie trie(world.catalog, tok);
  const auto reqs = generate_requests(world, 60, 9);
  ModelConfig mc = tiny_config(tok.level_vocab_sizes());
  mc.embed_dim = 16;
  mc.user_vocab = world.user_vocab();
  mc.organic_vocab = world.organic_vocab();
  mc.env_vocab = World::kEnvVocab;
  mc.item_vocab = world.item_vocab();
  mc.max_seq_len = 32;
  Model model(mc);
  TrainingConfig cfg;
  cfg.epochs = 5;
  cfg.rl_ratio = 0;
  cfg.learning_rate = 3e-3;
  cfg.eval_requests = 8;
  TrainingData data{&world, &tok, &index, &trie,
                    std::vector<Request>(reqs.begin(), reqs.begin() + 48),
                    std::vector<Request>(reqs.begin() + 48, reqs.end())};
  const TrainResult tr = train(model, cfg, data);
  ASSERT_EQ(tr.log.size(), 5u);
  for (size_t e = 1; e < tr.log.size(); ++e) EXPECT_LT(tr.log[e].sl_loss, tr.log[e - 1].sl_loss) << "epoch " << e;
  const std::string csv = training_log_csv(tr.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,sl_loss,mean_ecpm_top1,kl,expert_load_imbalance");
}
