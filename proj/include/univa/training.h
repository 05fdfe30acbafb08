#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "univa/model.h"
#include "univa/serving.h"
#include "univa/simulator.h"
#include "univa/tokenizer.h"

namespace univa {

enum class TrajectorySource { kBeam, kMcts };

struct Trajectory {
  SidPath actions;
  Vec behavior_probs;  // fused-policy probability of each action at collection time
  Vec values;          // value-head entry of each action at collection time
  double raw_reward = 0.0;
  double normalized_reward = 0.0;
  TrajectorySource source = TrajectorySource::kBeam;
};

/// Terminal-only rewards: the normalized reward at the last step, zero elsewhere.
Vec step_rewards(const Trajectory& t);

struct AdvantageRecord {
  Vec advantages;
  Vec returns;  // returns[l] == advantages[l] + values[l]
  double gamma = 1.0;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double value_weight = 0.5;
};

AdvantageRecord compute_gae(const Trajectory& t, double gamma, double gae_lambda);

struct MctsNode {
  SidPath prefix;
  double visits = 1.0;  // N(n); starts at the initial-visit offset of 1
  std::vector<int> actions;
  Vec edge_visits;
  Vec q;       // running action values, initialized from the value head
  Vec priors;  // fused-policy probabilities, used only in PUCT mode
  std::vector<int> children;  // tree index per action, -1 until created
  double c = 1.0;
};

/// UCT argmax over the node's actions; ties go to the lowest action id.
int mcts_select(const MctsNode& node, bool puct = false);

struct PathEvaluation {
  Vec probs;
  Vec values;
};

/// Fused-policy probability and value entry of every action along `path`.
PathEvaluation evaluate_path(const Model& model, const Tensor& h, const SidPath& path);

using RewardFn = std::function<double(const SidPath&)>;

struct MctsStats {
  size_t simulations = 0;
  size_t nodes = 0;
};

/// One complete root-to-leaf path per simulation, restricted to live prefixes.
/// Returns distinct paths in order of first discovery.
std::vector<SidPath> mcts_rollouts(const Model& model, const Tensor& h, const PersonalizedTrie& ptrie,
                                   int simulations, double c, const RewardFn& normalized_reward,
                                   bool puct = false, MctsStats* stats = nullptr);

struct RolloutConfig {
  int beam_width = 4;
  int mcts_simulations = 4;
  double uct_c = 1.0;
  bool puct = false;
  double reward_eps = 1e-8;
};

/// Beam paths (score order) followed by new MCTS paths, deduplicated, with rewards
/// normalized over the returned set.
std::vector<Trajectory> collect_trajectories(const Model& model, const Tensor& h, const PersonalizedTrie& ptrie,
                                             const RolloutConfig& cfg, const std::function<double(const SidPath&)>& raw_reward);

struct SlSample {
  const RequestContext* context = nullptr;
  SidPath target;
};

/// Teacher-forced generation-head cross entropy summed over levels, averaged over the batch.
Tensor sl_loss(const Model& model, std::span<const SlSample> batch, LoadCounts* loads = nullptr);

/// min(rho * A, clip(rho, 1 - eps, 1 + eps) * A).
double clipped_surrogate(double rho, double advantage, double eps);

struct RlSample {
  const RequestContext* context = nullptr;
  Trajectory trajectory;
  AdvantageRecord advantage;
};

struct RlLoss {
  Tensor loss;  // undefined when every trajectory was skipped
  double ppo = 0.0;
  double value = 0.0;
  double mean_ratio = 0.0;
  size_t steps = 0;
  size_t skipped = 0;
};

/// Clipped PPO on the fused policy against `reference` plus value_weight * MSE on selected value entries.
RlLoss ppo_value_loss(const Model& model, const Model& reference, std::span<const RlSample> batch, double clip_eps,
                      double value_weight, LoadCounts* loads = nullptr);

/// Mean over levels of KL(current || reference) between fused policies along `path`.
double policy_kl(const Model& current, const Model& reference, const RequestContext& ctx, const SidPath& path);

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  /// Applies one update to every parameter accepted by `filter` and clears all gradients.
  void step(ParameterStore& store, const std::function<bool(const std::string&)>& filter = nullptr);

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<Vec> m_, v_;
  std::vector<long> t_;
};

struct TrainingConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int sl_ratio = 1;  // SL batches per cycle
  int rl_ratio = 1;  // RL batches per cycle
  int sl_warmup_epochs = 0;
  int rl_batch_size = 8;
  int ref_sync_interval = 1;  // RL updates between reference syncs
  double gamma = 1.0;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double value_weight = 0.5;
  RolloutConfig rollout;
  bool load_balance = true;
  SamplingMode sampling = SamplingMode::kUniform;
  double sampling_alpha = 0.5;
  int eval_beam = 4;
  int eval_requests = 64;
  uint64_t seed = 0;

  void validate() const;
  /// Non-fatal schedule problems.
  std::vector<std::string> warnings() const;
};

struct TrainingData {
  const World* world = nullptr;
  const Tokenizer* tokenizer = nullptr;
  const CatalogIndex* index = nullptr;
  const Trie* trie = nullptr;
  std::vector<Request> train;
  std::vector<Request> holdout;
};

struct EpochLog {
  int epoch = 0;
  double sl_loss = 0.0;
  double mean_ecpm_top1 = 0.0;
  double kl = 0.0;
  double expert_load_imbalance = 1.0;
  double rl_loss = 0.0;
  size_t rl_updates = 0;
  size_t skipped = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<std::string> warnings;
};

/// Requests that have a target item, paired with the target's SID path.
std::vector<SlSample> supervised_samples(std::span<const Request> requests, const CatalogIndex& index);

/// Mean SL loss over `samples` without recording gradients.
double evaluate_sl_loss(const Model& model, std::span<const SlSample> samples);

/// Mean raw eCPM of the constrained beam's top-1 path (requests with no live path count as 0).
double mean_ecpm_top1(const Model& model, const TrainingData& data, std::span<const Request> requests, int beam_width);

using EpochCallback = std::function<void(const EpochLog&, const Model&)>;

TrainResult train(Model& model, const TrainingConfig& cfg, const TrainingData& data,
                  const EpochCallback& on_epoch = nullptr);

std::string training_log_csv(std::span<const EpochLog> log);

}  // namespace univa
