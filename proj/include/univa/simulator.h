#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "univa/common.h"
#include "univa/model.h"
#include "univa/tokenizer.h"

namespace univa {

struct WorldConfig {
  uint64_t seed = 0;
  int catalog_size = 400;
  int embedding_dim = 16;
  int user_count = 100;
  int latent_dim = 8;
  int opt_goal_alphabet = 30;
  int roi_alphabet = 12;
  int industry_alphabet = 20;
  double category_skew = 1.3;  // Zipf exponent of categorical codes
  double bid_log_mean = 4.0;
  double bid_log_std = 0.6;
  double industry_bid_spread = 0.6;  // std of per-industry log-mean offsets
  double opt_goal_bid_spread = 0.4;
  double embedding_noise = 0.1;
  double affinity_scale = 2.5;
  double affinity_bias = -3.0;
  double quality_std = 0.7;
  double bid_affinity_conflict = 0.0;  // log-bid decrease per unit of item quality
  double gmv_multiplier = 2.0;
  int history_length = 8;
  double targeting_density = 0.3;
  int segments = 4;
  int geos = 5;

  void validate() const;
};

struct UserProfile {
  int64_t id = 0;
  Vec preference;
  int segment = 0;
  int geo = 0;
  std::vector<int64_t> history;
};

/// Eligibility inputs carried by a request; self-contained so serving needs no world.
struct TargetingRule {
  int segment = 0;
  int geo = 0;
  std::vector<int> excluded_industries;
  double density = 1.0;
  uint64_t salt = 0;
};

struct Request {
  int64_t id = 0;
  int64_t user_id = 0;
  RequestContext context;
  std::vector<int64_t> history;
  TargetingRule targeting;
  int64_t target_item = -1;  // ground-truth next conversion
  double target_gmv = 0.0;
};

struct RewardRecord {
  double raw_ecpm = 0.0;
  double normalized = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  double eps = 1e-8;
};

struct World {
  WorldConfig cfg;
  std::vector<AdItem> catalog;  // item id == index
  std::vector<Vec> item_latent;
  Vec item_quality;
  std::vector<UserProfile> users;  // user id == index

  double affinity(int64_t user, int64_t item) const;
  int user_vocab() const { return cfg.user_count + cfg.segments + cfg.geos; }
  int organic_vocab() const { return 2 * cfg.latent_dim; }
  static constexpr int kEnvVocab = 9;  // 6 hour buckets + 3 device kinds
  int item_vocab() const { return cfg.catalog_size; }
};

double affinity_of(const WorldConfig& cfg, std::span<const double> preference, std::span<const double> latent,
                   double quality);

World generate_world(const WorldConfig& cfg);

/// Request-level context tokens and a target sampled among eligible items with weight sigmoid(affinity).
std::vector<Request> generate_requests(const World& world, int count, uint64_t seed);

/// Experimental: appends the target to the history and resamples a new target.
Request extend_request(const World& world, const Request& request, uint64_t seed);

bool is_eligible(const TargetingRule& rule, const AdItem& item);
std::vector<int64_t> targeting_filter(const Request& request, std::span<const AdItem> catalog);
std::vector<char> eligibility_mask(const Request& request, std::span<const AdItem> catalog);

/// Maps every full SID path to the catalog items that tokenize to it.
class CatalogIndex {
 public:
  CatalogIndex() = default;
  CatalogIndex(std::span<const AdItem> catalog, const Tokenizer& tokenizer);

  /// Highest bid, then lowest id, optionally restricted to eligible items.
  std::optional<int64_t> resolve(const SidPath& path, const std::vector<char>* eligible = nullptr) const;
  const std::map<SidPath, std::vector<int64_t>>& paths() const { return by_path_; }
  const SidPath& path_of(int64_t item) const { return item_paths_.at(static_cast<size_t>(item)); }

 private:
  std::map<SidPath, std::vector<int64_t>> by_path_;  // ids sorted by (bid desc, id asc)
  std::vector<SidPath> item_paths_;
};

/// sigmoid(affinity) * bid * 1000 for the resolved item; 0 when the path resolves to nothing.
double ecpm_reward(const World& world, const Request& request, const SidPath& path, const CatalogIndex& index,
                   const std::vector<char>* eligible = nullptr);

/// Per-request standardization (population std).
Vec normalize_rewards(std::span<const double> rewards, double eps = 1e-8);

enum class SamplingMode { kUniform, kAdaptive };

struct RequestStats {
  double sl_loss = 0.0;
  double policy_entropy = 0.0;
};

/// Draws `budget` distinct pool indices. Adaptive mode weights request i by
/// alpha * sl_loss_i + (1 - alpha) * policy_entropy_i.
std::vector<size_t> sample_training_requests(std::span<const RequestStats> pool, size_t budget, SamplingMode mode,
                                             uint64_t seed, double alpha = 0.5);

}  // namespace univa
