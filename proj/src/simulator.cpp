#include "univa/simulator.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace univa {

void WorldConfig::validate() const {
  if (catalog_size < 1 || embedding_dim < 1 || user_count < 1 || latent_dim < 1) throw Error("world: sizes must be >= 1");
  if (opt_goal_alphabet < 1 || roi_alphabet < 1 || industry_alphabet < 1) throw Error("world: alphabets must be >= 1");
  if (!(targeting_density > 0.0 && targeting_density <= 1.0)) throw Error("world: targeting_density must be in (0, 1]");
  if (segments < 1 || geos < 1 || history_length < 1) throw Error("world: segments, geos, history_length must be >= 1");
}

namespace {

int sample_zipf(Rng& rng, int alphabet, double skew) {
  Vec w(alphabet);
  for (int c = 0; c < alphabet; ++c) w[c] = 1.0 / std::pow(c + 1.0, skew);
  std::discrete_distribution<int> d(w.begin(), w.end());
  return d(rng);
}

// Weighted sampling without replacement via exponential keys; returns indices.
std::vector<size_t> weighted_without_replacement(std::span<const double> weights, size_t k, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, size_t>> keys;
  keys.reserve(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    const double w = std::max(weights[i], 1e-300);
    double r = u(rng);
    while (r <= 0.0) r = u(rng);
    keys.emplace_back(std::log(r) / w, i);
  }
  k = std::min(k, keys.size());
  std::partial_sort(keys.begin(), keys.begin() + static_cast<ptrdiff_t>(k), keys.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<size_t> out;
  for (size_t i = 0; i < k; ++i) out.push_back(keys[i].second);
  return out;
}

std::vector<int> organic_tokens_for(const Vec& pref) {
  std::vector<int> dims(pref.size());
  std::iota(dims.begin(), dims.end(), 0);
  std::stable_sort(dims.begin(), dims.end(), [&](int a, int b) { return std::abs(pref[a]) > std::abs(pref[b]); });
  std::vector<int> out;
  for (size_t i = 0; i < std::min<size_t>(2, dims.size()); ++i) out.push_back(2 * dims[i] + (pref[dims[i]] > 0 ? 0 : 1));
  return out;
}

int64_t sample_target(const World& world, int64_t user, const std::vector<char>& eligible, Rng& rng) {
  Vec w(world.catalog.size(), 0.0);
  bool any = false;
  for (size_t i = 0; i < w.size(); ++i) {
    if (!eligible[i]) continue;
    w[i] = sigmoid(world.affinity(user, static_cast<int64_t>(i)));
    any = true;
  }
  if (!any) return -1;
  std::discrete_distribution<size_t> d(w.begin(), w.end());
  return static_cast<int64_t>(d(rng));
}

RequestContext build_context(const World& world, const UserProfile& user, const std::vector<int64_t>& history,
                             int hour, int device) {
  RequestContext ctx;
  const auto& c = world.cfg;
  ctx.user_tokens = {static_cast<int>(user.id), c.user_count + user.segment, c.user_count + c.segments + user.geo};
  ctx.organic_tokens = organic_tokens_for(user.preference);
  ctx.env_tokens = {hour, 6 + device};
  for (int64_t item : history) ctx.item_tokens.push_back(static_cast<int>(item));
  return ctx;
}

}  // namespace

double affinity_of(const WorldConfig& cfg, std::span<const double> preference, std::span<const double> latent,
                   double quality) {
  double dot = 0.0;
  for (size_t i = 0; i < preference.size(); ++i) dot += preference[i] * latent[i];
  return cfg.affinity_scale * dot / std::sqrt(static_cast<double>(cfg.latent_dim)) + quality + cfg.affinity_bias;
}

double World::affinity(int64_t user, int64_t item) const {
  return affinity_of(cfg, users.at(static_cast<size_t>(user)).preference, item_latent.at(static_cast<size_t>(item)),
                     item_quality.at(static_cast<size_t>(item)));
}

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.cfg = cfg;
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Vec industry_offset(cfg.industry_alphabet), opt_offset(cfg.opt_goal_alphabet);
  for (double& o : industry_offset) o = cfg.industry_bid_spread * normal(rng);
  for (double& o : opt_offset) o = cfg.opt_goal_bid_spread * normal(rng);

  // Embedding = fixed projection of (latent, quality) plus noise.
  const int src = cfg.latent_dim + 1;
  std::vector<Vec> proj(cfg.embedding_dim, Vec(src));
  for (auto& row : proj)
    for (double& v : row) v = normal(rng) / std::sqrt(static_cast<double>(src));

  std::lognormal_distribution<double> gmv_noise(0.0, 0.5);
  for (int i = 0; i < cfg.catalog_size; ++i) {
    Vec latent(cfg.latent_dim);
    for (double& v : latent) v = normal(rng);
    const double quality = cfg.quality_std * normal(rng);
    AdItem item;
    item.id = i;
    item.opt_goal = sample_zipf(rng, cfg.opt_goal_alphabet, cfg.category_skew);
    item.roi_target = sample_zipf(rng, cfg.roi_alphabet, cfg.category_skew);
    item.industry = sample_zipf(rng, cfg.industry_alphabet, cfg.category_skew);
    const double log_bid = cfg.bid_log_mean + industry_offset[item.industry] + opt_offset[item.opt_goal] +
                           cfg.bid_log_std * normal(rng) - cfg.bid_affinity_conflict * quality;
    item.bid = std::exp(log_bid);
    item.gmv = item.bid * cfg.gmv_multiplier * gmv_noise(rng);
    item.embedding.assign(cfg.embedding_dim, 0.0);
    for (int d = 0; d < cfg.embedding_dim; ++d) {
      double s = 0.0;
      for (int j = 0; j < cfg.latent_dim; ++j) s += proj[d][j] * latent[j];
      s += proj[d][cfg.latent_dim] * quality;
      item.embedding[d] = s + cfg.embedding_noise * normal(rng);
    }
    w.catalog.push_back(std::move(item));
    w.item_latent.push_back(std::move(latent));
    w.item_quality.push_back(quality);
  }

  std::uniform_int_distribution<int> seg(0, cfg.segments - 1), geo(0, cfg.geos - 1);
  for (int u = 0; u < cfg.user_count; ++u) {
    UserProfile p;
    p.id = u;
    p.preference.resize(cfg.latent_dim);
    for (double& v : p.preference) v = normal(rng);
    p.segment = seg(rng);
    p.geo = geo(rng);
    w.users.push_back(std::move(p));
  }
  for (auto& p : w.users) {
    Vec weights(w.catalog.size());
    for (size_t i = 0; i < weights.size(); ++i) weights[i] = sigmoid(w.affinity(p.id, static_cast<int64_t>(i)));
    for (size_t idx : weighted_without_replacement(weights, static_cast<size_t>(cfg.history_length), rng)) {
      p.history.push_back(static_cast<int64_t>(idx));
    }
  }
  return w;
}

std::vector<Request> generate_requests(const World& world, int count, uint64_t seed) {
  Rng rng(mix64(seed ^ 0x5eed));
  std::uniform_int_distribution<int> pick_user(0, world.cfg.user_count - 1);
  std::uniform_int_distribution<int> hour(0, 5), device(0, 2);
  std::vector<Request> out;
  out.reserve(count);
  for (int r = 0; r < count; ++r) {
    Request req;
    req.id = r;
    req.user_id = pick_user(rng);
    const UserProfile& user = world.users[static_cast<size_t>(req.user_id)];
    req.history = user.history;
    req.context = build_context(world, user, req.history, hour(rng), device(rng));
    req.targeting.segment = user.segment;
    req.targeting.geo = user.geo;
    req.targeting.density = world.cfg.targeting_density;
    req.targeting.salt = mix64(world.cfg.seed * 1315423911ULL + seed + static_cast<uint64_t>(r));
    const auto mask = eligibility_mask(req, world.catalog);
    req.target_item = sample_target(world, req.user_id, mask, rng);
    if (req.target_item >= 0) req.target_gmv = world.catalog[static_cast<size_t>(req.target_item)].gmv;
    out.push_back(std::move(req));
  }
  return out;
}

Request extend_request(const World& world, const Request& request, uint64_t seed) {
  Rng rng(mix64(seed ^ static_cast<uint64_t>(request.id)));
  Request next = request;
  if (request.target_item >= 0) {
    next.history.push_back(request.target_item);
    if (next.history.size() > static_cast<size_t>(world.cfg.history_length)) next.history.erase(next.history.begin());
  }
  const UserProfile& user = world.users.at(static_cast<size_t>(request.user_id));
  next.context = build_context(world, user, next.history, request.context.env_tokens.at(0),
                               request.context.env_tokens.at(1) - 6);
  next.targeting.salt = mix64(request.targeting.salt + seed);
  const auto mask = eligibility_mask(next, world.catalog);
  next.target_item = sample_target(world, next.user_id, mask, rng);
  next.target_gmv = next.target_item >= 0 ? world.catalog[static_cast<size_t>(next.target_item)].gmv : 0.0;
  return next;
}

bool is_eligible(const TargetingRule& rule, const AdItem& item) {
  if (std::find(rule.excluded_industries.begin(), rule.excluded_industries.end(), item.industry) !=
      rule.excluded_industries.end()) {
    return false;
  }
  if (rule.density >= 1.0) return true;
  return hash_unit(rule.salt, static_cast<uint64_t>(item.id), static_cast<uint64_t>(rule.segment),
                   static_cast<uint64_t>(rule.geo)) < rule.density;
}

std::vector<int64_t> targeting_filter(const Request& request, std::span<const AdItem> catalog) {
  std::vector<int64_t> out;
  for (const auto& item : catalog) {
    if (is_eligible(request.targeting, item)) out.push_back(item.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<char> eligibility_mask(const Request& request, std::span<const AdItem> catalog) {
  int64_t max_id = -1;
  for (const auto& item : catalog) max_id = std::max(max_id, item.id);
  std::vector<char> mask(static_cast<size_t>(max_id + 1), 0);
  for (const auto& item : catalog) mask[static_cast<size_t>(item.id)] = is_eligible(request.targeting, item) ? 1 : 0;
  return mask;
}

CatalogIndex::CatalogIndex(std::span<const AdItem> catalog, const Tokenizer& tokenizer) {
  int64_t max_id = -1;
  for (const auto& item : catalog) max_id = std::max(max_id, item.id);
  item_paths_.resize(static_cast<size_t>(max_id + 1));
  std::vector<double> bids(static_cast<size_t>(max_id + 1), 0.0);
  for (const auto& item : catalog) {
    SidPath p = tokenizer.tokenize(item);
    by_path_[p].push_back(item.id);
    item_paths_[static_cast<size_t>(item.id)] = std::move(p);
    bids[static_cast<size_t>(item.id)] = item.bid;
  }
  for (auto& [path, ids] : by_path_) {
    std::sort(ids.begin(), ids.end(), [&](int64_t a, int64_t b) {
      const double ba = bids[static_cast<size_t>(a)], bb = bids[static_cast<size_t>(b)];
      return ba > bb || (ba == bb && a < b);
    });
  }
}

std::optional<int64_t> CatalogIndex::resolve(const SidPath& path, const std::vector<char>* eligible) const {
  auto it = by_path_.find(path);
  if (it == by_path_.end()) return std::nullopt;
  for (int64_t id : it->second) {
    if (eligible == nullptr || (static_cast<size_t>(id) < eligible->size() && (*eligible)[static_cast<size_t>(id)])) {
      return id;
    }
  }
  return std::nullopt;
}

double ecpm_reward(const World& world, const Request& request, const SidPath& path, const CatalogIndex& index,
                   const std::vector<char>* eligible) {
  const auto item = index.resolve(path, eligible);
  if (!item) return 0.0;
  return sigmoid(world.affinity(request.user_id, *item)) * world.catalog[static_cast<size_t>(*item)].bid * 1000.0;
}

Vec normalize_rewards(std::span<const double> rewards, double eps) {
  if (rewards.empty()) throw Error("normalize_rewards: empty reward list");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  Vec out(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (sd + eps);
  return out;
}

std::vector<size_t> sample_training_requests(std::span<const RequestStats> pool, size_t budget, SamplingMode mode,
                                             uint64_t seed, double alpha) {
  if (budget > pool.size()) throw Error("sample_training_requests: budget exceeds pool size");
  Rng rng(seed);
  Vec weights(pool.size(), 1.0);
  if (mode == SamplingMode::kAdaptive) {
    for (size_t i = 0; i < pool.size(); ++i) {
      weights[i] = std::max(0.0, alpha * pool[i].sl_loss + (1.0 - alpha) * pool[i].policy_entropy) + 1e-12;
    }
  }
  std::vector<size_t> picked = weighted_without_replacement(weights, budget, rng);
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace univa
