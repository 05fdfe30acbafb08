#include "univa/training.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace univa {

namespace {

Vec log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  Vec out(logits.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

Vec fused_row(const LevelOutputs& out, int level) {
  const Vec& g = out.gen[static_cast<size_t>(level)].value();
  const Vec& v = out.value[static_cast<size_t>(level)].value();
  Vec f(g.size());
  for (size_t i = 0; i < f.size(); ++i) f[i] = g[i] + v[i];
  return f;
}

int select_index(const MctsNode& node, bool puct) {
  if (node.actions.empty()) throw Error("mcts_select: empty action set");
  if (node.visits < 1.0) throw Error("mcts_select: node visit count must be >= 1");
  int best = -1;
  double best_score = 0.0;
  for (size_t i = 0; i < node.actions.size(); ++i) {
    double bonus;
    if (puct) {
      const double p = i < node.priors.size() ? node.priors[i] : 1.0 / static_cast<double>(node.actions.size());
      bonus = node.c * p * std::sqrt(node.visits) / (1.0 + node.edge_visits[i]);
    } else {
      bonus = node.c * std::sqrt(std::log(node.visits) / (1.0 + node.edge_visits[i]));
    }
    const double score = node.q[i] + bonus;
    if (best < 0 || score > best_score ||
        (score == best_score && node.actions[i] < node.actions[static_cast<size_t>(best)])) {
      best = static_cast<int>(i);
      best_score = score;
    }
  }
  return best;
}

}  // namespace

Vec step_rewards(const Trajectory& t) {
  Vec r(t.actions.size(), 0.0);
  if (!r.empty()) r.back() = t.normalized_reward;
  return r;
}

AdvantageRecord compute_gae(const Trajectory& t, double gamma, double gae_lambda) {
  const size_t n = t.actions.size();
  if (t.values.size() != n) throw Error("compute_gae: values and actions differ in length");
  const Vec r = step_rewards(t);
  AdvantageRecord rec;
  rec.gamma = gamma;
  rec.gae_lambda = gae_lambda;
  rec.advantages.assign(n, 0.0);
  rec.returns.assign(n, 0.0);
  double running = 0.0;
  for (size_t i = n; i-- > 0;) {
    const double next_v = i + 1 < n ? t.values[i + 1] : 0.0;
    const double delta = r[i] + gamma * next_v - t.values[i];
    running = delta + gamma * gae_lambda * running;
    rec.advantages[i] = running;
    rec.returns[i] = running + t.values[i];
  }
  return rec;
}

int mcts_select(const MctsNode& node, bool puct) {
  return node.actions[static_cast<size_t>(select_index(node, puct))];
}

PathEvaluation evaluate_path(const Model& model, const Tensor& h, const SidPath& path) {
  ag::NoGradGuard no_grad;
  const LevelOutputs out = model.decode_teacher(path, h);
  PathEvaluation ev;
  for (size_t l = 0; l < path.size(); ++l) {
    const Vec lp = log_softmax(fused_row(out, static_cast<int>(l)));
    ev.probs.push_back(std::exp(lp[static_cast<size_t>(path[l])]));
    ev.values.push_back(out.value[l].value()[static_cast<size_t>(path[l])]);
  }
  return ev;
}

std::vector<SidPath> mcts_rollouts(const Model& model, const Tensor& h, const PersonalizedTrie& ptrie,
                                   int simulations, double c, const RewardFn& normalized_reward, bool puct,
                                   MctsStats* stats) {
  const int levels = model.config().sid_levels();
  std::vector<MctsNode> tree;
  auto make_node = [&](SidPath prefix) {
    MctsNode n;
    n.c = c;
    n.actions = ptrie.valid_next(prefix);
    if (!n.actions.empty()) {
      const DualHeadOutput out = model.decode_step(prefix, h);
      for (int a : n.actions) {
        n.q.push_back(out.value_scores[static_cast<size_t>(a)]);
        n.priors.push_back(out.policy[static_cast<size_t>(a)]);
      }
    }
    n.edge_visits.assign(n.actions.size(), 0.0);
    n.children.assign(n.actions.size(), -1);
    n.prefix = std::move(prefix);
    tree.push_back(std::move(n));
    return static_cast<int>(tree.size()) - 1;
  };
  make_node({});
  std::vector<SidPath> found;
  std::set<SidPath> seen;
  if (tree[0].actions.empty()) return found;

  for (int sim = 0; sim < simulations; ++sim) {
    std::vector<std::pair<int, int>> edges;  // (node, action index)
    int cur = 0;
    SidPath path;
    while (static_cast<int>(path.size()) < levels) {
      const int idx = select_index(tree[static_cast<size_t>(cur)], puct);
      edges.emplace_back(cur, idx);
      path.push_back(tree[static_cast<size_t>(cur)].actions[static_cast<size_t>(idx)]);
      if (static_cast<int>(path.size()) == levels) break;
      int child = tree[static_cast<size_t>(cur)].children[static_cast<size_t>(idx)];
      if (child < 0) {
        child = make_node(path);
        tree[static_cast<size_t>(cur)].children[static_cast<size_t>(idx)] = child;
      }
      cur = child;
      // Live prefixes always have a live continuation; guard against inconsistent tries anyway.
      if (tree[static_cast<size_t>(cur)].actions.empty()) break;
    }
    if (static_cast<int>(path.size()) != levels) continue;
    const double reward = normalized_reward(path);
    for (const auto& [node, idx] : edges) {
      MctsNode& n = tree[static_cast<size_t>(node)];
      n.visits += 1.0;
      n.edge_visits[static_cast<size_t>(idx)] += 1.0;
      n.q[static_cast<size_t>(idx)] += (reward - n.q[static_cast<size_t>(idx)]) / n.edge_visits[static_cast<size_t>(idx)];
    }
    if (seen.insert(path).second) found.push_back(path);
    if (stats) ++stats->simulations;
  }
  if (stats) stats->nodes = tree.size();
  return found;
}

std::vector<Trajectory> collect_trajectories(const Model& model, const Tensor& h, const PersonalizedTrie& ptrie,
                                             const RolloutConfig& cfg,
                                             const std::function<double(const SidPath&)>& raw_reward) {
  std::vector<Trajectory> out;
  const BeamResult beam = beam_search(model, h, &ptrie, cfg.beam_width);
  if (beam.paths.empty()) return out;

  std::map<SidPath, double> raw;
  auto reward_of = [&](const SidPath& p) {
    auto it = raw.find(p);
    if (it != raw.end()) return it->second;
    const double r = raw_reward(p);
    raw.emplace(p, r);
    return r;
  };

  std::vector<std::pair<SidPath, TrajectorySource>> paths;
  std::set<SidPath> seen;
  Vec beam_rewards;
  for (const auto& sp : beam.paths) {
    if (seen.insert(sp.path).second) paths.emplace_back(sp.path, TrajectorySource::kBeam);
    beam_rewards.push_back(reward_of(sp.path));
  }
  if (cfg.mcts_simulations > 0) {
    const double n = static_cast<double>(beam_rewards.size());
    const double mean = std::accumulate(beam_rewards.begin(), beam_rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : beam_rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    auto normalized = [&](const SidPath& p) { return (reward_of(p) - mean) / (sd + cfg.reward_eps); };
    for (auto& p : mcts_rollouts(model, h, ptrie, cfg.mcts_simulations, cfg.uct_c, normalized, cfg.puct)) {
      if (seen.insert(p).second) paths.emplace_back(std::move(p), TrajectorySource::kMcts);
    }
  }

  Vec rewards;
  for (auto& [path, source] : paths) {
    Trajectory t;
    const PathEvaluation ev = evaluate_path(model, h, path);
    t.actions = path;
    t.behavior_probs = ev.probs;
    t.values = ev.values;
    t.raw_reward = reward_of(path);
    t.source = source;
    rewards.push_back(t.raw_reward);
    out.push_back(std::move(t));
  }
  const Vec norm = normalize_rewards(rewards, cfg.reward_eps);
  for (size_t i = 0; i < out.size(); ++i) out[i].normalized_reward = norm[i];
  return out;
}

Tensor sl_loss(const Model& model, std::span<const SlSample> batch, LoadCounts* loads) {
  if (batch.empty()) throw Error("sl_loss: empty batch");
  std::vector<Tensor> terms;
  for (const auto& s : batch) {
    const Tensor h = model.encode(*s.context);
    const LevelOutputs out = model.decode_teacher(s.target, h, loads);
    for (size_t l = 0; l < s.target.size(); ++l) {
      const Tensor lp = ag::log_softmax_rows(out.gen[l]);
      terms.push_back(ag::scale(ag::pick(lp, 0, s.target[l]), -1.0));
    }
  }
  return ag::scale(ag::sum_scalars(terms), 1.0 / static_cast<double>(batch.size()));
}

double clipped_surrogate(double rho, double advantage, double eps) {
  return std::min(rho * advantage, std::clamp(rho, 1.0 - eps, 1.0 + eps) * advantage);
}

RlLoss ppo_value_loss(const Model& model, const Model& reference, std::span<const RlSample> batch, double clip_eps,
                      double value_weight, LoadCounts* loads) {
  RlLoss result;
  std::vector<Tensor> surrogates, squares;
  double ratio_sum = 0.0;
  for (const auto& s : batch) {
    const SidPath& a = s.trajectory.actions;
    Vec ref_lp(a.size());
    {
      ag::NoGradGuard no_grad;
      const Tensor h_ref = reference.encode(*s.context);
      const LevelOutputs ro = reference.decode_teacher(a, h_ref);
      for (size_t l = 0; l < a.size(); ++l) ref_lp[l] = log_softmax(fused_row(ro, static_cast<int>(l)))[static_cast<size_t>(a[l])];
    }
    const Tensor h = model.encode(*s.context);
    const LevelOutputs out = model.decode_teacher(a, h, loads);
    std::vector<Tensor> surr, sq;
    double ratios = 0.0;
    bool ok = true;
    for (size_t l = 0; l < a.size() && ok; ++l) {
      const Tensor fused = ag::add(out.gen[l], out.value[l]);
      const Tensor lp = ag::pick(ag::log_softmax_rows(fused), 0, a[l]);
      const Tensor ratio = ag::exp(ag::add_const(lp, -ref_lp[l]));
      if (!std::isfinite(ref_lp[l]) || !std::isfinite(ratio.item())) {
        ok = false;
        break;
      }
      ratios += ratio.item();
      const double adv = s.advantage.advantages[l];
      surr.push_back(ag::minimum(ag::scale(ratio, adv), ag::scale(ag::clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)));
      const Tensor v = ag::pick(out.value[l], 0, a[l]);
      sq.push_back(ag::square(ag::add_const(v, -s.advantage.returns[l])));
    }
    if (!ok) {
      ++result.skipped;
      continue;
    }
    ratio_sum += ratios;
    surrogates.insert(surrogates.end(), surr.begin(), surr.end());
    squares.insert(squares.end(), sq.begin(), sq.end());
  }
  result.steps = surrogates.size();
  if (surrogates.empty()) return result;
  const double inv = 1.0 / static_cast<double>(result.steps);
  const Tensor ppo = ag::scale(ag::sum_scalars(surrogates), -inv);
  const Tensor value = ag::scale(ag::sum_scalars(squares), inv);
  result.loss = ag::add(ppo, ag::scale(value, value_weight));
  result.ppo = ppo.item();
  result.value = value.item();
  result.mean_ratio = ratio_sum * inv;
  return result;
}

double policy_kl(const Model& current, const Model& reference, const RequestContext& ctx, const SidPath& path) {
  ag::NoGradGuard no_grad;
  const LevelOutputs p = current.decode_teacher(path, current.encode(ctx));
  const LevelOutputs q = reference.decode_teacher(path, reference.encode(ctx));
  double total = 0.0;
  for (size_t l = 0; l < path.size(); ++l) {
    const Vec lp = log_softmax(fused_row(p, static_cast<int>(l)));
    const Vec lq = log_softmax(fused_row(q, static_cast<int>(l)));
    double kl = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    total += kl;
  }
  return path.empty() ? 0.0 : total / static_cast<double>(path.size());
}

void Adam::step(ParameterStore& store, const std::function<bool(const std::string&)>& filter) {
  const auto& entries = store.entries();
  if (m_.size() != entries.size()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
    t_.resize(entries.size(), 0);
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, tensor] = entries[i];
    if (filter && !filter(name)) continue;
    Tensor p = tensor;
    const Vec& g = p.grad();
    if (g.size() != p.size()) continue;
    if (m_[i].size() != g.size()) {
      m_[i].assign(g.size(), 0.0);
      v_[i].assign(g.size(), 0.0);
    }
    ++t_[i];
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_[i]));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_[i]));
    Vec& w = p.mutable_value();
    for (size_t j = 0; j < g.size(); ++j) {
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
      w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
  store.zero_grad();
}

void TrainingConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw Error(std::string("training config: ") + what);
  };
  need(epochs >= 0, "epochs must be >= 0");
  need(batch_size >= 1 && rl_batch_size >= 1, "batch sizes must be >= 1");
  need(learning_rate > 0, "learning_rate must be > 0");
  need(sl_ratio >= 0 && rl_ratio >= 0 && sl_ratio + rl_ratio > 0, "sl_ratio and rl_ratio must be >= 0, not both 0");
  need(sl_warmup_epochs >= 0, "sl_warmup_epochs must be >= 0");
  need(ref_sync_interval >= 1, "ref_sync_interval must be >= 1");
  need(gamma >= 0 && gamma <= 1, "gamma must lie in [0, 1]");
  need(gae_lambda >= 0 && gae_lambda <= 1, "gae_lambda must lie in [0, 1]");
  need(clip_eps > 0 && clip_eps < 1, "clip_eps must lie in (0, 1)");
  need(value_weight >= 0, "value_weight must be >= 0");
  need(rollout.beam_width >= 1 && rollout.mcts_simulations >= 0, "rollout beam_width >= 1, mcts_simulations >= 0");
  need(rollout.uct_c >= 0 && rollout.reward_eps > 0, "uct_c >= 0 and reward_eps > 0");
  need(sampling_alpha >= 0 && sampling_alpha <= 1, "sampling_alpha must lie in [0, 1]");
  need(eval_beam >= 1 && eval_requests >= 0, "eval_beam >= 1 and eval_requests >= 0");
}

std::vector<std::string> TrainingConfig::warnings() const {
  std::vector<std::string> w;
  if (sl_ratio == 0 && rl_ratio > 0 && sl_warmup_epochs == 0) {
    w.push_back("sl_ratio is 0 and there is no SL warm-up: RL starts from a randomly initialized policy");
  }
  if (rl_ratio > 0 && rollout.beam_width < 2 && rollout.mcts_simulations == 0) {
    w.push_back("RL rollouts yield a single trajectory per request: normalized rewards are all zero");
  }
  return w;
}

std::vector<SlSample> supervised_samples(std::span<const Request> requests, const CatalogIndex& index) {
  std::vector<SlSample> out;
  for (const auto& r : requests) {
    if (r.target_item < 0) continue;
    out.push_back({&r.context, index.path_of(r.target_item)});
  }
  return out;
}

double evaluate_sl_loss(const Model& model, std::span<const SlSample> samples) {
  if (samples.empty()) return 0.0;
  ag::NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : samples) total += sl_loss(model, std::span<const SlSample>(&s, 1)).item();
  return total / static_cast<double>(samples.size());
}

double mean_ecpm_top1(const Model& model, const TrainingData& data, std::span<const Request> requests,
                      int beam_width) {
  if (requests.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : requests) {
    const auto eligible = eligibility_mask(r, data.world->catalog);
    const PersonalizedTrie pt = personalize(*data.trie, eligible);
    Tensor h;
    {
      ag::NoGradGuard no_grad;
      h = model.encode(r.context);
    }
    const BeamResult beam = beam_search(model, h, &pt, beam_width);
    if (!beam.paths.empty()) total += ecpm_reward(*data.world, r, beam.paths.front().path, *data.index, &eligible);
  }
  return total / static_cast<double>(requests.size());
}

namespace {

void balance_routers(Model& model, const LoadCounts& loads) {
  model.accumulate_loads(loads);
  for (auto& r : model.routers()) update_load_balance(r, model.config().moe.bias_step, model.config().moe.load_decay);
}

std::vector<size_t> epoch_order(const Model& model, const TrainingConfig& cfg, const TrainingData& data,
                                std::span<const SlSample> samples, int epoch, Rng& rng) {
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  if (cfg.sampling == SamplingMode::kAdaptive && !samples.empty()) {
    // Difficulty (SL loss) and uncertainty (root policy entropy) weight the draw.
    std::vector<RequestStats> stats(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
      stats[i].sl_loss = evaluate_sl_loss(model, samples.subspan(i, 1));
      Tensor h;
      {
        ag::NoGradGuard no_grad;
        h = model.encode(*samples[i].context);
      }
      const DualHeadOutput root = model.decode_step({}, h);
      double ent = 0.0;
      for (double p : root.policy)
        if (p > 0) ent -= p * std::log(p);
      stats[i].policy_entropy = ent;
    }
    const size_t budget = std::max<size_t>(1, samples.size() / 2);
    order = sample_training_requests(stats, budget, SamplingMode::kAdaptive,
                                     mix64(cfg.seed ^ static_cast<uint64_t>(epoch)), cfg.sampling_alpha);
  }
  (void)data;
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

TrainResult train(Model& model, const TrainingConfig& cfg, const TrainingData& data, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!data.world || !data.tokenizer || !data.index || !data.trie) throw Error("train: incomplete training data");
  TrainResult result;
  result.warnings = cfg.warnings();

  Rng rng(mix64(cfg.seed + 0x7f4a7c15ULL));
  Adam opt(cfg.learning_rate);
  Model reference = model;

  // SL and RL draw from the same request order; each request maps to its SL sample when it has a target.
  const std::vector<SlSample> sl_all = supervised_samples(data.train, *data.index);
  std::vector<const Request*> with_target;
  for (const auto& r : data.train)
    if (r.target_item >= 0) with_target.push_back(&r);

  const std::vector<Request>& eval_pool = data.holdout.empty() ? data.train : data.holdout;
  const std::span<const Request> eval_reqs(eval_pool.data(),
                                           std::min(eval_pool.size(), static_cast<size_t>(cfg.eval_requests)));
  const std::vector<SlSample> kl_samples = supervised_samples(eval_reqs, *data.index);

  const bool sl_only_schedule = cfg.rl_ratio == 0;
  const int cycle = cfg.sl_ratio + cfg.rl_ratio;
  size_t rl_updates_total = 0;
  auto not_value_head = [](const std::string& name) { return !is_value_head_parameter(name); };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    const bool rl_active = !sl_only_schedule && epoch > cfg.sl_warmup_epochs;
    const std::vector<size_t> order = epoch_order(model, cfg, data, sl_all, epoch, rng);
    double rl_loss_sum = 0.0;
    size_t cursor = 0;
    for (int k = 0; cursor < order.size(); ++k) {
      const bool is_rl = rl_active && (k % cycle) >= cfg.sl_ratio;
      const bool is_sl = !is_rl && (cfg.sl_ratio > 0 || !rl_active);
      const size_t take = std::min(order.size() - cursor, static_cast<size_t>(is_rl ? cfg.rl_batch_size : cfg.batch_size));
      std::span<const size_t> idx(order.data() + cursor, take);
      cursor += take;
      LoadCounts loads = model.empty_load_counts();
      if (is_sl) {
        std::vector<SlSample> batch;
        for (size_t i : idx) batch.push_back(sl_all[i]);
        const Tensor loss = sl_loss(model, batch, &loads);
        if (!std::isfinite(loss.item())) {
          throw Error("train: SL loss became non-finite at epoch " + std::to_string(epoch));
        }
        ag::backward(loss);
        opt.step(model.params(), not_value_head);
      } else {
        if (rl_updates_total % static_cast<size_t>(cfg.ref_sync_interval) == 0) reference.copy_from(model);
        std::vector<RlSample> batch;
        for (size_t i : idx) {
          const Request& req = *with_target[i];
          const auto eligible = eligibility_mask(req, data.world->catalog);
          const PersonalizedTrie pt = personalize(*data.trie, eligible);
          Tensor h;
          {
            ag::NoGradGuard no_grad;
            h = reference.encode(req.context);
          }
          auto raw = [&](const SidPath& p) { return ecpm_reward(*data.world, req, p, *data.index, &eligible); };
          for (auto& t : collect_trajectories(reference, h, pt, cfg.rollout, raw)) {
            RlSample s;
            s.context = &req.context;
            s.advantage = compute_gae(t, cfg.gamma, cfg.gae_lambda);
            s.advantage.clip_eps = cfg.clip_eps;
            s.advantage.value_weight = cfg.value_weight;
            s.trajectory = std::move(t);
            batch.push_back(std::move(s));
          }
        }
        if (batch.empty()) continue;
        const RlLoss rl = ppo_value_loss(model, reference, batch, cfg.clip_eps, cfg.value_weight, &loads);
        log.skipped += rl.skipped;
        if (!rl.loss.defined()) continue;
        if (!std::isfinite(rl.loss.item())) throw Error("train: RL loss became non-finite at epoch " + std::to_string(epoch));
        ag::backward(rl.loss);
        opt.step(model.params());
        rl_loss_sum += rl.loss.item();
        ++rl_updates_total;
        ++log.rl_updates;
      }
      if (cfg.load_balance) balance_routers(model, loads);
    }

    log.sl_loss = evaluate_sl_loss(model, sl_all);
    if (!std::isfinite(log.sl_loss)) throw Error("train: SL loss became non-finite at epoch " + std::to_string(epoch));
    log.rl_loss = log.rl_updates ? rl_loss_sum / static_cast<double>(log.rl_updates) : 0.0;
    log.mean_ecpm_top1 = mean_ecpm_top1(model, data, eval_reqs, cfg.eval_beam);
    double kl = 0.0;
    for (const auto& s : kl_samples) kl += policy_kl(model, reference, *s.context, s.target);
    log.kl = kl_samples.empty() ? 0.0 : kl / static_cast<double>(kl_samples.size());
    log.expert_load_imbalance = load_imbalance(model.routers());
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, model);
  }
  return result;
}

std::string training_log_csv(std::span<const EpochLog> log) {
  std::ostringstream os;
  os << "epoch,sl_loss,mean_ecpm_top1,kl,expert_load_imbalance\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.sl_loss, e.mean_ecpm_top1, e.kl,
                  e.expert_load_imbalance);
    os << buf;
  }
  return os.str();
}

}  // namespace univa
