#include "univa/config.h"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace univa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw Error("expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& v) {
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw Error("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw Error("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("expected true/false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

// Each accessor takes a projection from the config to the member it edits.
template <typename Proj>
Field int_f(std::string key, Proj proj) {
  return {std::move(key),
          [proj](PipelineConfig& c, const std::string& v) {
            auto& ref = proj(c);
            ref = parse_int<std::remove_reference_t<decltype(ref)>>(v);
          },
          [proj](const PipelineConfig& c) { return std::to_string(proj(c)); }};
}

template <typename Proj>
Field dbl_f(std::string key, Proj proj) {
  return {std::move(key), [proj](PipelineConfig& c, const std::string& v) { proj(c) = parse_double(v); },
          [proj](const PipelineConfig& c) { return fmt_double(proj(c)); }};
}

template <typename Proj>
Field bool_f(std::string key, Proj proj) {
  return {std::move(key), [proj](PipelineConfig& c, const std::string& v) { proj(c) = parse_bool(v); },
          [proj](const PipelineConfig& c) { return std::string(proj(c) ? "true" : "false"); }};
}

template <typename Proj>
Field tail_f(std::string key, Proj proj) {
  return {std::move(key),
          [proj](PipelineConfig& c, const std::string& v) {
            if (v == "single") proj(c) = TailStrategy::kSingleFallback;
            else if (v == "cluster") proj(c) = TailStrategy::kBidDistributionCluster;
            else throw Error("expected single|cluster, got '" + v + "'");
          },
          [proj](const PipelineConfig& c) {
            return std::string(proj(c) == TailStrategy::kSingleFallback ? "single" : "cluster");
          }};
}

#define P(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(int_f("seed", P(seed)));
    v.push_back(int_f("world.catalog_size", P(world.catalog_size)));
    v.push_back(int_f("world.embedding_dim", P(world.embedding_dim)));
    v.push_back(int_f("world.user_count", P(world.user_count)));
    v.push_back(int_f("world.latent_dim", P(world.latent_dim)));
    v.push_back(int_f("world.opt_goal_alphabet", P(world.opt_goal_alphabet)));
    v.push_back(int_f("world.roi_alphabet", P(world.roi_alphabet)));
    v.push_back(int_f("world.industry_alphabet", P(world.industry_alphabet)));
    v.push_back(dbl_f("world.category_skew", P(world.category_skew)));
    v.push_back(dbl_f("world.bid_log_mean", P(world.bid_log_mean)));
    v.push_back(dbl_f("world.bid_log_std", P(world.bid_log_std)));
    v.push_back(dbl_f("world.industry_bid_spread", P(world.industry_bid_spread)));
    v.push_back(dbl_f("world.opt_goal_bid_spread", P(world.opt_goal_bid_spread)));
    v.push_back(dbl_f("world.embedding_noise", P(world.embedding_noise)));
    v.push_back(dbl_f("world.affinity_scale", P(world.affinity_scale)));
    v.push_back(dbl_f("world.affinity_bias", P(world.affinity_bias)));
    v.push_back(dbl_f("world.quality_std", P(world.quality_std)));
    v.push_back(dbl_f("world.bid_affinity_conflict", P(world.bid_affinity_conflict)));
    v.push_back(dbl_f("world.gmv_multiplier", P(world.gmv_multiplier)));
    v.push_back(int_f("world.history_length", P(world.history_length)));
    v.push_back(dbl_f("world.targeting_density", P(world.targeting_density)));
    v.push_back(int_f("world.segments", P(world.segments)));
    v.push_back(int_f("world.geos", P(world.geos)));
    v.push_back(int_f("world.requests", P(requests)));
    v.push_back(dbl_f("world.train_fraction", P(train_fraction)));

    v.push_back(int_f("tokenizer.semantic_levels", P(tokenizer.semantic_levels)));
    v.push_back(int_f("tokenizer.codebook_size", P(tokenizer.codebook_size)));
    v.push_back(int_f("tokenizer.kmeans_iters", P(tokenizer.kmeans_iters)));
    v.push_back(bool_f("tokenizer.commercial_level", P(tokenizer.commercial_level)));
    v.push_back(dbl_f("tokenizer.opt_goal_coverage", P(tokenizer.opt_goal.coverage)));
    v.push_back(int_f("tokenizer.opt_goal_target", P(tokenizer.opt_goal.target)));
    v.push_back(tail_f("tokenizer.opt_goal_tail", P(tokenizer.opt_goal.tail)));
    v.push_back(dbl_f("tokenizer.roi_coverage", P(tokenizer.roi.coverage)));
    v.push_back(int_f("tokenizer.roi_target", P(tokenizer.roi.target)));
    v.push_back(tail_f("tokenizer.roi_tail", P(tokenizer.roi.tail)));
    v.push_back(dbl_f("tokenizer.industry_coverage", P(tokenizer.industry.coverage)));
    v.push_back(int_f("tokenizer.industry_target", P(tokenizer.industry.target)));
    v.push_back(tail_f("tokenizer.industry_tail", P(tokenizer.industry.tail)));
    v.push_back(int_f("tokenizer.n_min", P(tokenizer.n_min)));
    v.push_back(int_f("tokenizer.n_max", P(tokenizer.n_max)));
    v.push_back(int_f("tokenizer.budget", P(tokenizer.budget)));
    v.push_back({"tokenizer.allocation",
                 [](PipelineConfig& c, const std::string& s) {
                   if (s == "grid_entropy") c.tokenizer.allocation = Allocation::kGridEntropy;
                   else if (s == "proportional") c.tokenizer.allocation = Allocation::kProportional;
                   else throw Error("expected grid_entropy|proportional, got '" + s + "'");
                 },
                 [](const PipelineConfig& c) {
                   return std::string(c.tokenizer.allocation == Allocation::kGridEntropy ? "grid_entropy" : "proportional");
                 }});

    v.push_back(int_f("model.embed_dim", P(model.embed_dim)));
    v.push_back(int_f("model.heads", P(model.heads)));
    v.push_back(int_f("model.encoder_layers", P(model.encoder_layers)));
    v.push_back(int_f("model.ffn_hidden", P(model.ffn_hidden)));
    v.push_back(int_f("model.decoder_layers", P(model.decoder_layers)));
    v.push_back(int_f("model.mor_rounds", P(model.mor_rounds)));
    v.push_back(int_f("model.num_experts", P(model.moe.num_experts)));
    v.push_back(int_f("model.top_k", P(model.moe.top_k)));
    v.push_back(int_f("model.expert_hidden", P(model.moe.expert_hidden)));
    v.push_back(dbl_f("model.bias_step", P(model.moe.bias_step)));
    v.push_back(dbl_f("model.load_decay", P(model.moe.load_decay)));
    v.push_back(int_f("model.max_seq_len", P(model.max_seq_len)));

    v.push_back(int_f("training.epochs", P(training.epochs)));
    v.push_back(int_f("training.batch_size", P(training.batch_size)));
    v.push_back(dbl_f("training.learning_rate", P(training.learning_rate)));
    v.push_back(int_f("training.sl_ratio", P(training.sl_ratio)));
    v.push_back(int_f("training.rl_ratio", P(training.rl_ratio)));
    v.push_back(int_f("training.sl_warmup_epochs", P(training.sl_warmup_epochs)));
    v.push_back(int_f("training.rl_batch_size", P(training.rl_batch_size)));
    v.push_back(int_f("training.ref_sync_interval", P(training.ref_sync_interval)));
    v.push_back(dbl_f("training.gamma", P(training.gamma)));
    v.push_back(dbl_f("training.gae_lambda", P(training.gae_lambda)));
    v.push_back(dbl_f("training.clip_eps", P(training.clip_eps)));
    v.push_back(dbl_f("training.value_weight", P(training.value_weight)));
    v.push_back(int_f("training.beam_width", P(training.rollout.beam_width)));
    v.push_back(int_f("training.mcts_simulations", P(training.rollout.mcts_simulations)));
    v.push_back(dbl_f("training.uct_c", P(training.rollout.uct_c)));
    v.push_back(bool_f("training.puct", P(training.rollout.puct)));
    v.push_back(dbl_f("training.reward_eps", P(training.rollout.reward_eps)));
    v.push_back(bool_f("training.load_balance", P(training.load_balance)));
    v.push_back({"training.sampling",
                 [](PipelineConfig& c, const std::string& s) {
                   if (s == "uniform") c.training.sampling = SamplingMode::kUniform;
                   else if (s == "adaptive") c.training.sampling = SamplingMode::kAdaptive;
                   else throw Error("expected uniform|adaptive, got '" + s + "'");
                 },
                 [](const PipelineConfig& c) {
                   return std::string(c.training.sampling == SamplingMode::kUniform ? "uniform" : "adaptive");
                 }});
    v.push_back(dbl_f("training.sampling_alpha", P(training.sampling_alpha)));
    v.push_back(int_f("training.eval_beam", P(training.eval_beam)));
    v.push_back(int_f("training.eval_requests", P(training.eval_requests)));
    v.push_back(bool_f("training.compare_rl", P(compare_rl)));

    v.push_back(int_f("serving.beam_width", P(serving.beam_width)));
    v.push_back(int_f("serving.top_k", P(serving.top_k)));
    v.push_back(bool_f("serving.use_trie", P(serving.use_trie)));
    v.push_back({"serving.score_mode",
                 [](PipelineConfig& c, const std::string& s) {
                   if (s == "raw") c.serving.score_mode = BeamScoreMode::kRawFused;
                   else if (s == "log_softmax") c.serving.score_mode = BeamScoreMode::kLogSoftmax;
                   else throw Error("expected raw|log_softmax, got '" + s + "'");
                 },
                 [](const PipelineConfig& c) {
                   return std::string(c.serving.score_mode == BeamScoreMode::kRawFused ? "raw" : "log_softmax");
                 }});

    v.push_back({"eval.cutoffs",
                 [](PipelineConfig& c, const std::string& s) {
                   c.eval.cutoffs.clear();
                   std::stringstream ss(s);
                   std::string part;
                   while (std::getline(ss, part, ',')) c.eval.cutoffs.push_back(parse_int<int>(trim(part)));
                 },
                 [](const PipelineConfig& c) {
                   std::string out;
                   for (size_t i = 0; i < c.eval.cutoffs.size(); ++i) out += (i ? "," : "") + std::to_string(c.eval.cutoffs[i]);
                   return out;
                 }});
    v.push_back(int_f("eval.validity_beam", P(eval.validity_beam)));
    v.push_back(int_f("eval.validity_requests", P(eval.validity_requests)));
    v.push_back(bool_f("eval.strategy_grid", P(eval.strategy_grid)));
    return v;
  }();
  return f;
}

#undef P

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void PipelineConfig::apply_seed(uint64_t s) {
  seed = s;
  world.seed = s;
  tokenizer.seed = s;
  model.seed = s;
  training.seed = s;
}

void PipelineConfig::validate() const {
  world.validate();
  tokenizer.validate();
  ModelConfig shape = model;
  shape.level_vocab_sizes = {1};  // resolved from the tokenizer at run time
  shape.validate();
  training.validate();
  if (requests < 2) throw Error("config: world.requests must be >= 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("config: world.train_fraction must lie in (0, 1)");
  if (serving.beam_width < 1 || serving.top_k < 1) throw Error("config: serving.beam_width and top_k must be >= 1");
  if (eval.cutoffs.empty()) throw Error("config: eval.cutoffs must not be empty");
  for (int k : eval.cutoffs)
    if (k < 1) throw Error("config: eval.cutoffs must be >= 1");
  if (eval.validity_beam < 1 || eval.validity_requests < 0) throw Error("config: invalid validity settings");
}

PipelineConfig parse_config(const std::string& text, const PipelineConfig& base) {
  PipelineConfig cfg = base;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (f.key == key) field = &f;
    if (!field) throw Error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      field->set(cfg, value);
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  cfg.apply_seed(cfg.seed);
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string emit_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::string config_hash(const PipelineConfig& cfg, const std::vector<std::string>& prefixes) {
  std::string selected;
  for (const auto& f : fields()) {
    bool keep = prefixes.empty();
    for (const auto& p : prefixes) keep |= f.key.rfind(p, 0) == 0;
    if (keep) selected += f.key + "=" + f.get(cfg) + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(selected)));
  return buf;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace univa
