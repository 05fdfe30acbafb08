#include "univa/pipeline.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace univa {

namespace fs = std::filesystem;

RequestSplit split_requests(std::vector<Request> requests, double train_fraction, uint64_t seed) {
  Rng rng(mix64(seed ^ 0x5b117ULL));
  std::shuffle(requests.begin(), requests.end(), rng);
  const auto n_train = static_cast<size_t>(std::llround(train_fraction * static_cast<double>(requests.size())));
  RequestSplit split;
  split.train.assign(requests.begin(), requests.begin() + static_cast<ptrdiff_t>(n_train));
  split.test.assign(requests.begin() + static_cast<ptrdiff_t>(n_train), requests.end());
  return split;
}

ModelConfig resolve_model_config(const ModelConfig& base, const World& world, const Tokenizer& tokenizer) {
  ModelConfig m = base;
  m.level_vocab_sizes = tokenizer.level_vocab_sizes();
  m.user_vocab = world.user_vocab();
  m.organic_vocab = world.organic_vocab();
  m.env_vocab = World::kEnvVocab;
  m.item_vocab = world.item_vocab();
  m.max_seq_len = std::max(m.max_seq_len, 3 + 2 + 2 + world.cfg.history_length);
  m.validate();
  return m;
}

TokenizerConfig semantic_only_config(const TokenizerConfig& cfg) {
  TokenizerConfig s = cfg;
  s.semantic_levels = cfg.semantic_levels + (cfg.commercial_level ? 1 : 0);
  s.commercial_level = false;
  return s;
}

std::vector<Prediction> serve_requests(const Model& model, std::span<const Request> requests,
                                       std::span<const AdItem> catalog, const Trie& trie, const CatalogIndex& index,
                                       const ServingConfig& cfg, ServeStats* stats) {
  std::vector<Prediction> out;
  for (const auto& r : requests) {
    const RetrievalResult res = retrieve(model, r, catalog, trie, cfg.beam_width, cfg.top_k, cfg.use_trie, cfg.score_mode);
    Prediction p;
    p.request_id = r.id;
    for (const auto& it : res.items) {
      p.items.push_back(it.item);
      p.scores.push_back(it.score);
    }
    if (stats) {
      const auto eligible = eligibility_mask(r, catalog);
      ++stats->requests;
      stats->total_paths += res.beam.paths.size();
      for (const auto& sp : res.beam.paths) stats->valid_paths += index.resolve(sp.path, &eligible).has_value();
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

bool stage_cached(const fs::path& dir, const std::string& hash) {
  const fs::path marker = dir / "stage.hash";
  if (!fs::exists(marker)) return false;
  return read_text(marker.string()) == hash + "\n";
}

void mark_stage(const fs::path& dir, const std::string& hash) { write_text((dir / "stage.hash").string(), hash + "\n"); }

template <typename F>
void run_stage(const char* name, std::ostream* log, F&& f) {
  if (log) *log << "[pipeline] stage " << name << "\n";
  try {
    f();
  } catch (const std::exception& e) {
    throw Error(std::string("pipeline stage '") + name + "' failed: " + e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg_in, const std::string& out_dir, std::ostream* log) {
  PipelineConfig cfg = cfg_in;
  cfg.apply_seed(cfg_in.seed);
  cfg.validate();
  PipelineResult result;
  const fs::path root(out_dir);
  fs::create_directories(root);
  write_text((root / "config.resolved.txt").string(), emit_config(cfg));

  World world;
  RequestSplit split;
  run_stage("world", log, [&] {
    const fs::path dir = root / "world";
    fs::create_directories(dir);
    world = generate_world(cfg.world);
    split = split_requests(generate_requests(world, cfg.requests, mix64(cfg.seed ^ 0x2e9u)), cfg.train_fraction, cfg.seed);
    const std::string hash = config_hash(cfg, {"seed", "world."});
    if (stage_cached(dir, hash)) {
      result.stages_cached.push_back("world");
      return;
    }
    write_text((dir / "world_config.json").string(), world_config_to_json(cfg.world));
    write_text((dir / "catalog.jsonl").string(), catalog_to_jsonl(world.catalog));
    write_text((dir / "users.jsonl").string(), users_to_jsonl(world.users));
    write_text((dir / "requests_train.jsonl").string(), requests_to_jsonl(split.train));
    write_text((dir / "requests_test.jsonl").string(), requests_to_jsonl(split.test));
    write_text((dir / "truth_test.jsonl").string(), truth_to_jsonl(split.test));
    mark_stage(dir, hash);
    result.stages_run.push_back("world");
  });

  Tokenizer tokenizer;
  run_stage("tokenizer", log, [&] {
    const fs::path dir = root / "tokenizer";
    fs::create_directories(dir);
    const std::string hash = config_hash(cfg, {"seed", "world.", "tokenizer.", "eval.strategy_grid"});
    if (stage_cached(dir, hash)) {
      tokenizer = load_tokenizer((dir / "tokenizer.json").string());
      result.stages_cached.push_back("tokenizer");
      return;
    }
    tokenizer = fit_tokenizer(world.catalog, cfg.tokenizer);
    save_tokenizer(tokenizer, (dir / "tokenizer.json").string());
    const Tokenizer semantic = fit_tokenizer(world.catalog, semantic_only_config(cfg.tokenizer));
    write_text((dir / "dispersion.csv").string(),
               dispersion_csv(path_dispersion_stats(world.catalog, semantic), path_dispersion_stats(world.catalog, tokenizer)));
    if (cfg.eval.strategy_grid) {
      write_text((dir / "strategy_grid.csv").string(), grid_csv(strategy_grid(world.catalog, cfg.tokenizer)));
    }
    mark_stage(dir, hash);
    result.stages_run.push_back("tokenizer");
  });

  const CatalogIndex index(world.catalog, tokenizer);
  const Trie trie(world.catalog, tokenizer);
  const ModelConfig model_cfg = resolve_model_config(cfg.model, world, tokenizer);

  struct Variant {
    std::string name;
    TrainingConfig training;
  };
  std::vector<Variant> variants;
  if (cfg.training.rl_ratio > 0) variants.push_back({"sl_rl", cfg.training});
  if (cfg.training.rl_ratio == 0 || cfg.compare_rl) {
    TrainingConfig sl = cfg.training;
    sl.rl_ratio = 0;
    sl.sl_ratio = std::max(1, sl.sl_ratio);
    variants.push_back({"sl_only", sl});
  }

  TrainingData data;
  data.world = &world;
  data.tokenizer = &tokenizer;
  data.index = &index;
  data.trie = &trie;
  data.train = split.train;
  data.holdout = split.test;

  std::vector<Model> models;
  run_stage("train", log, [&] {
    const std::string hash = config_hash(cfg, {"seed", "world.", "tokenizer.", "model.", "training."});
    for (const auto& v : variants) {
      const fs::path dir = root / "train" / v.name;
      fs::create_directories(dir);
      if (stage_cached(dir, hash)) {
        models.push_back(Model::load((dir / "model.ckpt").string()));
        result.stages_cached.push_back("train/" + v.name);
        continue;
      }
      Model model(model_cfg);
      model.save((dir / "init.ckpt").string());
      const TrainResult tr = train(model, v.training, data, [&](const EpochLog& e, const Model&) {
        if (log) {
          *log << "[train/" << v.name << "] epoch " << e.epoch << " sl_loss " << fmt(e.sl_loss) << " ecpm "
               << fmt(e.mean_ecpm_top1) << " kl " << fmt(e.kl) << "\n";
        }
      });
      for (const auto& w : tr.warnings) result.warnings.push_back(v.name + ": " + w);
      write_text((dir / "train_log.csv").string(), training_log_csv(tr.log));
      model.save((dir / "model.ckpt").string());
      mark_stage(dir, hash);
      models.push_back(std::move(model));
      result.stages_run.push_back("train/" + v.name);
    }
  });

  std::vector<std::vector<Prediction>> predictions(variants.size());
  run_stage("serve", log, [&] {
    const fs::path dir = root / "serve";
    fs::create_directories(dir);
    std::ostringstream stats_csv;
    stats_csv << "variant,requests,valid_paths,total_paths\n";
    for (size_t i = 0; i < variants.size(); ++i) {
      ServeStats st;
      predictions[i] = serve_requests(models[i], split.test, world.catalog, trie, index, cfg.serving, &st);
      write_text((dir / ("predictions_" + variants[i].name + ".jsonl")).string(), predictions_to_jsonl(predictions[i]));
      stats_csv << variants[i].name << ',' << st.requests << ',' << st.valid_paths << ',' << st.total_paths << '\n';
    }
    write_text((dir / "serve_stats.csv").string(), stats_csv.str());
    result.stages_run.push_back("serve");
  });

  run_stage("eval", log, [&] {
    const fs::path dir = root / "eval";
    fs::create_directories(dir);
    std::vector<TruthRecord> truth;
    for (const auto& r : split.test)
      if (r.target_item >= 0) truth.push_back({r.id, r.target_item, r.target_gmv});
    std::ostringstream cmp;
    cmp << "variant,mean_ecpm_top1";
    for (int k : cfg.eval.cutoffs) cmp << ",hr@" << k << ",value_hr@" << k << ",wndcg@" << k;
    cmp << '\n';
    for (size_t i = 0; i < variants.size(); ++i) {
      const auto samples = join_samples(predictions[i], truth);
      const auto rows = evaluate_cutoffs(samples, cfg.eval.cutoffs);
      write_text((dir / ("metrics_" + variants[i].name + ".csv")).string(), metrics_csv(rows));
      cmp << variants[i].name << ',' << fmt(mean_ecpm_top1(models[i], data, split.test, cfg.serving.beam_width));
      for (const auto& r : rows) cmp << ',' << fmt(r.hr) << ',' << fmt(r.value_hr) << ',' << fmt(r.wndcg);
      cmp << '\n';
    }
    write_text((dir / "comparison.csv").string(), cmp.str());
    const size_t n = std::min(split.test.size(), static_cast<size_t>(cfg.eval.validity_requests));
    const auto rows = trie_validity_report(models.front(), std::span<const Request>(split.test.data(), n), world.catalog,
                                           trie, index, cfg.eval.validity_beam);
    write_text((dir / "trie_validity.csv").string(), validity_csv(rows));
    result.stages_run.push_back("eval");
  });
  return result;
}

}  // namespace univa
