// univa: command-line front end for the generative ad retrieval pipeline.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "univa/config.h"
#include "univa/eval.h"
#include "univa/io.h"
#include "univa/pipeline.h"

namespace fs = std::filesystem;
using namespace univa;

namespace {

PipelineConfig resolve_config(const std::string& path, const std::optional<uint64_t>& seed) {
  PipelineConfig cfg = path.empty() ? PipelineConfig{} : load_config(path);
  if (seed) cfg.apply_seed(*seed);
  cfg.validate();
  return cfg;
}

std::vector<int> parse_cutoffs(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoi(part));
  return out;
}

World world_for(const PipelineConfig& cfg) { return generate_world(cfg.world); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"univa: value-aligned generative ad retrieval"};
  app.require_subcommand(1);

  std::string config_path, out;
  std::optional<uint64_t> seed;
  auto common = [&](CLI::App* sub, bool need_out) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--seed", seed, "global seed (overrides the config)");
    auto* o = sub->add_option("--out", out, "output path");
    if (need_out) o->required();
  };

  auto* world_cmd = app.add_subcommand("world", "generate a synthetic world");
  common(world_cmd, true);

  auto* tok_cmd = app.add_subcommand("tokenizer", "fit, apply, or inspect the SID tokenizer");
  tok_cmd->require_subcommand(1);
  std::string catalog_path, tokenizer_path;
  auto* tok_fit = tok_cmd->add_subcommand("fit", "fit on a catalog");
  common(tok_fit, true);
  tok_fit->add_option("--catalog", catalog_path, "catalog JSONL")->required();
  auto* tok_encode = tok_cmd->add_subcommand("encode", "emit the SID path of every item");
  common(tok_encode, false);
  tok_encode->add_option("--tokenizer", tokenizer_path)->required();
  tok_encode->add_option("--catalog", catalog_path)->required();
  auto* tok_stats = tok_cmd->add_subcommand("stats", "vocabulary and bid-dispersion summary");
  common(tok_stats, false);
  tok_stats->add_option("--tokenizer", tokenizer_path)->required();
  tok_stats->add_option("--catalog", catalog_path)->required();

  auto* model_cmd = app.add_subcommand("model", "initialize a checkpoint");
  common(model_cmd, true);
  model_cmd->add_option("--tokenizer", tokenizer_path, "fitted tokenizer")->required();

  auto* train_cmd = app.add_subcommand("train", "world, tokenizer and training stages");
  common(train_cmd, true);

  std::string checkpoint, requests_path;
  std::optional<int> beam, topk;
  bool no_trie = false;
  auto* serve_cmd = app.add_subcommand("serve", "retrieve items for requests");
  common(serve_cmd, true);
  serve_cmd->add_option("--catalog", catalog_path)->required();
  serve_cmd->add_option("--tokenizer", tokenizer_path)->required();
  serve_cmd->add_option("--checkpoint", checkpoint)->required();
  serve_cmd->add_option("--requests", requests_path)->required();
  serve_cmd->add_option("--beam", beam, "beam width (overrides serving.beam_width)")->check(CLI::PositiveNumber);
  serve_cmd->add_option("--topk", topk, "items returned (overrides serving.top_k)")->check(CLI::PositiveNumber);
  serve_cmd->add_flag("--no-trie", no_trie, "decode without the personalized trie");

  std::string pred_path, truth_path, cutoffs;
  auto* eval_cmd = app.add_subcommand("eval", "HR / ValueHR / wNDCG at cutoffs");
  common(eval_cmd, false);
  eval_cmd->add_option("--pred", pred_path)->required();
  eval_cmd->add_option("--truth", truth_path)->required();
  eval_cmd->add_option("--cutoffs", cutoffs, "comma-separated K values (overrides eval.cutoffs)");

  auto* pipe_cmd = app.add_subcommand("pipeline", "run every stage");
  common(pipe_cmd, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (world_cmd->parsed()) {
      const PipelineConfig cfg = resolve_config(config_path, seed);
      fs::create_directories(out);
      const World world = world_for(cfg);
      const auto reqs = generate_requests(world, cfg.requests, mix64(cfg.seed ^ 0x2e9u));
      write_text(out + "/config.resolved.txt", emit_config(cfg));
      write_text(out + "/world_config.json", world_config_to_json(cfg.world));
      write_text(out + "/catalog.jsonl", catalog_to_jsonl(world.catalog));
      write_text(out + "/users.jsonl", users_to_jsonl(world.users));
      write_text(out + "/requests.jsonl", requests_to_jsonl(reqs));
      write_text(out + "/truth.jsonl", truth_to_jsonl(reqs));
      std::cout << "world: " << world.catalog.size() << " items, " << world.users.size() << " users, " << reqs.size()
                << " requests -> " << out << "\n";
    } else if (tok_fit->parsed()) {
      const PipelineConfig cfg = resolve_config(config_path, seed);
      const auto catalog = catalog_from_jsonl(read_text(catalog_path));
      const Tokenizer tok = fit_tokenizer(catalog, cfg.tokenizer);
      save_tokenizer(tok, out);
      const auto vocab = tok.level_vocab_sizes();
      std::cout << "tokenizer: levels";
      for (int v : vocab) std::cout << ' ' << v;
      std::cout << " -> " << out << "\n";
    } else if (tok_encode->parsed()) {
      const Tokenizer tok = load_tokenizer(tokenizer_path);
      const auto catalog = catalog_from_jsonl(read_text(catalog_path));
      std::ostringstream os;
      for (const auto& item : catalog) {
        os << "{\"id\":" << item.id << ",\"sid\":[";
        const SidPath p = tok.tokenize(item);
        for (size_t i = 0; i < p.size(); ++i) os << (i ? "," : "") << p[i];
        os << "]}\n";
      }
      if (out.empty()) std::cout << os.str();
      else write_text(out, os.str());
    } else if (tok_stats->parsed()) {
      const Tokenizer tok = load_tokenizer(tokenizer_path);
      const auto catalog = catalog_from_jsonl(read_text(catalog_path));
      std::ostringstream os;
      const DispersionReport r = path_dispersion_stats(catalog, tok);
      os << "paths " << r.paths.size() << "\n";
      if (tok.commercial) {
        const auto& s = tok.commercial->scheme;
        os << "keys " << s.per_key.size() << " key_vocab " << s.key_vocab << " vocab " << s.vocab_size()
           << " weighted_entropy " << s.weighted_entropy << " token_entropy " << s.token_entropy << "\n";
      }
      os << "bid_std mean " << r.std_stats.mean << " p75 " << r.std_stats.p75 << " p99 " << r.std_stats.p99 << "\n";
      os << "bid_range mean " << r.range_stats.mean << " p75 " << r.range_stats.p75 << " p99 "
         << r.range_stats.p99 << "\n";
      if (out.empty()) std::cout << os.str();
      else write_text(out, os.str());
    } else if (model_cmd->parsed()) {
      const PipelineConfig cfg = resolve_config(config_path, seed);
      const Tokenizer tok = load_tokenizer(tokenizer_path);
      const World world = world_for(cfg);
      const Model model(resolve_model_config(cfg.model, world, tok));
      model.save(out);
      std::cout << "model: " << model.parameter_count() << " parameters -> " << out << "\n";
    } else if (train_cmd->parsed()) {
      PipelineConfig cfg = resolve_config(config_path, seed);
      fs::create_directories(out);
      write_text(out + "/config.resolved.txt", emit_config(cfg));
      const World world = world_for(cfg);
      const RequestSplit split =
          split_requests(generate_requests(world, cfg.requests, mix64(cfg.seed ^ 0x2e9u)), cfg.train_fraction, cfg.seed);
      const Tokenizer tok = fit_tokenizer(world.catalog, cfg.tokenizer);
      save_tokenizer(tok, out + "/tokenizer.json");
      const CatalogIndex index(world.catalog, tok);
      const Trie trie(world.catalog, tok);
      Model model(resolve_model_config(cfg.model, world, tok));
      TrainingData data{&world, &tok, &index, &trie, split.train, split.test};
      const TrainResult tr = train(model, cfg.training, data, [&](const EpochLog& e, const Model& m) {
        m.save(out + "/epoch_" + std::to_string(e.epoch) + ".ckpt");
        std::cerr << "epoch " << e.epoch << " sl_loss " << e.sl_loss << " ecpm " << e.mean_ecpm_top1 << " kl " << e.kl
                  << "\n";
      });
      for (const auto& w : tr.warnings) std::cerr << "warning: " << w << "\n";
      write_text(out + "/train_log.csv", training_log_csv(tr.log));
      model.save(out + "/model.ckpt");
      std::cout << "trained " << tr.log.size() << " epochs -> " << out << "\n";
    } else if (serve_cmd->parsed()) {
      const auto catalog = catalog_from_jsonl(read_text(catalog_path));
      const Tokenizer tok = load_tokenizer(tokenizer_path);
      const Model model = Model::load(checkpoint);
      const auto reqs = requests_from_jsonl(read_text(requests_path));
      const Trie trie(catalog, tok);
      const CatalogIndex index(catalog, tok);
      ServingConfig sc = resolve_config(config_path, seed).serving;
      if (beam) sc.beam_width = *beam;
      if (topk) sc.top_k = *topk;
      if (no_trie) sc.use_trie = false;
      ServeStats trie_stats, free_stats;
      ServingConfig with = sc, without = sc;
      with.use_trie = true;
      without.use_trie = false;
      const auto preds_with = serve_requests(model, reqs, catalog, trie, index, with, &trie_stats);
      const auto preds_without = serve_requests(model, reqs, catalog, trie, index, without, &free_stats);
      write_text(out, predictions_to_jsonl(sc.use_trie ? preds_with : preds_without));
      std::cout << "valid paths: with trie " << trie_stats.valid_paths << "/" << trie_stats.total_paths
                << ", without trie " << free_stats.valid_paths << "/" << free_stats.total_paths << "\n";
    } else if (eval_cmd->parsed()) {
      const auto preds = predictions_from_jsonl(read_text(pred_path));
      const auto truth = truth_from_jsonl(read_text(truth_path));
      const auto samples = join_samples(preds, truth);
      const auto ks = cutoffs.empty() ? resolve_config(config_path, seed).eval.cutoffs : parse_cutoffs(cutoffs);
      const std::string csv = metrics_csv(evaluate_cutoffs(samples, ks));
      if (out.empty()) std::cout << csv;
      else write_text(out, csv);
    } else if (pipe_cmd->parsed()) {
      const PipelineConfig cfg = resolve_config(config_path, seed);
      const PipelineResult r = run_pipeline(cfg, out, &std::cerr);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "pipeline complete -> " << out << " (ran:";
      for (const auto& s : r.stages_run) std::cout << ' ' << s;
      std::cout << "; cached:";
      for (const auto& s : r.stages_cached) std::cout << ' ' << s;
      std::cout << ")\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "univa: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
