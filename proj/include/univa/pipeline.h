#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "univa/config.h"
#include "univa/io.h"

namespace univa {

struct RequestSplit {
  std::vector<Request> train;
  std::vector<Request> test;
};

/// Seeded shuffle, then the first round(fraction * n) requests train.
RequestSplit split_requests(std::vector<Request> requests, double train_fraction, uint64_t seed);

/// Model shape from the config plus vocabularies implied by the world and tokenizer.
ModelConfig resolve_model_config(const ModelConfig& base, const World& world, const Tokenizer& tokenizer);

/// Semantic-only tokenizer with one extra semantic level in place of the commercial level.
TokenizerConfig semantic_only_config(const TokenizerConfig& cfg);

struct ServeStats {
  size_t requests = 0;
  size_t valid_paths = 0;
  size_t total_paths = 0;
};

std::vector<Prediction> serve_requests(const Model& model, std::span<const Request> requests,
                                       std::span<const AdItem> catalog, const Trie& trie, const CatalogIndex& index,
                                       const ServingConfig& cfg, ServeStats* stats = nullptr);

struct PipelineResult {
  std::vector<std::string> stages_run;
  std::vector<std::string> stages_cached;
  std::vector<std::string> warnings;
};

/// Runs world -> tokenizer -> train -> serve -> eval under `out_dir`.
/// Tokenizer and training outputs are reused when the stage's config hash matches.
PipelineResult run_pipeline(const PipelineConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr);

}  // namespace univa
