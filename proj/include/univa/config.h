#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "univa/model.h"
#include "univa/serving.h"
#include "univa/simulator.h"
#include "univa/tokenizer.h"
#include "univa/training.h"

namespace univa {

struct ServingConfig {
  int beam_width = 16;
  int top_k = 10;
  bool use_trie = true;
  BeamScoreMode score_mode = BeamScoreMode::kRawFused;
};

struct EvalConfig {
  std::vector<int> cutoffs{1, 10, 32, 50, 100};
  int validity_beam = 50;
  int validity_requests = 50;
  bool strategy_grid = true;
};

/// Every tunable of a run. The global seed is copied into each component.
struct PipelineConfig {
  uint64_t seed = 0;
  WorldConfig world;
  int requests = 500;
  double train_fraction = 0.8;
  TokenizerConfig tokenizer;
  ModelConfig model;
  TrainingConfig training;
  bool compare_rl = true;
  ServingConfig serving;
  EvalConfig eval;

  void apply_seed(uint64_t s);
  void validate() const;
};

/// `section.key = value` lines; `#` starts a comment. Unknown keys are rejected.
PipelineConfig parse_config(const std::string& text, const PipelineConfig& base = PipelineConfig{});
PipelineConfig load_config(const std::string& path);

/// Fully resolved configuration in the same format (every key, fixed order).
std::string emit_config(const PipelineConfig& cfg);

/// Stable 64-bit digest of the emitted lines whose key starts with one of `prefixes` (all when empty).
std::string config_hash(const PipelineConfig& cfg, const std::vector<std::string>& prefixes = {});

std::vector<std::string> config_keys();

}  // namespace univa
