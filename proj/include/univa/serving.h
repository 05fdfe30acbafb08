#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "univa/model.h"
#include "univa/simulator.h"
#include "univa/tokenizer.h"

namespace univa {

/// Prefix tree over the SID paths present in a catalog.
class Trie {
 public:
  struct Node {
    int token = -1;
    int depth = 0;
    int parent = -1;
    std::vector<std::pair<int, int>> children;  // (token, node index), sorted by token
    std::vector<int64_t> items;                  // leaves only, sorted by id
  };

  Trie() = default;
  Trie(std::span<const AdItem> catalog, const Tokenizer& tokenizer);

  int path_length() const { return path_length_; }
  const std::vector<int>& level_vocab_sizes() const { return level_vocab_; }
  const Node& node(int index) const { return nodes_.at(static_cast<size_t>(index)); }
  size_t node_count() const { return nodes_.size(); }
  /// Node reached by `prefix`, or -1.
  int find(std::span<const int> prefix) const;
  std::vector<int> leaves() const;
  SidPath path_to(int index) const;

 private:
  int path_length_ = 0;
  std::vector<int> level_vocab_;
  std::vector<Node> nodes_;
};

/// Per-request liveness over a shared trie: a node is live iff some eligible item lies below it.
class PersonalizedTrie {
 public:
  PersonalizedTrie(const Trie& trie, std::vector<char> live) : trie_(&trie), live_(std::move(live)) {}

  const Trie& trie() const { return *trie_; }
  bool is_live(int node) const { return node >= 0 && live_.at(static_cast<size_t>(node)) != 0; }
  bool is_live_prefix(std::span<const int> prefix) const { return is_live(trie_->find(prefix)); }
  /// Live children of a live prefix, ascending; empty for dead or unknown prefixes.
  std::vector<int> valid_next(std::span<const int> prefix) const;
  std::vector<SidPath> live_paths() const;

 private:
  const Trie* trie_;
  std::vector<char> live_;
};

PersonalizedTrie personalize(const Trie& trie, const std::vector<char>& eligible);
PersonalizedTrie personalize(const Trie& trie, const Request& request, std::span<const AdItem> catalog);

enum class BeamScoreMode { kRawFused, kLogSoftmax };

using LevelScorer = std::function<Vec(std::span<const int> prefix)>;
using NextTokens = std::function<std::vector<int>(std::span<const int> prefix)>;

struct ScoredPath {
  SidPath path;
  double score = 0.0;
};

struct BeamResult {
  std::vector<ScoredPath> paths;  // score descending, ties lexicographic
  size_t expansions = 0;          // candidate (prefix, token) pairs scored
};

/// Level-synchronous beam over per-level scores. `next` restricts expansion; when empty
/// every token of the level vocabulary is a candidate.
BeamResult beam_search_generic(std::span<const int> level_vocab, int beam_width, const LevelScorer& scorer,
                               const NextTokens& next = nullptr);

/// Value-guided beam over fused logits; `ptrie == nullptr` decodes without constraints.
BeamResult beam_search(const Model& model, const Tensor& h, const PersonalizedTrie* ptrie, int beam_width,
                       BeamScoreMode mode = BeamScoreMode::kRawFused);

struct RetrievedItem {
  int64_t item = 0;
  double score = 0.0;
};

struct RetrievalResult {
  std::vector<RetrievedItem> items;
  BeamResult beam;
};

/// Beam search, then leaf resolution to eligible items (path score desc, bid desc, id asc),
/// keeping the first `top_k` distinct items.
RetrievalResult retrieve(const Model& model, const Request& request, std::span<const AdItem> catalog,
                         const Trie& trie, int beam_width, int top_k, bool use_trie = true,
                         BeamScoreMode mode = BeamScoreMode::kRawFused);

}  // namespace univa
