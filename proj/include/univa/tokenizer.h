#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "univa/common.h"

namespace univa {

struct AdItem {
  int64_t id = 0;
  Vec embedding;
  int opt_goal = 0;
  int roi_target = 0;
  int industry = 0;
  double bid = 1.0;  // micro-units, > 0
  double gmv = 0.0;
};

/// Throws if the item violates catalog invariants (positive bid, finite embedding of `dim`).
void validate_item(const AdItem& item, size_t dim);

/// Discrete identifier of an item: semantic levels followed by the commercial level.
using SidPath = std::vector<int>;

// ---------------------------------------------------------------------------
// Semantic levels (residual k-means)

struct SemanticCodebooks {
  std::vector<std::vector<Vec>> levels;  // levels[l][c] is centroid c at level l

  size_t level_count() const { return levels.size(); }
  int codebook_size() const { return levels.empty() ? 0 : static_cast<int>(levels.front().size()); }
  size_t dim() const;
};

SemanticCodebooks fit_semantic_codebooks(std::span<const Vec> embeddings, int levels, int k, uint64_t seed,
                                         int max_iter = 50);

struct SemanticEncoding {
  std::vector<int> tokens;
  Vec residual;  // what remains after subtracting every selected centroid
};

SemanticEncoding encode_semantic_with_residual(std::span<const double> embedding, const SemanticCodebooks& codebooks);
std::vector<int> encode_semantic(std::span<const double> embedding, const SemanticCodebooks& codebooks);

// ---------------------------------------------------------------------------
// Commercial level

enum class TailStrategy { kSingleFallback, kBidDistributionCluster };

/// Maps raw categorical codes onto a compact alphabet: frequent codes keep their own
/// class, tail codes share a fallback class or a bid-distribution cluster.
struct CompressionMap {
  std::map<int, int> retained;
  std::map<int, int> tail_assignment;
  int category_count = 0;

  /// Unseen codes map to `category_count`, which no composition key uses; the
  /// commercial token then falls back to global bid bins.
  int compress(int raw) const;
};

/// `tail_bids` must hold a bid sample for every tail code when clustering.
CompressionMap fit_compression(const std::map<int, int64_t>& value_counts, double coverage, int target,
                               TailStrategy tail_strategy,
                               const std::map<int, std::vector<double>>* tail_bids = nullptr, uint64_t seed = 0);

/// Decile vector (10%..90%) of a bid sample; the similarity space for tail clustering.
Vec bid_deciles(std::vector<double> bids);

struct CompositionKey {
  int opt_goal = 0;
  int roi = 0;
  int industry = 0;
  auto operator<=>(const CompositionKey&) const = default;
};

struct KeyBins {
  int bin_count = 1;
  Vec boundaries;  // bin_count - 1 cut points, non-decreasing
  int base_token = 0;
  int64_t sample_count = 0;
  double entropy = 0.0;  // realized H_k on the fitting sample
};

enum class Allocation { kGridEntropy, kProportional };

struct BinningScheme {
  std::map<CompositionKey, KeyBins> per_key;
  KeyBins global_fallback;
  int n_min = 3;
  int n_max = 25;
  int budget = 2048;
  double weighted_entropy = 0.0;  // sum_k w_k H_k
  double token_entropy = 0.0;     // entropy of the global token distribution
  int key_vocab = 0;              // sum_k n_k, bounded by budget

  /// Level vocabulary: key ranges followed by the global fallback range.
  int vocab_size() const { return key_vocab + global_fallback.bin_count; }
};

/// Bin of `value` given sorted cut points; a value equal to a cut lands in the lower bin.
int bin_index(std::span<const double> boundaries, double value);

/// Equal-frequency cut points (linear-interpolation quantiles at j/n).
Vec equal_frequency_boundaries(std::span<const double> sorted_values, int bins);

/// Natural-log entropy of the realized bin occupancy.
double partition_entropy(std::span<const double> values, std::span<const double> boundaries, int bins);

struct AllocationGroup {
  double weight = 0.0;
  int lower = 1;
  int upper = 1;
};

/// Greedy marginal-gain ascent of sum_k weight_k * entropy(k, n_k) starting from the
/// lower bounds; ties go to the heavier group, then the lower group index.
std::vector<int> greedy_allocate(std::span<const AllocationGroup> groups, int budget,
                                 const std::function<double(size_t, int)>& entropy);

std::vector<int> proportional_allocate(std::span<const AllocationGroup> groups, int budget);

BinningScheme fit_binning(std::span<const std::pair<CompositionKey, double>> items, int n_min, int n_max, int budget,
                          Allocation allocation = Allocation::kGridEntropy);

int assign_commercial_token(const CompositionKey& key, double bid, const BinningScheme& scheme);

struct CommercialTokenizer {
  CompressionMap opt_goal;
  CompressionMap roi;
  CompressionMap industry;
  BinningScheme scheme;

  CompositionKey key_of(const AdItem& item) const;
  int token(const AdItem& item) const;
};

struct AttributePolicy {
  double coverage = 0.99;
  int target = 8;
  TailStrategy tail = TailStrategy::kSingleFallback;
};

struct TokenizerConfig {
  int semantic_levels = 2;
  int codebook_size = 64;
  int kmeans_iters = 50;
  bool commercial_level = true;
  // Scaled to the synthetic alphabets; production used 0.99/25, 0.99/8 and 0.75/10.
  AttributePolicy opt_goal{0.8, 12, TailStrategy::kBidDistributionCluster};
  AttributePolicy roi{0.75, 6, TailStrategy::kSingleFallback};
  AttributePolicy industry{0.75, 8, TailStrategy::kSingleFallback};
  int n_min = 3;
  int n_max = 25;
  int budget = 2048;
  Allocation allocation = Allocation::kGridEntropy;
  uint64_t seed = 0;

  void validate() const;
};

struct Tokenizer {
  SemanticCodebooks codebooks;
  std::optional<CommercialTokenizer> commercial;

  int path_length() const;
  std::vector<int> level_vocab_sizes() const;
  SidPath tokenize(const AdItem& item) const;
};

CommercialTokenizer fit_commercial(std::span<const AdItem> catalog, const TokenizerConfig& cfg);
Tokenizer fit_tokenizer(std::span<const AdItem> catalog, const TokenizerConfig& cfg);

std::string tokenizer_to_json(const Tokenizer& tok);
Tokenizer tokenizer_from_json(const std::string& text);
void save_tokenizer(const Tokenizer& tok, const std::string& path);
Tokenizer load_tokenizer(const std::string& path);

// ---------------------------------------------------------------------------
// Path-level bid dispersion

struct PathDispersion {
  SidPath path;
  size_t count = 0;
  double bid_std = 0.0;  // population standard deviation
  double bid_range = 0.0;
};

struct DispersionSummary {
  double mean = 0.0;
  double p75 = 0.0;
  double p99 = 0.0;
};

struct DispersionReport {
  std::vector<PathDispersion> paths;  // sorted by path
  DispersionSummary std_stats;
  DispersionSummary range_stats;
};

DispersionSummary summarize(std::vector<double> values);
DispersionReport path_dispersion_stats(std::span<const AdItem> catalog, const Tokenizer& tokenizer);

}  // namespace univa
