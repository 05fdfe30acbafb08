#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "univa/model.h"
#include "univa/serving.h"
#include "univa/simulator.h"
#include "univa/tokenizer.h"

namespace univa {

struct EvalSample {
  int64_t request_id = 0;
  int64_t truth = -1;
  double gmv = 0.0;
  std::vector<int64_t> ranked;
};

double hr_at_k(std::span<const EvalSample> samples, int k);
double value_hr_at_k(std::span<const EvalSample> samples, int k);
/// Single relevant item per sample: gain 1 / log2(1 + rank), weights log10(1 + gmv).
double wndcg_at_k(std::span<const EvalSample> samples, int k);

struct MetricRow {
  int k = 0;
  double hr = 0.0;
  double value_hr = 0.0;
  double wndcg = 0.0;
};

std::vector<MetricRow> evaluate_cutoffs(std::span<const EvalSample> samples, std::span<const int> cutoffs);
std::string metrics_csv(std::span<const MetricRow> rows);

enum class GroupingStrategy { kDirect, kClassifyThenBin, kClusterThenBin };
enum class InBinStrategy { kEqualFrequency, kEqualWidth, kClusterBins };

const char* to_string(GroupingStrategy g);
const char* to_string(InBinStrategy b);

/// Uniform-width cuts over [min, max] of a sorted sample.
Vec equal_width_boundaries(std::span<const double> sorted_values, int bins);
/// Midpoints between adjacent centroids of a seeded 1-d k-means.
Vec cluster_boundaries(std::span<const double> sorted_values, int bins, uint64_t seed);

struct GridCell {
  GroupingStrategy grouping = GroupingStrategy::kDirect;
  InBinStrategy in_bin = InBinStrategy::kEqualFrequency;
  double entropy = 0.0;           // H: entropy of the resulting commercial-token distribution
  double weighted_entropy = 0.0;  // sum_k w_k H_k
  int vocab = 0;                  // V: sum_k n_k
  int groups = 0;
};

/// Groups bids (one vector per group) and allocates bins per group under the budget.
GridCell evaluate_binning(std::span<const std::vector<double>> groups, InBinStrategy in_bin, int n_min, int n_max,
                          int budget, uint64_t seed);

/// All 9 grouping x in-bin combinations; compression policies and bounds come from `cfg`.
std::vector<GridCell> strategy_grid(std::span<const AdItem> catalog, const TokenizerConfig& cfg);
std::string grid_csv(std::span<const GridCell> cells);

struct ValidityRow {
  int64_t request_id = 0;
  size_t valid_with_trie = 0;
  size_t total_with_trie = 0;
  size_t valid_without_trie = 0;
  size_t total_without_trie = 0;
  size_t expansions_with_trie = 0;
  size_t expansions_without_trie = 0;
};

/// Beam search with and without the personalized trie; a path is valid when it resolves to an eligible item.
std::vector<ValidityRow> trie_validity_report(const Model& model, std::span<const Request> requests,
                                              std::span<const AdItem> catalog, const Trie& trie,
                                              const CatalogIndex& index, int beam_width);
std::string validity_csv(std::span<const ValidityRow> rows);

std::string dispersion_csv(const DispersionReport& semantic_only, const DispersionReport& commercial);

}  // namespace univa
