#include "univa/tokenizer.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "univa/kmeans.h"

namespace univa {

using nlohmann::json;

void validate_item(const AdItem& item, size_t dim) {
  if (!(item.bid > 0.0) || !std::isfinite(item.bid)) {
    throw Error("item " + std::to_string(item.id) + ": bid must be positive");
  }
  if (item.embedding.size() != dim) {
    throw Error("item " + std::to_string(item.id) + ": embedding dimension " + std::to_string(item.embedding.size()) +
                " != " + std::to_string(dim));
  }
  for (double v : item.embedding) {
    if (!std::isfinite(v)) throw Error("item " + std::to_string(item.id) + ": non-finite embedding");
  }
}

size_t SemanticCodebooks::dim() const {
  if (levels.empty() || levels.front().empty()) return 0;
  return levels.front().front().size();
}

SemanticCodebooks fit_semantic_codebooks(std::span<const Vec> embeddings, int levels, int k, uint64_t seed,
                                         int max_iter) {
  if (levels < 1) throw Error("fit_semantic_codebooks: levels must be >= 1");
  if (k < 1) throw Error("fit_semantic_codebooks: k must be >= 1");
  if (embeddings.empty()) throw Error("fit_semantic_codebooks: no embeddings");
  for (const auto& e : embeddings) {
    for (double v : e) {
      if (!std::isfinite(v)) throw Error("fit_semantic_codebooks: non-finite embedding rejected");
    }
  }

  SemanticCodebooks books;
  std::vector<Vec> residuals(embeddings.begin(), embeddings.end());
  for (int l = 0; l < levels; ++l) {
    const size_t distinct = count_distinct(residuals);
    if (distinct < static_cast<size_t>(k)) {
      throw Error("fit_semantic_codebooks: level " + std::to_string(l + 1) + " has " + std::to_string(distinct) +
                  " distinct residuals, fewer than k=" + std::to_string(k));
    }
    KMeansResult km = kmeans(residuals, k, mix64(seed + static_cast<uint64_t>(l)), max_iter);
    for (size_t i = 0; i < residuals.size(); ++i) {
      const Vec& c = km.centroids[km.assignment[i]];
      for (size_t j = 0; j < c.size(); ++j) residuals[i][j] -= c[j];
    }
    books.levels.push_back(std::move(km.centroids));
  }
  return books;
}

SemanticEncoding encode_semantic_with_residual(std::span<const double> embedding, const SemanticCodebooks& codebooks) {
  if (embedding.size() != codebooks.dim()) {
    throw Error("encode_semantic: embedding dimension " + std::to_string(embedding.size()) + " != codebook dimension " +
                std::to_string(codebooks.dim()));
  }
  SemanticEncoding out;
  out.residual.assign(embedding.begin(), embedding.end());
  for (const auto& level : codebooks.levels) {
    const int c = nearest_centroid(out.residual, level);
    out.tokens.push_back(c);
    for (size_t j = 0; j < out.residual.size(); ++j) out.residual[j] -= level[c][j];
  }
  return out;
}

std::vector<int> encode_semantic(std::span<const double> embedding, const SemanticCodebooks& codebooks) {
  return encode_semantic_with_residual(embedding, codebooks).tokens;
}

// ---------------------------------------------------------------------------

int CompressionMap::compress(int raw) const {
  if (auto it = retained.find(raw); it != retained.end()) return it->second;
  if (auto it = tail_assignment.find(raw); it != tail_assignment.end()) return it->second;
  return category_count;
}

Vec bid_deciles(std::vector<double> bids) {
  if (bids.empty()) throw Error("bid_deciles: empty bid sample");
  std::sort(bids.begin(), bids.end());
  Vec out;
  for (int q = 1; q <= 9; ++q) out.push_back(sorted_quantile(bids, q / 10.0));
  return out;
}

CompressionMap fit_compression(const std::map<int, int64_t>& value_counts, double coverage, int target,
                               TailStrategy tail_strategy, const std::map<int, std::vector<double>>* tail_bids,
                               uint64_t seed) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw Error("fit_compression: coverage must be in (0, 1]");
  if (target < 2) throw Error("fit_compression: target must be >= 2");
  if (value_counts.empty()) throw Error("fit_compression: no values");

  std::vector<std::pair<int, int64_t>> order(value_counts.begin(), value_counts.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  int64_t total = 0;
  for (const auto& [code, count] : order) total += count;

  CompressionMap map;
  int64_t cumulative = 0;
  size_t head = 0;
  const double need = coverage * static_cast<double>(total) - 1e-9;
  while (head < order.size() && static_cast<double>(cumulative) < need) {
    cumulative += order[head].second;
    map.retained[order[head].first] = static_cast<int>(head);
    ++head;
  }
  std::vector<int> tail;
  for (size_t i = head; i < order.size(); ++i) tail.push_back(order[i].first);
  std::sort(tail.begin(), tail.end());

  const int head_size = static_cast<int>(head);
  if (head_size > target || (!tail.empty() && head_size >= target)) {
    throw Error("fit_compression: " + std::to_string(head_size) + " head codes reach coverage " +
                std::to_string(coverage) + " but target is " + std::to_string(target) +
                "; lower the coverage or raise the target");
  }
  if (tail.empty()) {
    map.category_count = head_size;
    return map;
  }

  if (tail_strategy == TailStrategy::kSingleFallback) {
    for (int code : tail) map.tail_assignment[code] = head_size;
    map.category_count = head_size + 1;
    return map;
  }

  if (tail_bids == nullptr) throw Error("fit_compression: cluster strategy requires bid samples");
  std::vector<Vec> features;
  for (int code : tail) {
    auto it = tail_bids->find(code);
    if (it == tail_bids->end() || it->second.empty()) {
      throw Error("fit_compression: missing bid sample for tail code " + std::to_string(code));
    }
    features.push_back(bid_deciles(it->second));
  }
  int clusters = std::min(target - head_size, static_cast<int>(tail.size()));
  clusters = std::min(clusters, static_cast<int>(count_distinct(features)));
  const KMeansResult km = kmeans(features, clusters, seed);
  // Relabel clusters by first appearance in ascending tail-code order.
  std::map<int, int> relabel;
  for (size_t i = 0; i < tail.size(); ++i) {
    const int c = km.assignment[i];
    if (!relabel.count(c)) relabel[c] = head_size + static_cast<int>(relabel.size());
    map.tail_assignment[tail[i]] = relabel[c];
  }
  map.category_count = head_size + static_cast<int>(relabel.size());
  return map;
}

// ---------------------------------------------------------------------------

int bin_index(std::span<const double> boundaries, double value) {
  return static_cast<int>(std::lower_bound(boundaries.begin(), boundaries.end(), value) - boundaries.begin());
}

Vec equal_frequency_boundaries(std::span<const double> sorted_values, int bins) {
  Vec cuts;
  for (int j = 1; j < bins; ++j) cuts.push_back(sorted_quantile(sorted_values, static_cast<double>(j) / bins));
  return cuts;
}

double partition_entropy(std::span<const double> values, std::span<const double> boundaries, int bins) {
  if (values.empty()) return 0.0;
  std::vector<int64_t> counts(bins, 0);
  for (double v : values) ++counts[bin_index(boundaries, v)];
  double h = 0.0;
  const double n = static_cast<double>(values.size());
  for (int64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

std::vector<int> greedy_allocate(std::span<const AllocationGroup> groups, int budget,
                                 const std::function<double(size_t, int)>& entropy) {
  std::vector<int> n(groups.size());
  std::vector<double> current(groups.size());
  int used = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    n[k] = groups[k].lower;
    used += n[k];
    current[k] = entropy(k, n[k]);
  }
  constexpr double kTie = 1e-12;
  while (used < budget) {
    long best = -1;
    double best_gain = 0.0;
    double best_next = 0.0;
    for (size_t k = 0; k < groups.size(); ++k) {
      if (n[k] >= groups[k].upper) continue;
      const double next = entropy(k, n[k] + 1);
      const double gain = groups[k].weight * (next - current[k]);
      if (gain <= kTie) continue;
      const bool better = best < 0 || gain > best_gain + kTie ||
                          (std::abs(gain - best_gain) <= kTie && groups[k].weight > groups[best].weight);
      if (better) {
        best = static_cast<long>(k);
        best_gain = gain;
        best_next = next;
      }
    }
    if (best < 0) break;
    ++n[best];
    current[best] = best_next;
    ++used;
  }
  return n;
}

std::vector<int> proportional_allocate(std::span<const AllocationGroup> groups, int budget) {
  std::vector<int> n(groups.size());
  int used = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    const int want = static_cast<int>(std::lround(groups[k].weight * budget));
    n[k] = std::clamp(want, groups[k].lower, groups[k].upper);
    used += n[k];
  }
  while (used > budget) {
    size_t pick = groups.size();
    int slack = 0;
    for (size_t k = 0; k < groups.size(); ++k) {
      if (n[k] - groups[k].lower > slack) {
        slack = n[k] - groups[k].lower;
        pick = k;
      }
    }
    if (pick == groups.size()) break;
    --n[pick];
    --used;
  }
  return n;
}

namespace {

KeyBins make_equal_frequency_bins(const std::vector<double>& sorted, int bins) {
  KeyBins kb;
  kb.bin_count = bins;
  kb.boundaries = equal_frequency_boundaries(sorted, bins);
  kb.sample_count = static_cast<int64_t>(sorted.size());
  kb.entropy = partition_entropy(sorted, kb.boundaries, bins);
  return kb;
}

size_t distinct_sorted(const std::vector<double>& sorted) {
  size_t d = 0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (i == 0 || sorted[i] != sorted[i - 1]) ++d;
  }
  return d;
}

}  // namespace

BinningScheme fit_binning(std::span<const std::pair<CompositionKey, double>> items, int n_min, int n_max, int budget,
                          Allocation allocation) {
  if (n_min < 1) throw Error("fit_binning: n_min must be >= 1");
  if (n_max < n_min) throw Error("fit_binning: n_max must be >= n_min");
  std::map<CompositionKey, std::vector<double>> groups;
  std::vector<double> all;
  for (const auto& [key, bid] : items) {
    if (!(bid > 0.0)) throw Error("fit_binning: bids must be positive");
    groups[key].push_back(bid);
    all.push_back(bid);
  }
  if (groups.empty()) throw Error("fit_binning: empty key set");
  if (static_cast<int64_t>(budget) < static_cast<int64_t>(groups.size()) * n_min) {
    throw Error("fit_binning: budget " + std::to_string(budget) + " is below |keys| * n_min = " +
                std::to_string(groups.size() * static_cast<size_t>(n_min)));
  }

  std::vector<std::vector<double>> sorted;
  std::vector<AllocationGroup> specs;
  const double total = static_cast<double>(all.size());
  for (auto& [key, bids] : groups) {
    std::sort(bids.begin(), bids.end());
    const int distinct = static_cast<int>(distinct_sorted(bids));
    AllocationGroup g;
    g.weight = static_cast<double>(bids.size()) / total;
    g.lower = std::min(n_min, distinct);
    g.upper = std::max(g.lower, std::min(n_max, distinct));
    specs.push_back(g);
    sorted.push_back(bids);
  }

  std::vector<int> counts;
  if (allocation == Allocation::kGridEntropy) {
    std::map<std::pair<size_t, int>, double> memo;
    auto entropy = [&](size_t k, int n) {
      auto [it, fresh] = memo.try_emplace({k, n}, 0.0);
      if (fresh) it->second = partition_entropy(sorted[k], equal_frequency_boundaries(sorted[k], n), n);
      return it->second;
    };
    counts = greedy_allocate(specs, budget, entropy);
  } else {
    counts = proportional_allocate(specs, budget);
  }

  BinningScheme scheme;
  scheme.n_min = n_min;
  scheme.n_max = n_max;
  scheme.budget = budget;
  int next_token = 0;
  size_t k = 0;
  double key_entropy = 0.0;
  for (const auto& [key, bids] : groups) {
    KeyBins kb = make_equal_frequency_bins(sorted[k], counts[k]);
    kb.base_token = next_token;
    next_token += kb.bin_count;
    scheme.weighted_entropy += specs[k].weight * kb.entropy;
    key_entropy -= specs[k].weight * std::log(specs[k].weight);
    scheme.per_key.emplace(key, std::move(kb));
    ++k;
  }
  scheme.key_vocab = next_token;
  scheme.token_entropy = key_entropy + scheme.weighted_entropy;

  std::sort(all.begin(), all.end());
  const int fallback_bins = std::max(1, std::min(n_max, static_cast<int>(distinct_sorted(all))));
  scheme.global_fallback = make_equal_frequency_bins(all, fallback_bins);
  scheme.global_fallback.base_token = scheme.key_vocab;
  return scheme;
}

int assign_commercial_token(const CompositionKey& key, double bid, const BinningScheme& scheme) {
  if (!(bid > 0.0)) throw Error("assign_commercial_token: bid must be positive");
  if (auto it = scheme.per_key.find(key); it != scheme.per_key.end()) {
    return it->second.base_token + bin_index(it->second.boundaries, bid);
  }
  return scheme.global_fallback.base_token + bin_index(scheme.global_fallback.boundaries, bid);
}

CompositionKey CommercialTokenizer::key_of(const AdItem& item) const {
  return {opt_goal.compress(item.opt_goal), roi.compress(item.roi_target), industry.compress(item.industry)};
}

int CommercialTokenizer::token(const AdItem& item) const {
  return assign_commercial_token(key_of(item), item.bid, scheme);
}

// ---------------------------------------------------------------------------

int Tokenizer::path_length() const {
  return static_cast<int>(codebooks.level_count()) + (commercial ? 1 : 0);
}

std::vector<int> Tokenizer::level_vocab_sizes() const {
  std::vector<int> sizes(codebooks.level_count(), codebooks.codebook_size());
  if (commercial) sizes.push_back(commercial->scheme.vocab_size());
  return sizes;
}

SidPath Tokenizer::tokenize(const AdItem& item) const {
  validate_item(item, codebooks.dim());
  SidPath path = encode_semantic(item.embedding, codebooks);
  if (commercial) path.push_back(commercial->token(item));
  return path;
}

CommercialTokenizer fit_commercial(std::span<const AdItem> catalog, const TokenizerConfig& cfg) {
  std::map<int, int64_t> opt_counts, roi_counts, ind_counts;
  std::map<int, std::vector<double>> opt_bids, roi_bids, ind_bids;
  for (const auto& item : catalog) {
    ++opt_counts[item.opt_goal];
    ++roi_counts[item.roi_target];
    ++ind_counts[item.industry];
    opt_bids[item.opt_goal].push_back(item.bid);
    roi_bids[item.roi_target].push_back(item.bid);
    ind_bids[item.industry].push_back(item.bid);
  }
  CommercialTokenizer ct;
  ct.opt_goal = fit_compression(opt_counts, cfg.opt_goal.coverage, cfg.opt_goal.target, cfg.opt_goal.tail, &opt_bids,
                                mix64(cfg.seed ^ 0x0f));
  ct.roi = fit_compression(roi_counts, cfg.roi.coverage, cfg.roi.target, cfg.roi.tail, &roi_bids,
                           mix64(cfg.seed ^ 0xf0));
  ct.industry = fit_compression(ind_counts, cfg.industry.coverage, cfg.industry.target, cfg.industry.tail, &ind_bids,
                                mix64(cfg.seed ^ 0xff));
  std::vector<std::pair<CompositionKey, double>> keyed;
  keyed.reserve(catalog.size());
  for (const auto& item : catalog) keyed.emplace_back(ct.key_of(item), item.bid);
  ct.scheme = fit_binning(keyed, cfg.n_min, cfg.n_max, cfg.budget, cfg.allocation);
  return ct;
}

void TokenizerConfig::validate() const {
  if (semantic_levels < 1 || codebook_size < 1 || kmeans_iters < 1) {
    throw Error("tokenizer: semantic_levels, codebook_size and kmeans_iters must be >= 1");
  }
  if (n_min < 1 || n_max < n_min) throw Error("tokenizer: need 1 <= n_min <= n_max");
  if (budget < 1) throw Error("tokenizer: budget must be >= 1");
  for (const AttributePolicy* p : {&opt_goal, &roi, &industry}) {
    if (!(p->coverage > 0.0 && p->coverage <= 1.0) || p->target < 1) {
      throw Error("tokenizer: attribute coverage must lie in (0, 1] and target be >= 1");
    }
  }
}

Tokenizer fit_tokenizer(std::span<const AdItem> catalog, const TokenizerConfig& cfg) {
  cfg.validate();
  if (catalog.empty()) throw Error("fit_tokenizer: empty catalog");
  const size_t dim = catalog.front().embedding.size();
  std::vector<Vec> embeddings;
  embeddings.reserve(catalog.size());
  for (const auto& item : catalog) {
    validate_item(item, dim);
    embeddings.push_back(item.embedding);
  }
  Tokenizer tok;
  tok.codebooks = fit_semantic_codebooks(embeddings, cfg.semantic_levels, cfg.codebook_size, cfg.seed, cfg.kmeans_iters);
  if (cfg.commercial_level) tok.commercial = fit_commercial(catalog, cfg);
  return tok;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr int kTokenizerFormatVersion = 1;

json compression_to_json(const CompressionMap& m) {
  json j;
  j["category_count"] = m.category_count;
  j["retained"] = json::array();
  for (const auto& [raw, c] : m.retained) j["retained"].push_back({raw, c});
  j["tail"] = json::array();
  for (const auto& [raw, c] : m.tail_assignment) j["tail"].push_back({raw, c});
  return j;
}

CompressionMap compression_from_json(const json& j) {
  CompressionMap m;
  m.category_count = j.at("category_count").get<int>();
  for (const auto& p : j.at("retained")) m.retained[p[0].get<int>()] = p[1].get<int>();
  for (const auto& p : j.at("tail")) m.tail_assignment[p[0].get<int>()] = p[1].get<int>();
  return m;
}

json bins_to_json(const KeyBins& kb) {
  return {{"bin_count", kb.bin_count},
          {"boundaries", kb.boundaries},
          {"base_token", kb.base_token},
          {"sample_count", kb.sample_count},
          {"entropy", kb.entropy}};
}

KeyBins bins_from_json(const json& j) {
  KeyBins kb;
  kb.bin_count = j.at("bin_count").get<int>();
  kb.boundaries = j.at("boundaries").get<Vec>();
  kb.base_token = j.at("base_token").get<int>();
  kb.sample_count = j.at("sample_count").get<int64_t>();
  kb.entropy = j.at("entropy").get<double>();
  return kb;
}

}  // namespace

std::string tokenizer_to_json(const Tokenizer& tok) {
  json j;
  j["format"] = "univa-tokenizer";
  j["version"] = kTokenizerFormatVersion;
  j["codebooks"] = tok.codebooks.levels;
  if (tok.commercial) {
    const auto& ct = *tok.commercial;
    json c;
    c["opt_goal"] = compression_to_json(ct.opt_goal);
    c["roi"] = compression_to_json(ct.roi);
    c["industry"] = compression_to_json(ct.industry);
    json s;
    s["n_min"] = ct.scheme.n_min;
    s["n_max"] = ct.scheme.n_max;
    s["budget"] = ct.scheme.budget;
    s["weighted_entropy"] = ct.scheme.weighted_entropy;
    s["token_entropy"] = ct.scheme.token_entropy;
    s["key_vocab"] = ct.scheme.key_vocab;
    s["global_fallback"] = bins_to_json(ct.scheme.global_fallback);
    s["keys"] = json::array();
    for (const auto& [key, kb] : ct.scheme.per_key) {
      json e = bins_to_json(kb);
      e["key"] = {key.opt_goal, key.roi, key.industry};
      s["keys"].push_back(e);
    }
    c["scheme"] = s;
    j["commercial"] = c;
  }
  return j.dump();
}

Tokenizer tokenizer_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "univa-tokenizer") throw Error("not a tokenizer file");
  if (j.at("version").get<int>() != kTokenizerFormatVersion) throw Error("unsupported tokenizer version");
  Tokenizer tok;
  tok.codebooks.levels = j.at("codebooks").get<std::vector<std::vector<Vec>>>();
  if (j.contains("commercial")) {
    const json& c = j.at("commercial");
    CommercialTokenizer ct;
    ct.opt_goal = compression_from_json(c.at("opt_goal"));
    ct.roi = compression_from_json(c.at("roi"));
    ct.industry = compression_from_json(c.at("industry"));
    const json& s = c.at("scheme");
    ct.scheme.n_min = s.at("n_min").get<int>();
    ct.scheme.n_max = s.at("n_max").get<int>();
    ct.scheme.budget = s.at("budget").get<int>();
    ct.scheme.weighted_entropy = s.at("weighted_entropy").get<double>();
    ct.scheme.token_entropy = s.at("token_entropy").get<double>();
    ct.scheme.key_vocab = s.at("key_vocab").get<int>();
    ct.scheme.global_fallback = bins_from_json(s.at("global_fallback"));
    for (const auto& e : s.at("keys")) {
      const auto k = e.at("key").get<std::vector<int>>();
      ct.scheme.per_key.emplace(CompositionKey{k.at(0), k.at(1), k.at(2)}, bins_from_json(e));
    }
    tok.commercial = std::move(ct);
  }
  return tok;
}

void save_tokenizer(const Tokenizer& tok, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << tokenizer_to_json(tok) << "\n";
}

Tokenizer load_tokenizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return tokenizer_from_json(ss.str());
}

// ---------------------------------------------------------------------------

DispersionSummary summarize(std::vector<double> values) {
  DispersionSummary s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.p75 = sorted_quantile(values, 0.75);
  s.p99 = sorted_quantile(values, 0.99);
  return s;
}

DispersionReport path_dispersion_stats(std::span<const AdItem> catalog, const Tokenizer& tokenizer) {
  if (catalog.empty()) throw Error("path_dispersion_stats: empty catalog");
  std::map<SidPath, std::vector<double>> groups;
  for (const auto& item : catalog) groups[tokenizer.tokenize(item)].push_back(item.bid);

  DispersionReport report;
  std::vector<double> stds, ranges;
  for (const auto& [path, bids] : groups) {
    PathDispersion pd;
    pd.path = path;
    pd.count = bids.size();
    const double n = static_cast<double>(bids.size());
    const double mean = std::accumulate(bids.begin(), bids.end(), 0.0) / n;
    double var = 0.0;
    for (double b : bids) var += (b - mean) * (b - mean);
    pd.bid_std = std::sqrt(var / n);
    const auto [lo, hi] = std::minmax_element(bids.begin(), bids.end());
    pd.bid_range = *hi - *lo;
    stds.push_back(pd.bid_std);
    ranges.push_back(pd.bid_range);
    report.paths.push_back(std::move(pd));
  }
  report.std_stats = summarize(std::move(stds));
  report.range_stats = summarize(std::move(ranges));
  return report;
}

}  // namespace univa
