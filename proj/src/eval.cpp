#include "univa/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

#include "univa/kmeans.h"

namespace univa {

namespace {

// 1-based rank of the truth within the first k entries, or 0.
size_t rank_within(const EvalSample& s, int k) {
  const size_t limit = std::min(s.ranked.size(), static_cast<size_t>(std::max(k, 0)));
  for (size_t i = 0; i < limit; ++i)
    if (s.ranked[i] == s.truth) return i + 1;
  return 0;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double hr_at_k(std::span<const EvalSample> samples, int k) {
  if (samples.empty()) throw Error("hr_at_k: no samples");
  size_t hits = 0;
  for (const auto& s : samples) hits += rank_within(s, k) > 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double value_hr_at_k(std::span<const EvalSample> samples, int k) {
  double total = 0.0, hit = 0.0;
  for (const auto& s : samples) {
    total += s.gmv;
    if (rank_within(s, k) > 0) hit += s.gmv;
  }
  if (!(total > 0.0)) throw Error("value_hr_at_k: total gmv must be positive");
  return hit / total;
}

double wndcg_at_k(std::span<const EvalSample> samples, int k) {
  double wsum = 0.0, acc = 0.0;
  for (const auto& s : samples) {
    const double w = std::log10(1.0 + s.gmv);
    wsum += w;
    const size_t r = rank_within(s, k);
    if (r > 0) acc += w / std::log2(1.0 + static_cast<double>(r));
  }
  if (!(wsum > 0.0)) throw Error("wndcg_at_k: sum of log10(1 + gmv) weights must be positive");
  return acc / wsum;
}

std::vector<MetricRow> evaluate_cutoffs(std::span<const EvalSample> samples, std::span<const int> cutoffs) {
  std::vector<MetricRow> rows;
  for (int k : cutoffs) rows.push_back({k, hr_at_k(samples, k), value_hr_at_k(samples, k), wndcg_at_k(samples, k)});
  return rows;
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::ostringstream os;
  os << "k,hr,value_hr,wndcg\n";
  for (const auto& r : rows) os << r.k << ',' << fmt(r.hr) << ',' << fmt(r.value_hr) << ',' << fmt(r.wndcg) << '\n';
  return os.str();
}

const char* to_string(GroupingStrategy g) {
  switch (g) {
    case GroupingStrategy::kDirect: return "direct";
    case GroupingStrategy::kClassifyThenBin: return "classify_then_bin";
    case GroupingStrategy::kClusterThenBin: return "cluster_then_bin";
  }
  return "?";
}

const char* to_string(InBinStrategy b) {
  switch (b) {
    case InBinStrategy::kEqualFrequency: return "equal_freq";
    case InBinStrategy::kEqualWidth: return "equal_width";
    case InBinStrategy::kClusterBins: return "cluster_bins";
  }
  return "?";
}

Vec equal_width_boundaries(std::span<const double> sorted_values, int bins) {
  if (sorted_values.empty()) throw Error("equal_width_boundaries: empty sample");
  if (bins < 1) throw Error("equal_width_boundaries: bins must be >= 1");
  const double lo = sorted_values.front(), hi = sorted_values.back();
  Vec cuts;
  for (int j = 1; j < bins; ++j) cuts.push_back(lo + (hi - lo) * j / bins);
  return cuts;
}

Vec cluster_boundaries(std::span<const double> sorted_values, int bins, uint64_t seed) {
  if (bins <= 1) return {};
  std::vector<Vec> pts;
  pts.reserve(sorted_values.size());
  for (double v : sorted_values) pts.push_back({v});
  const KMeansResult km = kmeans(pts, bins, seed);
  Vec c;
  for (const auto& ct : km.centroids) c.push_back(ct[0]);
  std::sort(c.begin(), c.end());
  Vec cuts;
  for (size_t j = 0; j + 1 < c.size(); ++j) cuts.push_back(0.5 * (c[j] + c[j + 1]));
  return cuts;
}

GridCell evaluate_binning(std::span<const std::vector<double>> groups, InBinStrategy in_bin, int n_min, int n_max,
                          int budget, uint64_t seed) {
  if (groups.empty()) throw Error("evaluate_binning: no groups");
  std::vector<std::vector<double>> sorted;
  std::vector<AllocationGroup> specs;
  double total = 0.0;
  for (const auto& g : groups) total += static_cast<double>(g.size());
  for (const auto& g : groups) {
    if (g.empty()) throw Error("evaluate_binning: empty group");
    std::vector<double> s = g;
    std::sort(s.begin(), s.end());
    std::vector<double> u = s;
    const int d = static_cast<int>(std::unique(u.begin(), u.end()) - u.begin());
    AllocationGroup spec;
    spec.weight = static_cast<double>(s.size()) / total;
    spec.lower = std::min(n_min, d);
    spec.upper = std::max(spec.lower, std::min(n_max, d));
    specs.push_back(spec);
    sorted.push_back(std::move(s));
  }
  int64_t floor_sum = 0;
  for (const auto& s : specs) floor_sum += s.lower;
  if (floor_sum > budget) throw Error("evaluate_binning: budget " + std::to_string(budget) + " below group minimum " +
                                      std::to_string(floor_sum));

  auto cuts_for = [&](size_t k, int n) {
    switch (in_bin) {
      case InBinStrategy::kEqualFrequency: return equal_frequency_boundaries(sorted[k], n);
      case InBinStrategy::kEqualWidth: return equal_width_boundaries(sorted[k], n);
      case InBinStrategy::kClusterBins: return cluster_boundaries(sorted[k], n, mix64(seed ^ (k * 131 + static_cast<size_t>(n))));
    }
    return Vec{};
  };
  std::map<std::pair<size_t, int>, double> memo;
  auto entropy = [&](size_t k, int n) {
    auto [it, fresh] = memo.try_emplace({k, n}, 0.0);
    if (fresh) it->second = partition_entropy(sorted[k], cuts_for(k, n), n);
    return it->second;
  };
  const std::vector<int> counts = greedy_allocate(specs, budget, entropy);

  GridCell cell;
  cell.in_bin = in_bin;
  cell.groups = static_cast<int>(groups.size());
  double group_entropy = 0.0;
  for (size_t k = 0; k < specs.size(); ++k) {
    cell.weighted_entropy += specs[k].weight * entropy(k, counts[k]);
    group_entropy -= specs[k].weight * std::log(specs[k].weight);
    cell.vocab += counts[k];
  }
  cell.entropy = group_entropy + cell.weighted_entropy;
  return cell;
}

std::vector<GridCell> strategy_grid(std::span<const AdItem> catalog, const TokenizerConfig& cfg) {
  if (catalog.empty()) throw Error("strategy_grid: empty catalog");
  std::vector<std::vector<double>> direct(1);
  for (const auto& item : catalog) direct[0].push_back(item.bid);

  const CommercialTokenizer ct = fit_commercial(catalog, cfg);
  std::map<CompositionKey, std::vector<double>> by_key;
  for (const auto& item : catalog) by_key[ct.key_of(item)].push_back(item.bid);
  std::vector<std::vector<double>> classify;
  for (auto& [k, bids] : by_key) classify.push_back(std::move(bids));

  // Raw attribute triples clustered on bid deciles, into as many groups as classify produced.
  std::map<std::tuple<int, int, int>, std::vector<double>> raw;
  for (const auto& item : catalog) raw[{item.opt_goal, item.roi_target, item.industry}].push_back(item.bid);
  std::vector<Vec> profiles;
  std::vector<const std::vector<double>*> raw_bids;
  for (const auto& [k, bids] : raw) {
    profiles.push_back(bid_deciles(bids));
    raw_bids.push_back(&bids);
  }
  const int clusters = std::max(1, std::min(static_cast<int>(classify.size()), static_cast<int>(count_distinct(profiles))));
  const KMeansResult km = kmeans(profiles, clusters, mix64(cfg.seed ^ 0xc1u));
  std::vector<std::vector<double>> clustered(static_cast<size_t>(clusters));
  for (size_t i = 0; i < raw_bids.size(); ++i) {
    auto& dst = clustered[static_cast<size_t>(km.assignment[i])];
    dst.insert(dst.end(), raw_bids[i]->begin(), raw_bids[i]->end());
  }
  std::erase_if(clustered, [](const std::vector<double>& g) { return g.empty(); });

  std::vector<GridCell> cells;
  const std::pair<GroupingStrategy, const std::vector<std::vector<double>>*> groupings[] = {
      {GroupingStrategy::kDirect, &direct},
      {GroupingStrategy::kClassifyThenBin, &classify},
      {GroupingStrategy::kClusterThenBin, &clustered}};
  for (const auto& [g, groups] : groupings) {
    for (InBinStrategy b : {InBinStrategy::kEqualFrequency, InBinStrategy::kEqualWidth, InBinStrategy::kClusterBins}) {
      GridCell cell = evaluate_binning(*groups, b, cfg.n_min, cfg.n_max, cfg.budget, cfg.seed);
      cell.grouping = g;
      cells.push_back(cell);
    }
  }
  return cells;
}

std::string grid_csv(std::span<const GridCell> cells) {
  std::ostringstream os;
  os << "grouping,in_bin,H,V,weighted_entropy,groups\n";
  for (const auto& c : cells) {
    os << to_string(c.grouping) << ',' << to_string(c.in_bin) << ',' << fmt(c.entropy) << ',' << c.vocab << ','
       << fmt(c.weighted_entropy) << ',' << c.groups << '\n';
  }
  return os.str();
}

std::vector<ValidityRow> trie_validity_report(const Model& model, std::span<const Request> requests,
                                              std::span<const AdItem> catalog, const Trie& trie,
                                              const CatalogIndex& index, int beam_width) {
  std::vector<ValidityRow> rows;
  for (const auto& r : requests) {
    const auto eligible = eligibility_mask(r, catalog);
    const PersonalizedTrie pt = personalize(trie, eligible);
    Tensor h;
    {
      ag::NoGradGuard no_grad;
      h = model.encode(r.context);
    }
    const BeamResult with = beam_search(model, h, &pt, beam_width);
    const BeamResult without = beam_search(model, h, nullptr, beam_width);
    ValidityRow row;
    row.request_id = r.id;
    row.total_with_trie = with.paths.size();
    row.total_without_trie = without.paths.size();
    row.expansions_with_trie = with.expansions;
    row.expansions_without_trie = without.expansions;
    for (const auto& p : with.paths) row.valid_with_trie += index.resolve(p.path, &eligible).has_value();
    for (const auto& p : without.paths) row.valid_without_trie += index.resolve(p.path, &eligible).has_value();
    rows.push_back(row);
  }
  return rows;
}

std::string validity_csv(std::span<const ValidityRow> rows) {
  std::ostringstream os;
  os << "request,valid_with_trie,total_with_trie,valid_without_trie,total_without_trie,expansions_with_trie,"
        "expansions_without_trie\n";
  for (const auto& r : rows) {
    os << r.request_id << ',' << r.valid_with_trie << ',' << r.total_with_trie << ',' << r.valid_without_trie << ','
       << r.total_without_trie << ',' << r.expansions_with_trie << ',' << r.expansions_without_trie << '\n';
  }
  return os.str();
}

std::string dispersion_csv(const DispersionReport& semantic_only, const DispersionReport& commercial) {
  std::ostringstream os;
  os << "tokenizer,statistic,paths,mean,p75,p99\n";
  auto put = [&](const char* name, const DispersionReport& r) {
    os << name << ",bid_std," << r.paths.size() << ',' << fmt(r.std_stats.mean) << ',' << fmt(r.std_stats.p75) << ','
       << fmt(r.std_stats.p99) << '\n';
    os << name << ",bid_range," << r.paths.size() << ',' << fmt(r.range_stats.mean) << ',' << fmt(r.range_stats.p75)
       << ',' << fmt(r.range_stats.p99) << '\n';
  };
  put("semantic_only", semantic_only);
  put("commercial", commercial);
  return os.str();
}

}  // namespace univa
