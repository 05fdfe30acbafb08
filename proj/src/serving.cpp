#include "univa/serving.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>

namespace univa {

Trie::Trie(std::span<const AdItem> catalog, const Tokenizer& tokenizer)
    : path_length_(tokenizer.path_length()), level_vocab_(tokenizer.level_vocab_sizes()) {
  nodes_.push_back(Node{});
  for (const auto& item : catalog) {
    SidPath path;
    try {
      path = tokenizer.tokenize(item);
    } catch (const Error& e) {
      throw Error("build_trie: cannot tokenize item " + std::to_string(item.id) + ": " + e.what());
    }
    int cur = 0;
    for (int tok : path) {
      auto& ch = nodes_[static_cast<size_t>(cur)].children;
      auto it = std::lower_bound(ch.begin(), ch.end(), std::make_pair(tok, -1));
      if (it != ch.end() && it->first == tok) {
        cur = it->second;
        continue;
      }
      const int idx = static_cast<int>(nodes_.size());
      const int depth = nodes_[static_cast<size_t>(cur)].depth + 1;
      ch.insert(it, {tok, idx});
      Node n;
      n.token = tok;
      n.depth = depth;
      n.parent = cur;
      nodes_.push_back(std::move(n));
      cur = idx;
    }
    nodes_[static_cast<size_t>(cur)].items.push_back(item.id);
  }
  for (auto& n : nodes_) std::sort(n.items.begin(), n.items.end());
}

int Trie::find(std::span<const int> prefix) const {
  if (nodes_.empty()) return -1;
  int cur = 0;
  for (int tok : prefix) {
    const auto& ch = nodes_[static_cast<size_t>(cur)].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), std::make_pair(tok, -1));
    if (it == ch.end() || it->first != tok) return -1;
    cur = it->second;
  }
  return cur;
}

std::vector<int> Trie::leaves() const {
  std::vector<int> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].depth == path_length_ && !nodes_[i].items.empty()) out.push_back(static_cast<int>(i));
  }
  return out;
}

SidPath Trie::path_to(int index) const {
  SidPath p;
  for (int cur = index; cur > 0; cur = nodes_.at(static_cast<size_t>(cur)).parent) {
    p.push_back(nodes_[static_cast<size_t>(cur)].token);
  }
  std::reverse(p.begin(), p.end());
  return p;
}

std::vector<int> PersonalizedTrie::valid_next(std::span<const int> prefix) const {
  std::vector<int> out;
  const int n = trie_->find(prefix);
  if (!is_live(n)) return out;
  for (const auto& [tok, child] : trie_->node(n).children) {
    if (is_live(child)) out.push_back(tok);
  }
  return out;
}

std::vector<SidPath> PersonalizedTrie::live_paths() const {
  std::vector<SidPath> out;
  for (int leaf : trie_->leaves()) {
    if (is_live(leaf)) out.push_back(trie_->path_to(leaf));
  }
  std::sort(out.begin(), out.end());
  return out;
}

PersonalizedTrie personalize(const Trie& trie, const std::vector<char>& eligible) {
  std::vector<char> live(trie.node_count(), 0);
  // Children always have larger indices than parents, so a reverse sweep is bottom-up.
  for (int i = static_cast<int>(trie.node_count()) - 1; i >= 0; --i) {
    const auto& n = trie.node(i);
    for (int64_t id : n.items) {
      if (static_cast<size_t>(id) < eligible.size() && eligible[static_cast<size_t>(id)]) {
        live[static_cast<size_t>(i)] = 1;
        break;
      }
    }
    if (live[static_cast<size_t>(i)] && n.parent >= 0) live[static_cast<size_t>(n.parent)] = 1;
  }
  return PersonalizedTrie(trie, std::move(live));
}

PersonalizedTrie personalize(const Trie& trie, const Request& request, std::span<const AdItem> catalog) {
  return personalize(trie, eligibility_mask(request, catalog));
}

BeamResult beam_search_generic(std::span<const int> level_vocab, int beam_width, const LevelScorer& scorer,
                               const NextTokens& next) {
  if (beam_width < 1) throw Error("beam_search: beam width must be >= 1");
  BeamResult result;
  std::vector<ScoredPath> beams{ScoredPath{}};
  const auto better = [](const ScoredPath& a, const ScoredPath& b) {
    return a.score > b.score || (a.score == b.score && a.path < b.path);
  };
  for (size_t level = 0; level < level_vocab.size(); ++level) {
    std::vector<ScoredPath> candidates;
    for (const auto& beam : beams) {
      std::vector<int> tokens;
      if (next) {
        tokens = next(beam.path);
      } else {
        tokens.resize(static_cast<size_t>(level_vocab[level]));
        for (int t = 0; t < level_vocab[level]; ++t) tokens[static_cast<size_t>(t)] = t;
      }
      if (tokens.empty()) continue;
      const Vec scores = scorer(beam.path);
      for (int t : tokens) {
        ScoredPath c{beam.path, beam.score + scores.at(static_cast<size_t>(t))};
        c.path.push_back(t);
        candidates.push_back(std::move(c));
      }
      result.expansions += tokens.size();
    }
    if (candidates.empty()) return result;
    const size_t keep = std::min(candidates.size(), static_cast<size_t>(beam_width));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<ptrdiff_t>(keep), candidates.end(), better);
    candidates.resize(keep);
    beams = std::move(candidates);
  }
  result.paths = std::move(beams);
  return result;
}

BeamResult beam_search(const Model& model, const Tensor& h, const PersonalizedTrie* ptrie, int beam_width,
                       BeamScoreMode mode) {
  const auto& vocab = model.config().level_vocab_sizes;
  LevelScorer scorer = [&](std::span<const int> prefix) {
    DualHeadOutput out = model.decode_step(prefix, h);
    if (mode == BeamScoreMode::kRawFused) return out.fused;
    Vec logp(out.policy.size());
    for (size_t i = 0; i < logp.size(); ++i) logp[i] = std::log(std::max(out.policy[i], 1e-300));
    return logp;
  };
  NextTokens next;
  if (ptrie) next = [ptrie](std::span<const int> prefix) { return ptrie->valid_next(prefix); };
  return beam_search_generic(vocab, beam_width, scorer, next);
}

RetrievalResult retrieve(const Model& model, const Request& request, std::span<const AdItem> catalog,
                         const Trie& trie, int beam_width, int top_k, bool use_trie, BeamScoreMode mode) {
  const auto eligible = eligibility_mask(request, catalog);
  const PersonalizedTrie ptrie = personalize(trie, eligible);
  Tensor h;
  {
    ag::NoGradGuard no_grad;
    h = model.encode(request.context);
  }
  RetrievalResult out;
  out.beam = beam_search(model, h, use_trie ? &ptrie : nullptr, beam_width, mode);

  std::map<int64_t, double> bids;
  for (const auto& item : catalog) bids[item.id] = item.bid;
  std::unordered_set<int64_t> seen;
  for (const auto& sp : out.beam.paths) {
    const int leaf = trie.find(sp.path);
    if (leaf < 0 || static_cast<int>(sp.path.size()) != trie.path_length()) continue;
    std::vector<int64_t> items;
    for (int64_t id : trie.node(leaf).items) {
      if (static_cast<size_t>(id) < eligible.size() && eligible[static_cast<size_t>(id)]) items.push_back(id);
    }
    std::sort(items.begin(), items.end(), [&](int64_t a, int64_t b) {
      return bids[a] > bids[b] || (bids[a] == bids[b] && a < b);
    });
    for (int64_t id : items) {
      if (static_cast<int>(out.items.size()) >= top_k) return out;
      if (seen.insert(id).second) out.items.push_back({id, sp.score});
    }
  }
  return out;
}

}  // namespace univa
