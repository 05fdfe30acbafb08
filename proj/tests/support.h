#pragma once

// Small fixtures shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "univa/model.h"
#include "univa/serving.h"
#include "univa/tokenizer.h"

namespace univa::testing {

/// Two semantic levels of three well-separated centroids: the item embedding
/// c0[a] + c1[b] tokenizes to (a, b) exactly.
inline Tokenizer grid_tokenizer() {
  Tokenizer tok;
  tok.codebooks.levels = {{{10, 0}, {0, 10}, {-10, -10}}, {{1, 0}, {0, 1}, {-1, -1}}};
  return tok;
}

inline AdItem grid_item(int64_t id, int a, int b, double bid) {
  const Tokenizer tok = grid_tokenizer();
  AdItem it;
  it.id = id;
  it.embedding = {tok.codebooks.levels[0][a][0] + tok.codebooks.levels[1][b][0],
                  tok.codebooks.levels[0][a][1] + tok.codebooks.levels[1][b][1]};
  it.bid = bid;
  return it;
}

/// One item per cell of the 3x3 grid, bid rising with the id.
inline std::vector<AdItem> grid_catalog() {
  std::vector<AdItem> cat;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) cat.push_back(grid_item(a * 3 + b, a, b, 10.0 + a * 3 + b));
  return cat;
}

inline ModelConfig tiny_config(std::vector<int> vocab, uint64_t seed = 1) {
  ModelConfig m;
  m.embed_dim = 8;
  m.heads = 2;
  m.encoder_layers = 1;
  m.ffn_hidden = 8;
  m.decoder_layers = 3;
  m.mor_rounds = 1;
  m.level_vocab_sizes = std::move(vocab);
  m.moe.num_experts = 2;
  m.moe.top_k = 1;
  m.moe.expert_hidden = 4;
  m.user_vocab = 6;
  m.organic_vocab = 4;
  m.env_vocab = 3;
  m.item_vocab = 9;
  m.max_seq_len = 16;
  m.seed = seed;
  return m;
}

inline RequestContext tiny_context(uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, 5), o(0, 3), e(0, 2), it(0, 8);
  RequestContext c;
  c.user_tokens = {u(rng), u(rng)};
  c.organic_tokens = {o(rng)};
  c.env_tokens = {e(rng)};
  c.item_tokens = {it(rng), it(rng), it(rng)};
  return c;
}

/// Every path of the level vocabularies, in lexicographic order.
inline std::vector<SidPath> all_paths(const std::vector<int>& vocab) {
  std::vector<SidPath> out{{}};
  for (int v : vocab) {
    std::vector<SidPath> next;
    for (const auto& p : out)
      for (int t = 0; t < v; ++t) {
        SidPath q = p;
        q.push_back(t);
        next.push_back(q);
      }
    out = std::move(next);
  }
  return out;
}

/// Cumulative raw fused score of a full path, step by step through decode_step.
inline double fused_path_score(const Model& model, const Tensor& h, const SidPath& path) {
  double s = 0;
  for (size_t l = 0; l < path.size(); ++l) {
    const auto out = model.decode_step(std::span<const int>(path.data(), l), h);
    s += out.fused[static_cast<size_t>(path[l])];
  }
  return s;
}

struct GradCheck {
  size_t checked = 0;
  double worst = 0.0;  // largest relative error seen
  std::string worst_param;
};

/// Central finite differences against the analytic gradient for a few entries of
/// every parameter accepted by `filter`. `loss` must rebuild the graph on each call.
/// Relative errors use max(|numeric|, |analytic|, floor) as the denominator.
inline GradCheck finite_difference_check(Model& model, const std::function<Tensor()>& loss,
                                         const std::function<bool(const std::string&)>& filter,
                                         int per_param = 3, double h = 1e-5, double floor = 1e-4) {
  model.params().zero_grad();
  ag::backward(loss());
  GradCheck out;
  for (const auto& [name, t] : model.params().entries()) {
    if (filter && !filter(name)) continue;
    Tensor p = t;
    const size_t n = p.size();
    const Vec grad = p.grad().empty() ? Vec(n, 0.0) : p.grad();
    for (int j = 0; j < per_param && static_cast<size_t>(j) < n; ++j) {
      const size_t idx = (static_cast<size_t>(j) * 7919u) % n;
      const double orig = p.value()[idx];
      p.mutable_value()[idx] = orig + h;
      const double up = loss().item();
      p.mutable_value()[idx] = orig - h;
      const double down = loss().item();
      p.mutable_value()[idx] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[idx];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), floor});
      const double rel = std::abs(numeric - analytic) / scale;
      ++out.checked;
      if (rel > out.worst) {
        out.worst = rel;
        out.worst_param = name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  model.params().zero_grad();
  return out;
}

}  // namespace univa::testing
