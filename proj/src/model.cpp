#include "univa/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace univa {

using nlohmann::json;
namespace ag = univa::ag;

void ModelConfig::validate() const {
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) throw Error("model: embed_dim must be divisible by heads");
  if (level_vocab_sizes.empty()) throw Error("model: level_vocab_sizes must be non-empty");
  for (int v : level_vocab_sizes) {
    if (v < 1) throw Error("model: level vocabularies must be non-empty");
  }
  if (mor_rounds < 1) throw Error("model: mor_rounds must be >= 1");
  if (decoder_layers < 3) throw Error("model: decoder_layers must be >= 3 (input, middle, output)");
  if (encoder_layers < 0) throw Error("model: encoder_layers must be >= 0");
  if (moe.num_experts < 1 || moe.top_k < 1 || moe.top_k > moe.num_experts) throw Error("model: need 1 <= top_k <= num_experts");
  if (user_vocab < 1 || organic_vocab < 1 || env_vocab < 1 || item_vocab < 1) throw Error("model: vocabularies must be >= 1");
  if (max_seq_len < 1) throw Error("model: max_seq_len must be >= 1");
}

Vec stable_softmax(std::span<const double> logits) {
  Vec out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

DualHeadOutput fuse_heads(Vec gen, Vec value) {
  if (gen.size() != value.size()) throw Error("fuse_heads: head sizes differ");
  DualHeadOutput out;
  out.fused.resize(gen.size());
  for (size_t i = 0; i < gen.size(); ++i) out.fused[i] = gen[i] + value[i];
  out.policy = stable_softmax(out.fused);
  out.gen_scores = std::move(gen);
  out.value_scores = std::move(value);
  return out;
}

// ---------------------------------------------------------------------------

Tensor ParameterStore::add(std::string name, int rows, int cols, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  Vec v(static_cast<size_t>(rows) * cols);
  for (double& x : v) x = u(rng);
  Tensor t = Tensor::parameter(rows, cols, std::move(v));
  entries_.emplace_back(std::move(name), t);
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw Error("no parameter named " + name);
}

size_t ParameterStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

bool is_value_head_parameter(const std::string& name) { return name.rfind("head.value.", 0) == 0; }

// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build();
}

Model::Model(const Model& other) : cfg_(other.cfg_) {
  build();
  copy_from(other);
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    store_ = ParameterStore();
    encoder_.clear();
    emb_sid_.clear();
    mid_blocks_.clear();
    gen_w_.clear();
    gen_b_.clear();
    value_w_.clear();
    value_b_.clear();
    build();
    copy_from(other);
  }
  return *this;
}

void Model::copy_from(const Model& other) {
  const auto& src = other.store_.entries();
  const auto& dst = store_.entries();
  if (src.size() != dst.size()) throw Error("copy_from: parameter layouts differ");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].second.size() != dst[i].second.size()) throw Error("copy_from: parameter shapes differ");
    Tensor t = dst[i].second;
    t.mutable_value() = src[i].second.value();
  }
  routers_ = other.routers_;
}

void Model::build() {
  Rng rng(cfg_.seed);
  const int d = cfg_.embed_dim;
  auto attention = [&](const std::string& p) {
    return Attention{store_.add(p + ".wq", d, d, rng), store_.add(p + ".wk", d, d, rng),
                     store_.add(p + ".wv", d, d, rng), store_.add(p + ".wo", d, d, rng)};
  };
  auto ffn = [&](const std::string& p, int hidden) {
    return FeedForward{store_.add(p + ".w1", d, hidden, rng), store_.add(p + ".b1", 1, hidden, rng),
                       store_.add(p + ".w2", hidden, d, rng), store_.add(p + ".b2", 1, d, rng)};
  };

  emb_user_ = store_.add("encoder.emb_user", cfg_.user_vocab, d, rng);
  emb_organic_ = store_.add("encoder.emb_organic", cfg_.organic_vocab, d, rng);
  emb_env_ = store_.add("encoder.emb_env", cfg_.env_vocab, d, rng);
  emb_item_ = store_.add("encoder.emb_item", cfg_.item_vocab, d, rng);
  emb_group_ = store_.add("encoder.emb_group", 4, d, rng);
  emb_pos_ = store_.add("encoder.emb_pos", cfg_.max_seq_len, d, rng);
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    encoder_.push_back(EncoderLayer{attention(p + ".attn"), ffn(p + ".ffn", cfg_.ffn_hidden)});
  }

  const int levels = cfg_.sid_levels();
  sid_bos_ = store_.add("decoder.bos", 1, d, rng);
  emb_level_pos_ = store_.add("decoder.level_pos", levels, d, rng);
  for (int l = 0; l + 1 < levels; ++l) {
    emb_sid_.push_back(store_.add("decoder.emb_sid" + std::to_string(l), cfg_.level_vocab_sizes[l], d, rng));
  }
  int router_index = 0;
  auto block = [&](const std::string& p) {
    DecoderBlock b;
    b.cross = attention(p + ".cross");
    b.self = attention(p + ".self");
    b.moe.router = store_.add(p + ".moe.router", d, cfg_.moe.num_experts, rng);
    b.moe.shared = ffn(p + ".moe.shared", cfg_.moe.expert_hidden);
    for (int m = 0; m < cfg_.moe.num_experts; ++m) {
      b.moe.experts.push_back(ffn(p + ".moe.expert" + std::to_string(m), cfg_.moe.expert_hidden));
    }
    b.router_index = router_index++;
    return b;
  };
  in_block_ = block("decoder.in");
  for (int l = 0; l < cfg_.decoder_layers - 2; ++l) mid_blocks_.push_back(block("decoder.mid" + std::to_string(l)));
  out_block_ = block("decoder.out");
  routers_.assign(router_index, RouterState{Vec(cfg_.moe.num_experts, 0.0), Vec(cfg_.moe.num_experts, 0.0)});

  for (int l = 0; l < levels; ++l) {
    const int v = cfg_.level_vocab_sizes[l];
    const std::string s = std::to_string(l);
    gen_w_.push_back(store_.add("head.gen.w" + s, d, v, rng));
    gen_b_.push_back(store_.add("head.gen.b" + s, 1, v, rng));
    value_w_.push_back(store_.add("head.value.w" + s, d, v, rng));
    value_b_.push_back(store_.add("head.value.b" + s, 1, v, rng));
  }
}

Tensor Model::attention(const Tensor& q_in, const Tensor& kv_in, const Attention& a, bool causal) const {
  const Tensor q = ag::matmul(q_in, a.wq);
  const Tensor k = ag::matmul(kv_in, a.wk);
  const Tensor v = ag::matmul(kv_in, a.wv);
  const int dh = cfg_.embed_dim / cfg_.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(cfg_.heads);
  for (int hd = 0; hd < cfg_.heads; ++hd) {
    const Tensor qh = ag::slice_cols(q, hd * dh, dh);
    const Tensor kh = ag::slice_cols(k, hd * dh, dh);
    const Tensor vh = ag::slice_cols(v, hd * dh, dh);
    const Tensor scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv);
    heads.push_back(ag::matmul(ag::softmax_rows(scores, causal), vh));
  }
  return ag::matmul(cfg_.heads == 1 ? heads[0] : ag::concat_cols(heads), a.wo);
}

Tensor Model::feed_forward(const Tensor& x, const FeedForward& f) const {
  const Tensor hidden = ag::silu(ag::add_row(ag::matmul(x, f.w1), f.b1));
  return ag::add_row(ag::matmul(hidden, f.w2), f.b2);
}

Tensor Model::encode(const RequestContext& ctx) const {
  const size_t n = ctx.length();
  if (n == 0) throw Error("encode: empty context");
  if (n > static_cast<size_t>(cfg_.max_seq_len)) {
    throw Error("encode: context length " + std::to_string(n) + " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  std::vector<Tensor> parts;
  std::vector<int> groups;
  auto push = [&](const Tensor& table, const std::vector<int>& ids, int group) {
    if (ids.empty()) return;
    parts.push_back(ag::gather_rows(table, ids));
    groups.insert(groups.end(), ids.size(), group);
  };
  push(emb_user_, ctx.user_tokens, 0);
  push(emb_organic_, ctx.organic_tokens, 1);
  push(emb_env_, ctx.env_tokens, 2);
  push(emb_item_, ctx.item_tokens, 3);
  std::vector<int> positions(n);
  std::iota(positions.begin(), positions.end(), 0);

  Tensor x = parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
  x = ag::add(x, ag::gather_rows(emb_group_, groups));
  x = ag::add(x, ag::gather_rows(emb_pos_, positions));
  for (const auto& layer : encoder_) {
    const Tensor normed = ag::layer_norm_rows(x);
    x = ag::add(x, attention(normed, normed, layer.attn, true));
    x = ag::add(x, feed_forward(ag::layer_norm_rows(x), layer.ffn));
  }
  return ag::layer_norm_rows(x);
}

Tensor Model::moe_forward(const Tensor& x, const MoELayer& layer, const RouterState& router, LoadCounts* loads,
                          int router_index) const {
  const int n_exp = cfg_.moe.num_experts;
  const int top_k = cfg_.moe.top_k;
  const Tensor shared = feed_forward(x, layer.shared);
  const Tensor gates = ag::softmax_rows(ag::matmul(x, layer.router));
  std::vector<Tensor> routed_rows;
  routed_rows.reserve(x.rows());
  std::vector<int> order(n_exp);
  for (int r = 0; r < x.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return gates.at(r, a) + router.bias[a] > gates.at(r, b) + router.bias[b];
    });
    const Tensor xr = ag::slice_rows(x, r, 1);
    std::vector<Tensor> contributions;
    for (int s = 0; s < top_k; ++s) {
      const int m = order[s];
      contributions.push_back(ag::mul_scalar(feed_forward(xr, layer.experts[m]), ag::pick(gates, r, m)));
      if (loads) (*loads)[router_index][m] += 1.0;
    }
    Tensor acc = contributions[0];
    for (size_t i = 1; i < contributions.size(); ++i) acc = ag::add(acc, contributions[i]);
    routed_rows.push_back(acc);
  }
  const Tensor routed = routed_rows.size() == 1 ? routed_rows[0] : ag::concat_rows(routed_rows);
  return ag::add(shared, routed);
}

Tensor Model::block_forward(const Tensor& z, const Tensor& h, const DecoderBlock& block, LoadCounts* loads) const {
  Tensor x = ag::add(z, attention(ag::layer_norm_rows(z), h, block.cross, false));
  const Tensor normed = ag::layer_norm_rows(x);
  x = ag::add(x, attention(normed, normed, block.self, true));
  const int ri = block.router_index;
  return ag::add(x, moe_forward(ag::layer_norm_rows(x), block.moe, routers_[ri], loads, ri));
}

Tensor Model::mor_forward(const Tensor& z, const Tensor& h, int rounds, LoadCounts* loads) const {
  if (rounds < 1) throw Error("mor_forward: rounds must be >= 1");
  Tensor x = block_forward(z, h, in_block_, loads);
  for (int r = 0; r < rounds; ++r) {
    for (const auto& b : mid_blocks_) x = block_forward(x, h, b, loads);
  }
  return block_forward(x, h, out_block_, loads);
}

Tensor Model::decoder_inputs(std::span<const int> tokens) const {
  const int levels = cfg_.sid_levels();
  std::vector<Tensor> rows{sid_bos_};
  for (size_t l = 0; l < tokens.size(); ++l) {
    if (static_cast<int>(l) + 1 >= levels) break;
    const int tok = tokens[l];
    if (tok < 0 || tok >= cfg_.level_vocab_sizes[l]) {
      throw Error("decoder: token " + std::to_string(tok) + " outside level-" + std::to_string(l + 1) + " vocabulary");
    }
    rows.push_back(ag::gather_rows(emb_sid_[l], std::span<const int>(&tokens[l], 1)));
  }
  const Tensor x = rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
  std::vector<int> pos(x.rows());
  std::iota(pos.begin(), pos.end(), 0);
  return ag::add(x, ag::gather_rows(emb_level_pos_, pos));
}

Tensor Model::trunk(std::span<const int> tokens, const Tensor& h, LoadCounts* loads) const {
  if (h.cols() != cfg_.embed_dim) throw Error("decoder: context state width mismatch");
  return ag::layer_norm_rows(mor_forward(decoder_inputs(tokens), h, cfg_.mor_rounds, loads));
}

DualHeadOutput Model::decode_step(std::span<const int> prefix, const Tensor& h) const {
  const int level = static_cast<int>(prefix.size());
  if (level >= cfg_.sid_levels()) {
    throw Error("decode_step: prefix length " + std::to_string(level) + " must be below " +
                std::to_string(cfg_.sid_levels()));
  }
  ag::NoGradGuard no_grad;
  const Tensor z = trunk(prefix, h, nullptr);
  const Tensor zl = ag::slice_rows(z, level, 1);
  const Tensor gen = ag::add(ag::matmul(zl, gen_w_[level]), gen_b_[level]);
  const Tensor value = ag::add(ag::matmul(zl, value_w_[level]), value_b_[level]);
  return fuse_heads(gen.value(), value.value());
}

LevelOutputs Model::decode_teacher(std::span<const int> path, const Tensor& h, LoadCounts* loads) const {
  const int levels = cfg_.sid_levels();
  if (static_cast<int>(path.size()) != levels) throw Error("decode_teacher: path length must equal sid_levels");
  for (int l = 0; l < levels; ++l) {
    if (path[l] < 0 || path[l] >= cfg_.level_vocab_sizes[l]) {
      throw Error("decode_teacher: token " + std::to_string(path[l]) + " outside level-" + std::to_string(l + 1) +
                  " vocabulary");
    }
  }
  const Tensor z = trunk(path.first(levels - 1), h, loads);
  LevelOutputs out;
  for (int l = 0; l < levels; ++l) {
    const Tensor zl = ag::slice_rows(z, l, 1);
    out.gen.push_back(ag::add(ag::matmul(zl, gen_w_[l]), gen_b_[l]));
    out.value.push_back(ag::add(ag::matmul(zl, value_w_[l]), value_b_[l]));
  }
  return out;
}

LoadCounts Model::empty_load_counts() const {
  return LoadCounts(routers_.size(), Vec(cfg_.moe.num_experts, 0.0));
}

void Model::accumulate_loads(const LoadCounts& loads) {
  for (size_t r = 0; r < routers_.size() && r < loads.size(); ++r)
    for (size_t m = 0; m < loads[r].size(); ++m) routers_[r].load[m] += loads[r][m];
}

void update_load_balance(RouterState& router, double bias_step, double decay) {
  if (router.load.empty()) return;
  const double mean = std::accumulate(router.load.begin(), router.load.end(), 0.0) / router.load.size();
  for (size_t m = 0; m < router.load.size(); ++m) {
    const double diff = router.load[m] - mean;
    const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    router.bias[m] -= bias_step * sign;
  }
  for (double& l : router.load) l *= decay;
}

double load_imbalance(const std::vector<RouterState>& routers) {
  double worst = 1.0;
  for (const auto& r : routers) {
    const double mean = std::accumulate(r.load.begin(), r.load.end(), 0.0) / std::max<size_t>(1, r.load.size());
    if (mean <= 0.0) continue;
    worst = std::max(worst, *std::max_element(r.load.begin(), r.load.end()) / mean);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, config JSON, router state, named parameter arrays.

namespace {

constexpr char kMagic[8] = {'U', 'N', 'I', 'V', 'A', 'C', 'K', 'P'};
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<uint64_t>(in);
  if (n > (1ULL << 30)) throw Error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("checkpoint: truncated file");
  return s;
}

void write_doubles(std::ostream& out, const Vec& v) {
  write_pod<uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Vec read_doubles(std::istream& in) {
  const auto n = read_pod<uint64_t>(in);
  if (n > (1ULL << 32)) throw Error("checkpoint: corrupt array length");
  Vec v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["encoder_layers"] = cfg.encoder_layers;
  j["ffn_hidden"] = cfg.ffn_hidden;
  j["decoder_layers"] = cfg.decoder_layers;
  j["mor_rounds"] = cfg.mor_rounds;
  j["level_vocab_sizes"] = cfg.level_vocab_sizes;
  j["moe"] = {{"num_experts", cfg.moe.num_experts},
              {"top_k", cfg.moe.top_k},
              {"expert_hidden", cfg.moe.expert_hidden},
              {"bias_step", cfg.moe.bias_step},
              {"load_decay", cfg.moe.load_decay}};
  j["user_vocab"] = cfg.user_vocab;
  j["organic_vocab"] = cfg.organic_vocab;
  j["env_vocab"] = cfg.env_vocab;
  j["item_vocab"] = cfg.item_vocab;
  j["max_seq_len"] = cfg.max_seq_len;
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.heads = j.at("heads");
  c.encoder_layers = j.at("encoder_layers");
  c.ffn_hidden = j.at("ffn_hidden");
  c.decoder_layers = j.at("decoder_layers");
  c.mor_rounds = j.at("mor_rounds");
  c.level_vocab_sizes = j.at("level_vocab_sizes").get<std::vector<int>>();
  const json& m = j.at("moe");
  c.moe.num_experts = m.at("num_experts");
  c.moe.top_k = m.at("top_k");
  c.moe.expert_hidden = m.at("expert_hidden");
  c.moe.bias_step = m.at("bias_step");
  c.moe.load_decay = m.at("load_decay");
  c.user_vocab = j.at("user_vocab");
  c.organic_vocab = j.at("organic_vocab");
  c.env_vocab = j.at("env_vocab");
  c.item_vocab = j.at("item_vocab");
  c.max_seq_len = j.at("max_seq_len");
  c.seed = j.at("seed");
  return c;
}

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_string(out, model_config_to_json(cfg_));
  write_pod<uint64_t>(out, routers_.size());
  for (const auto& r : routers_) {
    write_doubles(out, r.load);
    write_doubles(out, r.bias);
  }
  write_pod<uint64_t>(out, store_.entries().size());
  for (const auto& [name, t] : store_.entries()) {
    write_string(out, name);
    write_pod<int32_t>(out, t.rows());
    write_pod<int32_t>(out, t.cols());
    write_doubles(out, t.value());
  }
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error("not a univa checkpoint: " + path);
  if (read_pod<uint32_t>(in) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  Model model(model_config_from_json(read_string(in)));
  const auto routers = read_pod<uint64_t>(in);
  if (routers != model.routers_.size()) throw Error("checkpoint: router count mismatch");
  for (auto& r : model.routers_) {
    r.load = read_doubles(in);
    r.bias = read_doubles(in);
  }
  const auto count = read_pod<uint64_t>(in);
  if (count != model.store_.entries().size()) throw Error("checkpoint: parameter count mismatch");
  for (const auto& [name, t] : model.store_.entries()) {
    if (read_string(in) != name) throw Error("checkpoint: parameter order mismatch at " + name);
    const auto rows = read_pod<int32_t>(in);
    const auto cols = read_pod<int32_t>(in);
    Vec v = read_doubles(in);
    if (rows != t.rows() || cols != t.cols() || v.size() != t.size()) throw Error("checkpoint: shape mismatch at " + name);
    Tensor handle = t;
    handle.mutable_value() = std::move(v);
  }
  return model;
}

}  // namespace univa
