#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "univa/autograd.h"
#include "univa/common.h"

namespace univa {

using ag::Tensor;

struct MoEConfig {
  int num_experts = 4;
  int top_k = 2;
  int expert_hidden = 32;
  double bias_step = 0.01;
  double load_decay = 0.9;
};

/// Per-router balancing state: running expert loads and selection-only biases.
struct RouterState {
  Vec load;
  Vec bias;
};

struct ModelConfig {
  int embed_dim = 32;
  int heads = 4;
  int encoder_layers = 2;
  int ffn_hidden = 64;
  // Distinct decoder blocks: one input block, one output block, and
  // (decoder_layers - 2) blocks forming the shared middle stack.
  int decoder_layers = 3;
  int mor_rounds = 2;
  std::vector<int> level_vocab_sizes;
  MoEConfig moe;
  int user_vocab = 1;
  int organic_vocab = 1;
  int env_vocab = 1;
  int item_vocab = 1;
  int max_seq_len = 64;
  uint64_t seed = 0;

  int sid_levels() const { return static_cast<int>(level_vocab_sizes.size()); }
  void validate() const;
};

struct RequestContext {
  std::vector<int> user_tokens;
  std::vector<int> organic_tokens;
  std::vector<int> env_tokens;
  std::vector<int> item_tokens;

  size_t length() const { return user_tokens.size() + organic_tokens.size() + env_tokens.size() + item_tokens.size(); }
};

struct DualHeadOutput {
  Vec gen_scores;
  Vec value_scores;
  Vec fused;
  Vec policy;
};

/// Fuses the two heads by element-wise sum and normalizes with a max-shifted softmax.
DualHeadOutput fuse_heads(Vec gen, Vec value);
Vec stable_softmax(std::span<const double> logits);

/// Ordered, named parameter tensors.
class ParameterStore {
 public:
  Tensor add(std::string name, int rows, int cols, Rng& rng);
  Tensor get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Expert-selection counts gathered during a forward pass, one vector per router.
using LoadCounts = std::vector<Vec>;

struct Attention {
  Tensor wq, wk, wv, wo;
};

struct FeedForward {
  Tensor w1, b1, w2, b2;
};

struct MoELayer {
  Tensor router;  // embed_dim x num_experts
  FeedForward shared;
  std::vector<FeedForward> experts;
};

struct DecoderBlock {
  Attention cross;
  Attention self;
  MoELayer moe;
  int router_index = 0;
};

struct EncoderLayer {
  Attention attn;
  FeedForward ffn;
};

struct LevelOutputs {
  std::vector<Tensor> gen;    // per level, 1 x V_l
  std::vector<Tensor> value;  // per level, 1 x V_l
};

class Model {
 public:
  explicit Model(ModelConfig cfg);
  Model(const Model& other);
  Model& operator=(const Model& other);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  std::vector<RouterState>& routers() { return routers_; }
  const std::vector<RouterState>& routers() const { return routers_; }
  size_t parameter_count() const { return store_.scalar_count(); }

  /// Copies parameter values and router state (shapes must agree).
  void copy_from(const Model& other);

  /// One hidden state per context position.
  Tensor encode(const RequestContext& ctx) const;

  /// Scores for level prefix.size() given the already-decoded prefix.
  DualHeadOutput decode_step(std::span<const int> prefix, const Tensor& h) const;

  /// Teacher-forced pass over a full path: outputs for every level at once.
  LevelOutputs decode_teacher(std::span<const int> path, const Tensor& h, LoadCounts* loads = nullptr) const;

  /// Shared expert plus the top-K routed experts per row, weighted by raw softmax gates.
  Tensor moe_forward(const Tensor& x, const MoELayer& layer, const RouterState& router,
                     LoadCounts* loads = nullptr, int router_index = 0) const;

  Tensor block_forward(const Tensor& z, const Tensor& h, const DecoderBlock& block, LoadCounts* loads = nullptr) const;

  /// Input block once, the shared middle stack `rounds` times, output block once.
  Tensor mor_forward(const Tensor& z, const Tensor& h, int rounds, LoadCounts* loads = nullptr) const;

  const DecoderBlock& input_block() const { return in_block_; }
  const std::vector<DecoderBlock>& middle_blocks() const { return mid_blocks_; }
  const DecoderBlock& output_block() const { return out_block_; }

  LoadCounts empty_load_counts() const;
  void accumulate_loads(const LoadCounts& loads);

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  void build();
  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const Attention& a, bool causal) const;
  Tensor feed_forward(const Tensor& x, const FeedForward& f) const;
  Tensor decoder_inputs(std::span<const int> tokens) const;
  Tensor trunk(std::span<const int> tokens, const Tensor& h, LoadCounts* loads) const;

  ModelConfig cfg_;
  ParameterStore store_;
  std::vector<RouterState> routers_;

  Tensor emb_user_, emb_organic_, emb_env_, emb_item_, emb_group_, emb_pos_;
  std::vector<EncoderLayer> encoder_;
  Tensor sid_bos_, emb_level_pos_;
  std::vector<Tensor> emb_sid_;
  DecoderBlock in_block_;
  std::vector<DecoderBlock> mid_blocks_;
  DecoderBlock out_block_;
  std::vector<Tensor> gen_w_, gen_b_, value_w_, value_b_;
};

/// Nudges selection biases against load imbalance by a fixed step, then decays the load counts.
void update_load_balance(RouterState& router, double bias_step, double decay);

/// max(load) / mean(load) over all routers; 1 means perfectly balanced.
double load_imbalance(const std::vector<RouterState>& routers);

bool is_value_head_parameter(const std::string& name);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace univa
