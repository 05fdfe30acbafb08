#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "support.h"
#include "univa/model.h"

using namespace univa;
using namespace univa::testing;

namespace {

void fill(Model& m, const std::string& name, double v) {
  Tensor t = m.params().get(name);
  std::fill(t.mutable_value().begin(), t.mutable_value().end(), v);
}

Tensor random_rows(int rows, int cols, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0, 1);
  Vec v(static_cast<size_t>(rows * cols));
  for (double& x : v) x = g(rng);
  return Tensor::constant(rows, cols, v);
}

}  // namespace

TEST(Fusion, ZeroValueHeadGivesGenSoftmax) {
  const auto out = fuse_heads({1.0, 2.0, 0.5}, {0, 0, 0});
  const Vec p = stable_softmax(Vec{1.0, 2.0, 0.5});
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out.policy[i], p[i]);
}

TEST(Fusion, HandComputedPolicy) {
  const auto out = fuse_heads({1.0, 0.0, -1.0}, {0.5, 0.5, 2.0});
  const double z = std::exp(1.5) + std::exp(0.5) + std::exp(1.0);
  EXPECT_NEAR(out.policy[0], std::exp(1.5) / z, 1e-15);
  EXPECT_NEAR(out.policy[1], std::exp(0.5) / z, 1e-15);
  EXPECT_NEAR(out.policy[2], std::exp(1.0) / z, 1e-15);
  EXPECT_EQ(out.fused, (Vec{1.5, 0.5, 1.0}));
}

TEST(Fusion, ShiftAndScaleInvariance) {
  const Vec g{0.3, -1.2, 2.2, 0.0}, v{1.0, 0.4, -0.5, 0.2};
  const auto base = fuse_heads(g, v);
  Vec gs = g;
  for (double& x : gs) x += 7.0;
  const auto shifted = fuse_heads(gs, v);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(shifted.policy[i], base.policy[i], 1e-12);
  Vec g3 = g, v3 = v;
  for (double& x : g3) x *= 3;
  for (double& x : v3) x *= 3;
  const auto scaled = fuse_heads(g3, v3);
  EXPECT_EQ(std::max_element(scaled.policy.begin(), scaled.policy.end()) - scaled.policy.begin(),
            std::max_element(base.policy.begin(), base.policy.end()) - base.policy.begin());
  EXPECT_THROW(fuse_heads({1, 2}, {1}), Error);
}

TEST(Encoder, ShapeDeterminismAndErrors) {
  const Model a(tiny_config({3, 3}, 4)), b(tiny_config({3, 3}, 4));
  RequestContext ctx;
  ctx.user_tokens = {1};
  ctx.item_tokens = {2};
  const Tensor h = a.encode(ctx);
  EXPECT_EQ(h.rows(), 2);
  EXPECT_EQ(h.cols(), 8);
  EXPECT_EQ(h.value(), b.encode(ctx).value());
  EXPECT_THROW(a.encode(RequestContext{}), Error);
  RequestContext bad = ctx;
  bad.user_tokens = {99};
  EXPECT_THROW(a.encode(bad), Error);
}

TEST(Encoder, PermutingIdenticalUserEmbeddingsLeavesStateUnchanged) {
  Model m(tiny_config({3, 3}, 5));
  // Tokens 1 and 2 share an embedding row, so swapping them is invisible.
  Tensor t = m.params().get("encoder.emb_user");
  for (int c = 0; c < 8; ++c) t.mutable_value()[2 * 8 + c] = t.value()[1 * 8 + c];
  RequestContext a = tiny_context(1), b = a;
  a.user_tokens = {1, 2};
  b.user_tokens = {2, 1};
  EXPECT_EQ(m.encode(a).value(), m.encode(b).value());
}

TEST(Decoder, PolicySumsToOneAtEveryLevel) {
  const Model m(tiny_config({3, 4, 5}, 6));
  const Tensor h = m.encode(tiny_context(2));
  for (const auto& prefix : {SidPath{}, SidPath{2}, SidPath{1, 3}}) {
    const auto out = m.decode_step(prefix, h);
    double s = 0;
    for (double p : out.policy) s += p;
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(out.policy.size(), static_cast<size_t>(m.config().level_vocab_sizes[prefix.size()]));
  }
  EXPECT_THROW(m.decode_step(SidPath{0, 0, 0}, h), Error);
  EXPECT_THROW(m.decode_step(SidPath{3}, h), Error);
}

TEST(Decoder, CausalInPrefix) {
  const Model m(tiny_config({4, 4, 4}, 7));
  const Tensor h = m.encode(tiny_context(3));
  const auto a = m.decode_teacher(SidPath{1, 2, 3}, h);
  const auto b = m.decode_teacher(SidPath{1, 0, 3}, h);
  // Changing level 2 cannot affect levels 1 and 2.
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(a.gen[l].value(), b.gen[l].value());
    EXPECT_EQ(a.value[l].value(), b.value[l].value());
  }
  EXPECT_NE(a.gen[2].value(), b.gen[2].value());
}

TEST(Decoder, TeacherForcingMatchesStepwise) {
  const Model m(tiny_config({3, 4, 2}, 8));
  const Tensor h = m.encode(tiny_context(4));
  const SidPath path{2, 1, 0};
  const auto t = m.decode_teacher(path, h);
  for (size_t l = 0; l < 3; ++l) {
    const auto s = m.decode_step(std::span<const int>(path.data(), l), h);
    for (size_t i = 0; i < s.gen_scores.size(); ++i) {
      EXPECT_NEAR(s.gen_scores[i], t.gen[l].value()[i], 1e-12);
      EXPECT_NEAR(s.value_scores[i], t.value[l].value()[i], 1e-12);
    }
  }
}

TEST(MoE, DenseLimitEqualsSharedPlusAllGatedExperts) {
  ModelConfig cfg = tiny_config({3, 3}, 9);
  cfg.moe.num_experts = 3;
  cfg.moe.top_k = 3;
  Model m(cfg);
  const MoELayer& layer = m.input_block().moe;
  const Tensor x = random_rows(2, 8, 1);
  const Tensor y = m.moe_forward(x, layer, m.routers()[0]);

  const Tensor gates = ag::softmax_rows(ag::matmul(x, layer.router));
  auto ffn = [](const Tensor& in, const FeedForward& f) {
    return ag::add_row(ag::matmul(ag::silu(ag::add_row(ag::matmul(in, f.w1), f.b1)), f.w2), f.b2);
  };
  Tensor want = ffn(x, layer.shared);
  for (int e = 0; e < 3; ++e) {
    const Tensor out = ffn(x, layer.experts[e]);
    Vec scaled = out.value();
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 8; ++c) scaled[r * 8 + c] *= gates.at(r, e);
    want = ag::add(want, Tensor::constant(2, 8, scaled));
  }
  for (size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.value()[i], want.value()[i], 1e-12);
}

TEST(MoE, NegativeBiasExcludesExpert) {
  ModelConfig cfg = tiny_config({3, 3}, 10);
  cfg.moe.num_experts = 4;
  cfg.moe.top_k = 2;
  Model m(cfg);
  RouterState router{Vec(4, 0.0), Vec{0.0, -1e9, 0.0, 0.0}};
  LoadCounts loads(1, Vec(4, 0.0));
  m.moe_forward(random_rows(20, 8, 2), m.input_block().moe, router, &loads, 0);
  EXPECT_EQ(loads[0][1], 0.0);
  EXPECT_EQ(loads[0][0] + loads[0][2] + loads[0][3], 40.0);
}

TEST(MoE, HandTopKSelectionAndRawGates) {
  ModelConfig cfg = tiny_config({3, 3}, 11);
  cfg.moe.num_experts = 4;
  cfg.moe.top_k = 2;
  Model m(cfg);
  // x = e_0, so the router logits are row 0 of the router matrix.
  Tensor router = m.params().get("decoder.in.moe.router");
  std::fill(router.mutable_value().begin(), router.mutable_value().end(), 0.0);
  const Vec logits{0.2, 1.5, -0.3, 0.9};
  for (int e = 0; e < 4; ++e) router.mutable_value()[e] = logits[e];
  Vec xv(8, 0.0);
  xv[0] = 1.0;
  const Tensor x = Tensor::constant(1, 8, xv);
  const MoELayer& layer = m.input_block().moe;
  RouterState state{Vec(4, 0.0), Vec(4, 0.0)};
  LoadCounts loads(1, Vec(4, 0.0));
  const Tensor y = m.moe_forward(x, layer, state, &loads, 0);
  EXPECT_EQ(loads[0], (Vec{0, 1, 0, 1}));

  const Vec g = stable_softmax(logits);
  auto ffn = [](const Tensor& in, const FeedForward& f) {
    return ag::add_row(ag::matmul(ag::silu(ag::add_row(ag::matmul(in, f.w1), f.b1)), f.w2), f.b2);
  };
  const Tensor s = ffn(x, layer.shared), e1 = ffn(x, layer.experts[1]), e3 = ffn(x, layer.experts[3]);
  for (int c = 0; c < 8; ++c)
    EXPECT_NEAR(y.value()[c], s.value()[c] + g[1] * e1.value()[c] + g[3] * e3.value()[c], 1e-12);
}

TEST(LoadBalance, SignRuleHandCase) {
  RouterState r{Vec{10, 0, 5, 5}, Vec(4, 0.0)};
  update_load_balance(r, 0.1, 1.0);
  EXPECT_EQ(r.bias, (Vec{-0.1, 0.1, 0.0, 0.0}));
  RouterState even{Vec{3, 3, 3}, Vec{0.2, -0.1, 0.0}};
  update_load_balance(even, 0.1, 0.9);
  EXPECT_EQ(even.bias, (Vec{0.2, -0.1, 0.0}));
}

TEST(LoadBalance, OverloadedExpertBiasFallsMonotonically) {
  RouterState r{Vec(3, 0.0), Vec(3, 0.0)};
  double prev = 0.0;
  for (int step = 0; step < 20; ++step) {
    r.load[0] += 10.0;
    update_load_balance(r, 0.01, 0.9);
    EXPECT_LT(r.bias[0], prev);
    prev = r.bias[0];
  }
  EXPECT_DOUBLE_EQ(load_imbalance({RouterState{Vec{2, 2}, Vec(2, 0.0)}}), 1.0);
}

TEST(Mor, ParameterCountIndependentOfRounds) {
  ModelConfig a = tiny_config({3, 3}), b = a;
  a.mor_rounds = 1;
  b.mor_rounds = 4;
  EXPECT_EQ(Model(a).parameter_count(), Model(b).parameter_count());
}

TEST(Mor, RoundsEqualManualComposition) {
  Model m(tiny_config({3, 3}, 12));
  const Tensor h = m.encode(tiny_context(5));
  const Tensor z = random_rows(2, 8, 3);
  ASSERT_EQ(m.middle_blocks().size(), 1u);
  const auto& mid = m.middle_blocks()[0];
  Tensor manual = m.block_forward(z, h, m.input_block());
  for (int r = 0; r < 3; ++r) manual = m.block_forward(manual, h, mid);
  manual = m.block_forward(manual, h, m.output_block());
  EXPECT_EQ(m.mor_forward(z, h, 3).value(), manual.value());

  Tensor one = m.block_forward(m.block_forward(m.block_forward(z, h, m.input_block()), h, mid), h, m.output_block());
  EXPECT_EQ(m.mor_forward(z, h, 1).value(), one.value());
  EXPECT_THROW(m.mor_forward(z, h, 0), Error);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  Model m(tiny_config({3, 4}, 13));
  m.routers()[0].bias = {0.05, -0.05};
  const auto path = (std::filesystem::temp_directory_path() / "univa_test_model.ckpt").string();
  m.save(path);
  const Model back = Model::load(path);
  std::remove(path.c_str());
  EXPECT_EQ(back.parameter_count(), m.parameter_count());
  EXPECT_EQ(back.routers()[0].bias, m.routers()[0].bias);
  const RequestContext ctx = tiny_context(6);
  EXPECT_EQ(back.decode_step(SidPath{1}, back.encode(ctx)).fused, m.decode_step(SidPath{1}, m.encode(ctx)).fused);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = (std::filesystem::temp_directory_path() / "univa_test_garbage.ckpt").string();
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("not a checkpoint", f);
    std::fclose(f);
  }
  EXPECT_THROW(Model::load(path), Error);
  std::remove(path.c_str());
}

TEST(Gradients, SlLossEveryParameterGroup) {
  Model m(tiny_config({4, 5}, 14));
  const RequestContext c = tiny_context(9);
  auto loss = [&] {
    const Tensor h = m.encode(c);
    const auto out = m.decode_teacher(SidPath{3, 2}, h);
    std::vector<Tensor> terms;
    for (int l = 0; l < 2; ++l) terms.push_back(ag::pick(ag::log_softmax_rows(out.gen[l]), 0, l == 0 ? 3 : 2));
    return ag::scale(ag::sum_scalars(terms), -1.0);
  };
  const auto check = finite_difference_check(m, loss, [](const std::string& n) { return !is_value_head_parameter(n); });
  EXPECT_LT(check.worst, 1e-3) << check.worst_param;
}
