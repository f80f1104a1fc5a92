#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "uoe/model.hpp"
#include "uoe/rng.hpp"

using uoe::DenseModel;
using uoe::ModelOutput;
using uoe::Rng;
using uoe::RoutingMode;
using uoe::Tensor;
using uoe::UoeModel;
using uoe::UoeModelConfig;

namespace {

UoeModelConfig small_config() {
  UoeModelConfig cfg;
  cfg.layers = 1;
  cfg.d = 8;
  cfg.n_a = 2;
  cfg.d_h = 4;
  cfg.n_m = 2;
  cfg.d_e = 8;
  cfg.l_p = 2;
  cfg.k_attn = 1;
  cfg.k_mlp = 1;
  cfg.vocab_size = 16;
  cfg.max_len = 8;
  cfg.seed = 5;
  return cfg;
}

std::vector<std::size_t> random_tokens(std::size_t count, std::size_t vocab,
                                       Rng& rng) {
  std::vector<std::size_t> t(count);
  for (auto& v : t) v = rng.next_index(vocab);
  return t;
}

}  // namespace

TEST(ModelConfig, RejectsInconsistentShapes) {
  auto cfg = small_config();
  cfg.max_len = 7;  // not divisible by l_p
  EXPECT_THROW(cfg.validate(), uoe::ConfigError);
  cfg = small_config();
  cfg.k_attn = 3;
  EXPECT_THROW(cfg.validate(), uoe::ConfigError);
  cfg = small_config();
  cfg.rope_rotated = 3;  // odd rotated width
  EXPECT_THROW(cfg.validate(), uoe::ConfigError);
  EXPECT_NO_THROW(small_config().validate());
}

TEST(ModelInit, SharedParametersMatchDenseTwinBitwise) {
  auto cfg = small_config();
  cfg.layers = 2;
  auto uoe_m = UoeModel<double>::init(cfg);
  auto dense_m = DenseModel<double>::init(cfg);
  EXPECT_EQ(uoe_m.embedding.data(), dense_m.embedding.data());
  EXPECT_EQ(uoe_m.head.data(), dense_m.head.data());
  for (std::size_t bl = 0; bl < cfg.layers; ++bl) {
    auto merged = uoe::reconstruct_attention(uoe_m.blocks[bl].attn.experts);
    EXPECT_EQ(merged.wq.data(), dense_m.blocks[bl].wq.data());
    EXPECT_EQ(merged.wk.data(), dense_m.blocks[bl].wk.data());
    EXPECT_EQ(merged.wv.data(), dense_m.blocks[bl].wv.data());
    EXPECT_EQ(merged.wo.data(), dense_m.blocks[bl].wo.data());
    auto mlp = uoe::reconstruct_mlp(uoe_m.blocks[bl].mlp.experts);
    EXPECT_EQ(mlp.first.data(), dense_m.blocks[bl].a1.data());
    EXPECT_EQ(mlp.second.data(), dense_m.blocks[bl].a2.data());
  }
}

TEST(ModelForward, FullActivationMatchesDenseTwin) {
  for (std::size_t layers : {1u, 2u, 4u}) {
    auto cfg = small_config();
    cfg.layers = layers;
    cfg.attn_mode = RoutingMode::kFull;
    cfg.mlp_mode = RoutingMode::kFull;
    auto uoe_m = UoeModel<double>::init(cfg);
    auto dense_m = DenseModel<double>::init(cfg);
    Rng rng(layers);
    auto tokens = random_tokens(2 * cfg.max_len, cfg.vocab_size, rng);
    auto a = uoe_m.forward(tokens, 2);
    auto b = dense_m.forward(tokens, 2);
    ASSERT_EQ(a.logits.shape(), b.logits.shape());
    EXPECT_LT(uoe::max_abs_diff(a.logits, b.logits), 1e-10)
        << "layers=" << layers;
  }
}

TEST(ModelForward, FullActivationMatchesDenseTwinSinglePrecision) {
  auto cfg = small_config();
  cfg.attn_mode = RoutingMode::kFull;
  cfg.mlp_mode = RoutingMode::kFull;
  auto uoe_m = UoeModel<float>::init(cfg);
  auto dense_m = DenseModel<float>::init(cfg);
  Rng rng(3);
  auto tokens = random_tokens(2 * cfg.max_len, cfg.vocab_size, rng);
  auto a = uoe_m.forward(tokens, 2);
  auto b = dense_m.forward(tokens, 2);
  const double rel = uoe::max_abs_diff(a.logits, b.logits) /
                     std::max(1e-30, double(uoe::max_abs(b.logits)));
  EXPECT_LT(rel, 1e-5);
}

TEST(ModelForward, ZeroProjectionsPassInputThrough) {
  auto cfg = small_config();
  cfg.use_layer_norm = false;
  auto m = UoeModel<double>::init(cfg);
  auto& blk = m.blocks[0];
  blk.attn.experts.w_o =
      Tensor<double>::zeros(blk.attn.experts.w_o.shape());
  blk.mlp.experts.a_out = Tensor<double>::zeros(blk.mlp.experts.a_out.shape());
  Rng rng(4);
  auto tokens = random_tokens(cfg.max_len, cfg.vocab_size, rng);
  auto out = m.forward(tokens, 1);
  auto expect =
      uoe::matmul(uoe::index_select(m.embedding, 0, tokens), m.head);
  EXPECT_EQ(out.logits.data(), expect.data());
}

TEST(ModelForward, DeterministicAcrossCalls) {
  auto cfg = small_config();
  auto m1 = UoeModel<double>::init(cfg);
  auto m2 = UoeModel<double>::init(cfg);
  Rng rng(6);
  auto tokens = random_tokens(2 * cfg.max_len, cfg.vocab_size, rng);
  auto a = m1.forward(tokens, 2);
  auto b = m2.forward(tokens, 2);
  EXPECT_EQ(a.logits.data(), b.logits.data());
  EXPECT_EQ(a.balance.data(), b.balance.data());
}

TEST(ModelForward, AllRoutingModesRunAndTrace) {
  for (auto attn : {RoutingMode::kFull, RoutingMode::kData,
                    RoutingMode::kExpert})
    for (auto mlp : {RoutingMode::kData, RoutingMode::kExpert}) {
      auto cfg = small_config();
      cfg.attn_mode = attn;
      cfg.mlp_mode = mlp;
      auto m = UoeModel<double>::init(cfg);
      Rng rng(7);
      auto tokens = random_tokens(3 * cfg.max_len, cfg.vocab_size, rng);
      auto out = m.forward(tokens, 3);
      ASSERT_EQ(out.traces.size(), cfg.layers);
      const auto& tr = out.traces[0];
      EXPECT_EQ(tr.attn.expert_mode, attn == RoutingMode::kExpert);
      EXPECT_EQ(tr.mlp.expert_mode, mlp == RoutingMode::kExpert);
      if (attn != RoutingMode::kExpert) {
        ASSERT_EQ(tr.attn.samples.size(), 3u);
        // Routed patch slots per sample: active experts times capacity.
        for (const auto& plan : tr.attn.samples) {
          std::size_t total = 0;
          for (const auto& sel : plan.id) total += sel.size();
          EXPECT_EQ(total, plan.active_count() * plan.c);
        }
      } else {
        EXPECT_EQ(tr.attn.batch.total(), 3 * cfg.k_attn);
      }
      EXPECT_TRUE(std::isfinite(out.balance.item()));
    }
}

// ---------------------------------------------------------------------------
// Load-balance loss closed forms.

TEST(LoadBalance, UniformGatingGivesExactlyAlpha) {
  const double alpha = 0.01;
  for (std::size_t n : {2u, 4u, 8u})
    for (std::size_t m : {8u, 64u})
      for (std::size_t k = 1; k <= std::min<std::size_t>(n, 2); ++k) {
        auto gates = Tensor<double>::full({n, m}, 1.0 / double(n));
        auto plan = uoe::plan_data_selection(gates, k);
        auto loss = uoe::load_balance_loss_data(gates, plan, alpha);
        ASSERT_NEAR(loss.item(), alpha, 1e-12) << "n=" << n << " m=" << m;
      }
  for (std::size_t n : {2u, 4u, 8u}) {
    const std::size_t b = 6;
    auto gates = Tensor<double>::full({b, n}, 1.0 / double(n));
    auto plan = uoe::plan_expert_selection(gates, 1);
    auto loss = uoe::load_balance_loss_expert(gates, plan, alpha);
    ASSERT_NEAR(loss.item(), alpha, 1e-12);
  }
}

TEST(LoadBalance, MaximalImbalanceGivesTwoAlpha) {
  const double alpha = 0.01;
  const std::size_t m = 16;
  std::vector<double> g(2 * m, 0.0);
  for (std::size_t j = 0; j < m; ++j) g[j] = 1.0;  // expert 0 takes all mass
  auto gates = Tensor<double>::from_data({2, m}, g);
  auto plan = uoe::plan_data_selection(gates, 1);
  auto loss = uoe::load_balance_loss_data(gates, plan, alpha);
  EXPECT_NEAR(loss.item(), 2.0 * alpha, 1e-12);
}

TEST(LoadBalance, ZeroAlphaGivesZeroAndGradMatchesClosedForm) {
  Rng rng(8);
  auto raw = Tensor<double>::uniform({3, 4}, rng, 0.0, 1.0);
  auto plan = uoe::plan_data_selection(raw, 1);
  EXPECT_EQ(uoe::load_balance_loss_data(raw, plan, 0.0).item(), 0.0);

  const double alpha = 0.5;
  auto gates = Tensor<double>::uniform({3, 4}, rng, 0.0, 1.0);
  gates.set_requires_grad(true);
  auto loss = uoe::load_balance_loss_data(gates, plan, alpha);
  uoe::backward(loss);
  auto counts = uoe::stage_one_counts(plan);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double f = 3.0 * double(counts[i]) / (1.0 * 4.0);
      ASSERT_NEAR(gates.grad()[i * 4 + j], alpha * f / 4.0, 1e-14);
    }
}

TEST(LoadBalance, FullCoverageIsConstantWithZeroGradient) {
  // k = n: every patch selects every expert, so f_i == 1 and the loss reduces
  // to alpha * sum_i P_i == alpha by column normalization of the gate.
  Rng rng(9);
  auto logits = Tensor<double>::uniform({3, 4}, rng, -1, 1);
  logits.set_requires_grad(true);
  auto gates = uoe::softmax(logits, 0);
  auto plan = uoe::plan_data_selection(gates, 3);
  auto loss = uoe::load_balance_loss_data(gates, plan, 0.01);
  EXPECT_NEAR(loss.item(), 0.01, 1e-12);
  uoe::backward(loss);
  for (double g : logits.grad()) ASSERT_NEAR(g, 0.0, 1e-15);
}

TEST(LoadBalance, GateWeightsLearnFromBalanceAlone) {
  // With output scaling off, the balance term is the only gradient path into
  // the patch gate weights; it must be non-zero when routing is selective.
  auto cfg = small_config();
  cfg.alpha = 0.1;
  auto m = UoeModel<double>::init(cfg);
  for (auto& [name, t] : m.parameters()) t.set_requires_grad(true);
  Rng rng(10);
  auto tokens = random_tokens(cfg.max_len, cfg.vocab_size, rng);
  auto out = m.forward(tokens, 1);
  uoe::backward(out.balance);
  double mag = 0;
  for (double g : m.blocks[0].attn.gate.data_a.grad()) mag += std::abs(g);
  EXPECT_GT(mag, 0.0);
}

// ---------------------------------------------------------------------------
// Cross entropy and perplexity.

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  auto logits = Tensor<double>::zeros({4, 256});
  auto [nll, ppl] =
      uoe::cross_entropy_and_perplexity(logits, {0, 17, 255, 80});
  EXPECT_NEAR(ppl, 256.0, 1e-9);
  EXPECT_NEAR(nll.item(), std::log(256.0), 1e-12);
}

TEST(Perplexity, ConfidentCorrectPredictionApproachesOne) {
  std::vector<double> raw(2 * 8, 0.0);
  raw[0 * 8 + 3] = 50.0;
  raw[1 * 8 + 5] = 50.0;
  auto [nll, ppl] = uoe::cross_entropy_and_perplexity(
      Tensor<double>::from_data({2, 8}, raw), {3, 5});
  EXPECT_LT(ppl, 1.0 + 1e-9);
}

TEST(Perplexity, MatchesHandComputedLogProbs) {
  std::vector<double> raw = {0.3, -0.2, 0.9,  //
                             1.2, 0.4, -0.7,  //
                             -0.1, 0.0, 0.2,  //
                             0.5, 0.5, 0.5};
  std::vector<std::size_t> targets = {2, 0, 1, 2};
  double total = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(raw[r * 3 + j]);
    total += -(raw[r * 3 + targets[r]] - std::log(z));
  }
  auto [nll, ppl] = uoe::cross_entropy_and_perplexity(
      Tensor<double>::from_data({4, 3}, raw), targets);
  EXPECT_NEAR(nll.item(), total / 4.0, 1e-12);
  EXPECT_NEAR(ppl, std::exp(total / 4.0), 1e-12);
}

// ---------------------------------------------------------------------------
// End-to-end gradients: sampled finite differences over every parameter.

namespace {

void fd_check_model(const UoeModelConfig& cfg, std::uint64_t data_seed,
                    std::size_t entries_per_param) {
  auto m = UoeModel<double>::init(cfg);
  auto params = m.parameters();
  for (auto& [name, t] : params) t.set_requires_grad(true);
  Rng rng(data_seed);
  const std::size_t b = 2;
  auto tokens = random_tokens(b * cfg.max_len, cfg.vocab_size, rng);
  std::vector<std::size_t> targets(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    targets[i] = rng.next_index(cfg.vocab_size);

  auto loss_of = [&]() {
    auto out = m.forward(tokens, b);
    return uoe::add(uoe::cross_entropy_mean(out.logits, targets), out.balance);
  };
  auto loss = loss_of();
  uoe::backward(loss);

  const double h = 1e-4;
  for (auto& [name, t] : params) {
    Rng pick(data_seed ^ uoe::detail::fnv1a(name));
    for (std::size_t e = 0; e < entries_per_param; ++e) {
      const std::size_t at = pick.next_index(t.numel());
      const double keep = t.data()[at];
      t.mutable_data()[at] = keep + h;
      const double up = loss_of().item();
      t.mutable_data()[at] = keep - h;
      const double down = loss_of().item();
      t.mutable_data()[at] = keep;
      const double fd = (up - down) / (2 * h);
      const double got = t.grad()[at];
      const double scale = std::max({1.0, std::abs(fd), std::abs(got)});
      ASSERT_NEAR(got, fd, 1e-4 * scale)
          << name << "[" << at << "] mode=" << uoe::to_string(cfg.attn_mode)
          << "/" << uoe::to_string(cfg.mlp_mode);
    }
  }
}

}  // namespace

TEST(ModelGradients, MatchFiniteDifferencesInAllModes) {
  const std::pair<RoutingMode, RoutingMode> modes[] = {
      {RoutingMode::kFull, RoutingMode::kFull},
      {RoutingMode::kData, RoutingMode::kData},
      {RoutingMode::kExpert, RoutingMode::kExpert},
      {RoutingMode::kData, RoutingMode::kExpert},
  };
  for (const auto& [attn, mlp] : modes) {
    auto cfg = small_config();
    cfg.max_len = 16;
    cfg.layers = 2;
    cfg.attn_mode = attn;
    cfg.mlp_mode = mlp;
    cfg.gate_scale_outputs = true;  // exercise the gate-gradient path too
    fd_check_model(cfg, 11, 3);
  }
}
