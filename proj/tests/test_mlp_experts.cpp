#include <gtest/gtest.h>

#include <vector>

#include "uoe/mlp_experts.hpp"
#include "uoe/rng.hpp"
#include "test_util.hpp"

using uoe::GateParams;
using uoe::MlpExpertGroup;
using uoe::Rng;
using uoe::SecondActivation;
using uoe::Tensor;
using uoe::UomeParams;

namespace {

struct DenseMlp {
  Tensor<double> a1, a2, b1, b2;
};

DenseMlp make_dense(std::size_t d, std::size_t d_ff, Rng& rng) {
  DenseMlp m;
  m.a1 = Tensor<double>::uniform({d, d_ff}, rng, -0.5, 0.5);
  m.a2 = Tensor<double>::uniform({d_ff, d}, rng, -0.5, 0.5);
  m.b1 = Tensor<double>::uniform({d_ff}, rng, -0.5, 0.5);
  m.b2 = Tensor<double>::uniform({d}, rng, -0.5, 0.5);
  return m;
}

UomeParams<double> make_params(const MlpExpertGroup<double>& g, std::size_t l,
                               Rng& rng, bool gate_scale = false) {
  UomeParams<double> p;
  p.experts = g;
  const std::size_t d = g.d();
  p.gate.data_b = Tensor<double>::uniform({d, d}, rng, -0.5, 0.5);
  p.gate.data_a = Tensor<double>::uniform({d, g.n}, rng, -0.5, 0.5);
  p.gate.expert_w = Tensor<double>::uniform({l * d, g.n}, rng, -0.5, 0.5);
  p.l_p = 2;
  p.gate_scale_outputs = gate_scale;
  return p;
}

}  // namespace

TEST(UomeFull, MatchesDenseMlpForAllExpertCounts) {
  Rng rng(20);
  const std::size_t d = 8, d_ff = 16, l = 6;
  auto dense = make_dense(d, d_ff, rng);
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    auto g = uoe::partition_mlp(dense.a1, dense.a2, n);
    auto u = uoe::uome_forward_full(x, g);
    auto expect = uoe::dense_mlp_forward(x, dense.a1, dense.a2);
    for (std::size_t i = 0; i < x.numel(); ++i)
      ASSERT_NEAR(u.data()[i] - x.data()[i], expect.data()[i], 1e-12)
          << "n=" << n;
  }
}

TEST(UomeFull, MatchesDenseMlpWithBiasAndSecondActivation) {
  Rng rng(21);
  const std::size_t d = 6, d_ff = 12, l = 4;
  auto dense = make_dense(d, d_ff, rng);
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  for (auto act : {SecondActivation::kIdentity, SecondActivation::kSilu}) {
    auto g = uoe::partition_mlp(dense.a1, dense.a2, dense.b1, dense.b2, 3);
    auto u = uoe::uome_forward_full(x, g, act);
    auto expect =
        uoe::dense_mlp_forward(x, dense.a1, dense.a2, act, &dense.b1, &dense.b2);
    for (std::size_t i = 0; i < x.numel(); ++i)
      ASSERT_NEAR(u.data()[i] - x.data()[i], expect.data()[i], 1e-12);
  }
}

TEST(UomeFull, ZeroSecondLayerIsPureResidual) {
  Rng rng(22);
  const std::size_t d = 6, d_ff = 12, l = 4;
  auto dense = make_dense(d, d_ff, rng);
  auto g = uoe::partition_mlp(dense.a1, dense.a2, 2);
  g.a_out = Tensor<double>::zeros({2, d_ff / 2, d});
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  auto u = uoe::uome_forward_full(x, g);
  EXPECT_EQ(u.data(), x.data());
}

TEST(UomeData, TopKEqualToExpertCountIsBitwiseFull) {
  Rng rng(23);
  const std::size_t d = 6, d_ff = 12, l = 8, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  auto res = uoe::uome_forward(x, p, n);
  ASSERT_EQ(res.plan.c, res.plan.m);
  auto full = uoe::uome_forward_full(x, p.experts);
  EXPECT_EQ(res.u.data(), full.data());
}

TEST(UomeData, FullCapacityFromTiedGatesIsBitwiseFull) {
  // Zero gate weights tie every expert; top-1 always picks expert 0, pushing
  // capacity to m, and stage two then hands all patches to every expert.
  Rng rng(24);
  const std::size_t d = 6, d_ff = 12, l = 8, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  p.gate.data_b = Tensor<double>::zeros({d, d});
  p.gate.data_a = Tensor<double>::zeros({d, n});
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  auto res = uoe::uome_forward(x, p, 1);
  ASSERT_EQ(res.plan.c, res.plan.m);
  for (std::size_t j = 0; j < res.plan.m; ++j)
    ASSERT_EQ(res.plan.id_prime[j], (std::vector<std::size_t>{0}));
  auto full = uoe::uome_forward_full(x, p.experts);
  EXPECT_EQ(res.u.data(), full.data());
}

TEST(UomeData, UnselectedPatchIgnoresExpertWeights) {
  Rng rng(25);
  const std::size_t d = 6, d_ff = 12, l = 12, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  auto res = uoe::uome_forward(x, p, 1);
  ASSERT_LT(res.plan.c, res.plan.m) << "seed produced full capacity";
  // Find an (expert, patch) pair the plan left out.
  std::size_t ex = n, patch = 0;
  for (std::size_t i = 0; i < n && ex == n; ++i)
    for (std::size_t j = 0; j < res.plan.m; ++j) {
      const auto& sel = res.plan.id[i];
      if (std::find(sel.begin(), sel.end(), j) == sel.end()) {
        ex = i;
        patch = j;
        break;
      }
    }
  ASSERT_LT(ex, n);
  auto p2 = p;
  std::vector<double> bumped = p.experts.a_in.data();
  for (std::size_t i = 0; i < d * (d_ff / n); ++i)
    bumped[ex * d * (d_ff / n) + i] += 3.25;
  p2.experts.a_in = Tensor<double>::from_data({n, d, d_ff / n}, bumped);
  auto res2 = uoe::uome_forward(x, p2, 1);
  ASSERT_EQ(res2.plan.id, res.plan.id);
  bool selected_changed = false;
  for (std::size_t t = 0; t < p.l_p; ++t)
    for (std::size_t f = 0; f < d; ++f) {
      const std::size_t at = (patch * p.l_p + t) * d + f;
      ASSERT_EQ(res.u.data()[at], res2.u.data()[at]);
    }
  for (std::size_t i = 0; i < res.u.numel(); ++i)
    selected_changed |= res.u.data()[i] != res2.u.data()[i];
  EXPECT_TRUE(selected_changed);
}

TEST(UomeData, OneGatherOneScatter) {
  Rng rng(26);
  const std::size_t d = 6, d_ff = 12, l = 8, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({l, d}, rng, -1, 1);
  uoe::op_counters().reset();
  uoe::uome_forward(x, p, 2);
  EXPECT_EQ(uoe::op_counters().gather_passes, 1u);
  EXPECT_EQ(uoe::op_counters().scatter_passes, 1u);
}

TEST(UomeData, GradientsMatchFiniteDifferencesWithGateScaling) {
  const std::size_t d = 4, de = 3, n = 2, l = 4, hg = 3;
  for (std::uint64_t seed : {2u, 7u, 13u}) {
    testutil::check_gradients(
        {{l, d}, {n, d, de}, {n, de, d}, {d, hg}, {hg, n}},
        [&](const std::vector<Tensor<double>>& in) {
          UomeParams<double> p;
          p.experts.n = n;
          p.experts.a_in = in[1];
          p.experts.a_out = in[2];
          p.gate.data_b = in[3];
          p.gate.data_a = in[4];
          p.l_p = 2;
          p.gate_scale_outputs = true;
          return uoe::uome_forward(in[0], p, 1).u;
        },
        seed);
  }
}

// ---------------------------------------------------------------------------
// Expert-selection (batch) mode.

TEST(UomeBatch, FullFanOutMatchesDensePerSample) {
  Rng rng(27);
  const std::size_t d = 6, d_ff = 12, l = 5, b = 3, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({b, l, d}, rng, -1, 1);
  auto res = uoe::uome_forward_batch(x, p, n);
  for (std::size_t s = 0; s < b; ++s) {
    auto xs = Tensor<double>::from_data(
        {l, d}, std::vector<double>(x.data().begin() + s * l * d,
                                    x.data().begin() + (s + 1) * l * d));
    auto expect = uoe::dense_mlp_forward(xs, dense.a1, dense.a2);
    for (std::size_t i = 0; i < l * d; ++i)
      ASSERT_NEAR(res.u.data()[s * l * d + i] - xs.data()[i],
                  expect.data()[i], 1e-12)
          << "sample " << s;
  }
}

TEST(UomeBatch, RoutedSampleTouchesOnlyItsExperts) {
  Rng rng(28);
  const std::size_t d = 4, d_ff = 8, l = 4, b = 3, n = 2;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({b, l, d}, rng, -1, 1);
  auto res = uoe::uome_forward_batch(x, p, 1);
  std::size_t owner = n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s : res.plan.assignments[i])
      if (s == 0) owner = i;
  ASSERT_LT(owner, n);
  const std::size_t other = (owner + 1) % n;
  auto p2 = p;
  std::vector<double> bumped = p.experts.a_out.data();
  for (std::size_t i = 0; i < (d_ff / n) * d; ++i)
    bumped[other * (d_ff / n) * d + i] += 5.5;
  p2.experts.a_out = Tensor<double>::from_data({n, d_ff / n, d}, bumped);
  auto res2 = uoe::uome_forward_batch(x, p2, 1);
  ASSERT_EQ(res2.plan.assignments, res.plan.assignments);
  for (std::size_t i = 0; i < l * d; ++i)
    ASSERT_EQ(res.u.data()[i], res2.u.data()[i]);
}

TEST(UomeBatch, OneGatherOneScatter) {
  Rng rng(29);
  const std::size_t d = 6, d_ff = 12, l = 4, b = 3, n = 3;
  auto dense = make_dense(d, d_ff, rng);
  auto p = make_params(uoe::partition_mlp(dense.a1, dense.a2, n), l, rng);
  auto x = Tensor<double>::uniform({b, l, d}, rng, -1, 1);
  uoe::op_counters().reset();
  uoe::uome_forward_batch(x, p, 2);
  EXPECT_EQ(uoe::op_counters().gather_passes, 1u);
  EXPECT_EQ(uoe::op_counters().scatter_passes, 1u);
}

TEST(UomeBatch, GradientsMatchFiniteDifferences) {
  const std::size_t d = 3, de = 2, n = 2, l = 2, b = 2;
  for (std::uint64_t seed : {4u, 8u}) {
    testutil::check_gradients(
        {{b, l, d}, {n, d, de}, {n, de, d}, {l * d, n}},
        [&](const std::vector<Tensor<double>>& in) {
          UomeParams<double> p;
          p.experts.n = n;
          p.experts.a_in = in[1];
          p.experts.a_out = in[2];
          p.gate.expert_w = in[3];
          p.gate_scale_outputs = true;
          return uoe::uome_forward_batch(in[0], p, 1).u;
        },
        seed);
  }
}
