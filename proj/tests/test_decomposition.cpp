#include <gtest/gtest.h>

#include <vector>

#include "uoe/decomposition.hpp"
#include "uoe/rng.hpp"
#include "uoe/tensor.hpp"
#include "test_util.hpp"

using uoe::MlpExpertGroup;
using uoe::Rng;
using uoe::SecondActivation;
using uoe::Shape;
using uoe::Tensor;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng) {
  return Tensor<double>::uniform(std::move(s), rng, -1.0, 1.0);
}

}  // namespace

TEST(PartitionMlp, SingleExpertIsIdentityPartition) {
  Rng rng(1);
  auto a1 = rand_t({4, 8}, rng);
  auto a2 = rand_t({8, 4}, rng);
  auto g = uoe::partition_mlp(a1, a2, 1);
  EXPECT_EQ(g.a_in.shape(), (Shape{1, 4, 8}));
  EXPECT_EQ(g.a_in.data(), a1.data());
  EXPECT_EQ(g.a_out.data(), a2.data());
}

TEST(PartitionMlp, ColumnsMapToExpertsInOrder) {
  // d=2, D_e=4, n=2: expert 0 owns columns {0,1}, expert 1 owns {2,3}.
  auto a1 = Tensor<double>::from_data({2, 4}, {0, 1, 2, 3,  //
                                               4, 5, 6, 7});
  auto a2 = Tensor<double>::from_data(
      {4, 2}, {10, 11, 12, 13, 14, 15, 16, 17});
  auto g = uoe::partition_mlp(a1, a2, 2);
  EXPECT_EQ(g.a_in.data(), (std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7}));
  EXPECT_EQ(g.a_out.data(),
            (std::vector<double>{10, 11, 12, 13, 14, 15, 16, 17}));
}

TEST(PartitionMlp, RoundTripIsBitIdentical) {
  Rng rng(2);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    auto a1 = rand_t({6, 16}, rng);
    auto a2 = rand_t({16, 6}, rng);
    auto g = uoe::partition_mlp(a1, a2, n);
    auto [r1, r2] = uoe::reconstruct_mlp(g);
    EXPECT_EQ(r1.data(), a1.data()) << "n=" << n;
    EXPECT_EQ(r2.data(), a2.data()) << "n=" << n;
  }
}

TEST(PartitionMlp, IndivisibleWidthIsConfigError) {
  Rng rng(3);
  auto a1 = rand_t({4, 6}, rng);
  auto a2 = rand_t({6, 4}, rng);
  EXPECT_THROW(uoe::partition_mlp(a1, a2, 4), uoe::ConfigError);
}

TEST(MlpUnion, LosslessAcrossExpertCounts) {
  Rng rng(4);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    auto x = rand_t({5, 8}, rng);
    auto a1 = rand_t({8, 16}, rng);
    auto a2 = rand_t({16, 8}, rng);
    auto dense = uoe::dense_mlp_forward(x, a1, a2);
    auto uni = uoe::expert_union_mlp_forward(x, uoe::partition_mlp(a1, a2, n));
    EXPECT_LE(uoe::max_abs_diff(dense, uni), 1e-12) << "n=" << n;
  }
}

TEST(MlpUnion, LosslessWithSecondActivationSilu) {
  Rng rng(5);
  auto x = rand_t({4, 6}, rng);
  auto a1 = rand_t({6, 12}, rng);
  auto a2 = rand_t({12, 6}, rng);
  auto dense = uoe::dense_mlp_forward(x, a1, a2, SecondActivation::kSilu);
  auto uni = uoe::expert_union_mlp_forward(x, uoe::partition_mlp(a1, a2, 4),
                                           SecondActivation::kSilu);
  EXPECT_LE(uoe::max_abs_diff(dense, uni), 1e-12);
}

TEST(MlpUnion, LosslessWithBiases) {
  Rng rng(6);
  auto x = rand_t({4, 6}, rng);
  auto a1 = rand_t({6, 12}, rng);
  auto a2 = rand_t({12, 6}, rng);
  auto b1 = rand_t({12}, rng);
  auto b2 = rand_t({6}, rng);
  auto dense = uoe::dense_mlp_forward(x, a1, a2, SecondActivation::kIdentity,
                                      &b1, &b2);
  auto uni = uoe::expert_union_mlp_forward(
      x, uoe::partition_mlp(a1, a2, b1, b2, 3));
  EXPECT_LE(uoe::max_abs_diff(dense, uni), 1e-12);
}

TEST(MlpUnion, Float32AgreesWithinRelativeTolerance) {
  Rng rng(7);
  auto x = rand_t({5, 8}, rng);
  auto a1 = rand_t({8, 16}, rng);
  auto a2 = rand_t({16, 8}, rng);
  auto dense64 = uoe::dense_mlp_forward(x, a1, a2);
  auto x32 = uoe::cast<float>(x);
  auto uni32 = uoe::expert_union_mlp_forward(
      uoe::cast<float>(x),
      uoe::partition_mlp(uoe::cast<float>(a1), uoe::cast<float>(a2), 4));
  for (std::size_t i = 0; i < dense64.numel(); ++i) {
    const double a = dense64.data()[i];
    const double b = static_cast<double>(uni32.data()[i]);
    ASSERT_NEAR(a, b, 1e-5 * std::max(1.0, std::abs(a)));
  }
}

TEST(MlpUnion, ExpertOrderChangesResultOnlyByReassociation) {
  Rng rng(8);
  auto x = rand_t({4, 8}, rng);
  auto a1 = rand_t({8, 16}, rng);
  auto a2 = rand_t({16, 8}, rng);
  auto g = uoe::partition_mlp(a1, a2, 4);
  auto forward = uoe::expert_union_mlp_forward(x, g);
  // Reverse the expert order inside the stacked slices.
  const std::size_t n = 4, slab_in = 8 * 4, slab_out = 4 * 8;
  std::vector<double> ain(g.a_in.numel()), aout(g.a_out.numel());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(g.a_in.data().data() + i * slab_in, slab_in,
                ain.data() + (n - 1 - i) * slab_in);
    std::copy_n(g.a_out.data().data() + i * slab_out, slab_out,
                aout.data() + (n - 1 - i) * slab_out);
  }
  MlpExpertGroup<double> rev;
  rev.n = n;
  rev.a_in = Tensor<double>::from_data(g.a_in.shape(), std::move(ain));
  rev.a_out = Tensor<double>::from_data(g.a_out.shape(), std::move(aout));
  auto backward_order = uoe::expert_union_mlp_forward(x, rev);
  EXPECT_LE(uoe::max_abs_diff(forward, backward_order), 1e-12);
}

TEST(MlpUnion, ZeroInputGivesActivationConstant) {
  Rng rng(9);
  auto x = Tensor<double>::zeros({3, 6});
  auto a1 = rand_t({6, 12}, rng);
  auto a2 = rand_t({12, 6}, rng);
  // silu(0) = 0, so the biasless MLP maps zero to zero.
  auto y = uoe::expert_union_mlp_forward(x, uoe::partition_mlp(a1, a2, 2));
  EXPECT_EQ(uoe::max_abs(y), 0.0);
}

TEST(MlpUnion, GradientsFlowThroughUnionPath) {
  // Stacked slices are the leaf parameters; the union wiring (broadcast
  // product, scatter-add merge) must be differentiable end to end.
  for (std::uint64_t s = 0; s < 5; ++s) {
    testutil::check_gradients(
        {{3, 4}, {2, 4, 4}, {2, 4, 4}},
        [](const std::vector<Tensor<double>>& in) {
          auto v = uoe::silu(uoe::matmul(in[0], in[1]));
          auto partials = uoe::reshape(uoe::matmul(v, in[2]), {2 * 3, 4});
          std::vector<std::size_t> idx = {0, 1, 2, 0, 1, 2};
          return uoe::index_add(Tensor<double>::zeros({3, 4}), 0, idx,
                                partials);
        },
        s);
  }
}

// ---------------------------------------------------------------------------
// Attention partition.

TEST(PartitionAttention, SingleExpertIsIdentity) {
  Rng rng(10);
  auto wq = rand_t({4, 6}, rng), wk = rand_t({4, 6}, rng),
       wv = rand_t({4, 6}, rng), wo = rand_t({6, 4}, rng);
  auto g = uoe::partition_attention(wq, wk, wv, wo, 1);
  EXPECT_EQ(g.w_q.data(), wq.data());
  EXPECT_EQ(g.w_o.data(), wo.data());
}

TEST(PartitionAttention, ExpertOwnsItsColumnBlock) {
  // n=2, d_h=2: expert 0 owns columns 0-1, expert 1 owns columns 2-3.
  auto wq = Tensor<double>::from_data({2, 4}, {0, 1, 2, 3,  //
                                               4, 5, 6, 7});
  auto wo = Tensor<double>::from_data({4, 2},
                                      {10, 11, 12, 13, 14, 15, 16, 17});
  auto g = uoe::partition_attention(wq, wq, wq, wo, 2);
  EXPECT_EQ(g.w_q.data(), (std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7}));
  ASSERT_EQ(g.w_o.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(g.w_o.data(),
            (std::vector<double>{10, 11, 12, 13, 14, 15, 16, 17}));
}

TEST(PartitionAttention, RoundTripIsBitIdentical) {
  Rng rng(11);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    auto wq = rand_t({6, 16}, rng), wk = rand_t({6, 16}, rng),
         wv = rand_t({6, 16}, rng), wo = rand_t({16, 6}, rng);
    auto g = uoe::partition_attention(wq, wk, wv, wo, n);
    auto r = uoe::reconstruct_attention(g);
    EXPECT_EQ(r.wq.data(), wq.data()) << "n=" << n;
    EXPECT_EQ(r.wk.data(), wk.data()) << "n=" << n;
    EXPECT_EQ(r.wv.data(), wv.data()) << "n=" << n;
    EXPECT_EQ(r.wo.data(), wo.data()) << "n=" << n;
  }
}

TEST(PartitionAttention, IndivisibleWidthIsConfigError) {
  Rng rng(12);
  auto wq = rand_t({4, 6}, rng);
  auto wo = rand_t({6, 4}, rng);
  EXPECT_THROW(uoe::partition_attention(wq, wq, wq, wo, 4), uoe::ConfigError);
}
