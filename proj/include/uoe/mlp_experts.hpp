#pragma once

// Routed union of MLP experts. Each expert is one column/row slice of the
// dense two-layer MLP; routed contributions are summed by one scatter-add and
// only then pass through the optional second activation, so complete coverage
// reproduces the dense computation bit for bit.

#include <cstddef>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/decomposition.hpp"
#include "uoe/routing.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

template <typename T>
struct UomeParams {
  MlpExpertGroup<T> experts;
  GateParams<T> gate;
  std::size_t l_p = 1;
  SecondActivation second_act = SecondActivation::kIdentity;
  bool gate_scale_outputs = false;
};

// Full activation: union of every expert plus residual.
template <typename T>
Tensor<T> uome_forward_full(const Tensor<T>& h, const MlpExpertGroup<T>& g,
                            SecondActivation act = SecondActivation::kIdentity) {
  return add(h, expert_union_mlp_forward(h, g, act));
}

// ---------------------------------------------------------------------------
// Data selection: patches are routed to experts within one sample.

template <typename T>
struct UomeSampleResult {
  Tensor<T> u;       // [l, d]
  DataRoutingPlan plan;
  Tensor<T> gates;   // [n, m]
};

template <typename T>
UomeSampleResult<T> uome_forward(
    const Tensor<T>& h, const UomeParams<T>& p, std::size_t k,
    const std::vector<std::size_t>* active_experts = nullptr,
    const Tensor<T>* residual = nullptr) {
  if (h.ndim() != 2 || h.dim(1) != p.experts.d())
    throw ShapeError("uome_forward: input " + to_string(h.shape()) +
                     " does not match width " + std::to_string(p.experts.d()));
  if (residual && residual->shape() != h.shape())
    throw ShapeError("uome_forward: residual " + to_string(residual->shape()) +
                     " does not match input " + to_string(h.shape()));
  const std::size_t d = p.experts.d();

  auto x_patches = split_patches(h, p.l_p);  // [m, l_p, d]
  const std::size_t m = x_patches.dim(0);
  auto gates = data_gate(x_patches, p.gate);  // [n, m]

  UomeSampleResult<T> res;
  res.gates = gates;
  res.plan = active_experts
                 ? plan_data_selection_over(gates, k, *active_experts)
                 : plan_data_selection(gates, k);
  const DataRoutingPlan& plan = res.plan;
  const std::size_t n_act = plan.active_count();
  const std::size_t l_a = plan.c * p.l_p;

  auto gathered = reshape(gather_patches(x_patches, plan), {n_act, l_a, d});
  Tensor<T> a_in = p.experts.a_in, a_out = p.experts.a_out;
  Tensor<T> b_in = p.experts.b_in;
  if (n_act != p.experts.n) {
    a_in = index_select(a_in, 0, plan.experts);
    a_out = index_select(a_out, 0, plan.experts);
    if (b_in.defined()) b_in = index_select(b_in, 0, plan.experts);
  }

  auto mid = matmul(gathered, a_in);  // [n_act, l_a, d_e]
  if (b_in.defined()) mid = add_bias_batched(mid, b_in);
  auto y = matmul(silu(mid), a_out);  // [n_act, l_a, d]
  auto y4 = reshape(y, {n_act, plan.c, p.l_p, d});

  if (p.gate_scale_outputs) {
    std::vector<std::size_t> gidx;
    gidx.reserve(n_act * plan.c);
    for (std::size_t a = 0; a < n_act; ++a)
      for (std::size_t t = 0; t < plan.c; ++t)
        gidx.push_back(plan.experts[a] * m + plan.id[a][t]);
    auto g_sel = reshape(index_select(reshape(gates, {gates.numel()}), 0, gidx),
                         {n_act, plan.c});
    y4 = scale_slices(y4, g_sel);
  }

  // Sum contributions first so the second activation sees the completed
  // union, exactly as the full path does.
  auto summed = scatter_add_patches(Tensor<T>::zeros({m, p.l_p, d}), y4, plan);
  auto y_tok = reshape(summed, {m * p.l_p, d});
  if (p.experts.has_bias()) y_tok = add_bias_last(y_tok, p.experts.b_out);
  res.u = add(residual ? *residual : h,
              apply_second_activation(y_tok, p.second_act));
  return res;
}

// ---------------------------------------------------------------------------
// Expert selection: whole samples are routed, ragged per-expert segments run
// through grouped products.

template <typename T>
struct UomeBatchResult {
  Tensor<T> u;       // [b, l, d]
  ExpertRoutingPlan plan;
  Tensor<T> gates;   // [b, n]
};

template <typename T>
UomeBatchResult<T> uome_forward_batch(const Tensor<T>& x,
                                      const UomeParams<T>& p, std::size_t k,
                                      const Tensor<T>* residual = nullptr) {
  if (x.ndim() != 3 || x.dim(2) != p.experts.d())
    throw ShapeError("uome_forward_batch: input " + to_string(x.shape()) +
                     " does not match width " + std::to_string(p.experts.d()));
  if (residual && residual->shape() != x.shape())
    throw ShapeError("uome_forward_batch: residual " +
                     to_string(residual->shape()) + " does not match input " +
                     to_string(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  const std::size_t n = p.experts.n;

  UomeBatchResult<T> res;
  res.gates = expert_gate(x, p.gate);  // [b, n]
  res.plan = plan_expert_selection(res.gates, k);
  const ExpertRoutingPlan& plan = res.plan;
  const std::size_t r_total = plan.total();

  auto flat = reshape(gather_samples(x, plan), {r_total * l, d});
  auto sample_off = plan.offsets();
  std::vector<std::size_t> row_off(n + 1);
  for (std::size_t i = 0; i <= n; ++i) row_off[i] = sample_off[i] * l;

  auto mid = segment_matmul(flat, p.experts.a_in, row_off);  // [R*l, d_e]
  if (p.experts.has_bias()) {
    std::vector<std::size_t> bidx(r_total * l);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t rw = row_off[i]; rw < row_off[i + 1]; ++rw) bidx[rw] = i;
    mid = add(mid, index_select(p.experts.b_in, 0, bidx));
  }
  auto y = reshape(segment_matmul(silu(mid), p.experts.a_out, row_off),
                   {r_total, l, d});

  if (p.gate_scale_outputs) {
    auto samples = plan.flat_samples();
    std::vector<std::size_t> gidx(r_total);
    std::size_t r = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < plan.counts[i]; ++t, ++r)
        gidx[r] = samples[r] * n + i;
    auto g_sel =
        index_select(reshape(res.gates, {res.gates.numel()}), 0, gidx);
    y = scale_slices(y, g_sel);
  }

  auto summed = scatter_add_samples(Tensor<T>::zeros({b, l, d}), y, plan);
  auto y_tok = reshape(summed, {b * l, d});
  if (p.experts.has_bias()) y_tok = add_bias_last(y_tok, p.experts.b_out);
  res.u = add(residual ? *residual : x,
              reshape(apply_second_activation(y_tok, p.second_act), {b, l, d}));
  return res;
}

}  // namespace uoe
