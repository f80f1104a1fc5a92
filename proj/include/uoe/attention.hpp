#pragma once

// Selective multi-head attention. One expert owns one head-width slice of the
// QKV/output projections; routing picks which patches (or samples) each
// expert sees. Because routed indices stay sorted, every expert shares one
// lower-triangular causal mask regardless of which tokens it holds.

#include <cmath>
#include <cstdint>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/decomposition.hpp"
#include "uoe/routing.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

struct RopeConfig {
  std::size_t d_qc = 0, d_qr = 0;  // constant / rotated widths of the query
  std::size_t d_kc = 0, d_kr = 0;  // and key head dimensions
  double theta_base = 10000.0;
  // Rotate by position within the gathered block instead of the original
  // token position (ablation aid; off by default).
  bool compacted_positions = false;

  void validate(std::size_t d_h) const {
    if (d_qc + d_qr != d_h || d_kc + d_kr != d_h)
      throw ConfigError("rope widths must sum to head width " +
                        std::to_string(d_h));
    if (d_qr % 2 != 0 || d_kr % 2 != 0)
      throw ConfigError("rotated rope widths must be even, got q=" +
                        std::to_string(d_qr) + " k=" + std::to_string(d_kr));
  }
};

// Half the head rotates (rounded down to an even width), half stays constant.
inline RopeConfig default_rope_config(std::size_t d_h) {
  RopeConfig r;
  std::size_t rot = d_h / 2;
  rot -= rot % 2;
  r.d_qr = r.d_kr = rot;
  r.d_qc = r.d_kc = d_h - rot;
  return r;
}

struct AttentionMask {
  std::vector<std::uint8_t> padding;  // optional; 1 = valid token, length l
  bool causal = true;
};

template <typename T>
struct SmhaParams {
  AttnExpertGroup<T> experts;
  GateParams<T> gate;
  RopeConfig rope;
  std::size_t l_p = 1;
  bool gate_scale_outputs = false;
};

// ---------------------------------------------------------------------------
// Masks.

// The doubly-indexed causal mask of any sorted index set is the same
// lower-triangular matrix, so one tril serves every expert.
inline std::vector<std::uint8_t> shared_causal_submask(std::size_t l_a) {
  std::vector<std::uint8_t> m(l_a * l_a, 0);
  for (std::size_t i = 0; i < l_a; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * l_a + j] = 1;
  return m;
}

// Per-expert padding masks at the gathered token positions (patch indices
// expanded by the patch length).
inline std::vector<std::uint8_t> select_padding_mask(
    const std::vector<std::uint8_t>& mask, const DataRoutingPlan& plan,
    std::size_t l_p) {
  if (mask.size() != plan.m * l_p)
    throw ShapeError("select_padding_mask: mask length " +
                     std::to_string(mask.size()) + " != m*l_p = " +
                     std::to_string(plan.m * l_p));
  const std::size_t l_a = plan.c * l_p;
  std::vector<std::uint8_t> out(plan.active_count() * l_a);
  for (std::size_t a = 0; a < plan.active_count(); ++a)
    for (std::size_t t = 0; t < plan.c; ++t)
      for (std::size_t o = 0; o < l_p; ++o)
        out[a * l_a + t * l_p + o] = mask[plan.id[a][t] * l_p + o];
  return out;
}

// Original token positions seen by each expert row, in gather order.
inline std::vector<std::size_t> expand_patch_positions(
    const DataRoutingPlan& plan, std::size_t l_p) {
  std::vector<std::size_t> pos;
  pos.reserve(plan.active_count() * plan.c * l_p);
  for (std::size_t a = 0; a < plan.active_count(); ++a)
    for (std::size_t t = 0; t < plan.c; ++t)
      for (std::size_t o = 0; o < l_p; ++o)
        pos.push_back(plan.id[a][t] * l_p + o);
  return pos;
}

// Combine a shared causal triangle with per-expert key validity into the
// [batch, L, L] byte mask consumed by the masked softmax.
inline std::vector<std::uint8_t> build_allowed_mask(
    std::size_t batch, std::size_t L, bool causal,
    const std::vector<std::uint8_t>& key_valid /* batch*L or empty */) {
  std::vector<std::uint8_t> allowed(batch * L * L, 1);
  const auto tril = causal ? shared_causal_submask(L)
                           : std::vector<std::uint8_t>(L * L, 1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        std::uint8_t ok = tril[i * L + j];
        if (!key_valid.empty()) ok &= key_valid[b * L + j];
        allowed[(b * L + i) * L + j] = ok;
      }
  return allowed;
}

// ---------------------------------------------------------------------------
// Attention core: softmax(q k^T / sqrt(d_h)) v with a byte mask.

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v,
                               const std::vector<std::uint8_t>& allowed) {
  if (q.ndim() != 3 || k.shape() != q.shape() || v.ndim() != 3 ||
      v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1))
    throw ShapeError("scaled_dot_attention: inconsistent shapes " +
                     to_string(q.shape()) + " / " + to_string(v.shape()));
  const std::size_t d_h = q.dim(2);
  auto scores =
      scale(matmul(q, transpose_last2(k)), T(1) / std::sqrt(static_cast<T>(d_h)));
  auto weights = masked_softmax_last(scores, allowed);
  return matmul(weights, v);
}

// ---------------------------------------------------------------------------
// Partial RoPE: [x_c, rope(x_r)] on the last axis.

template <typename T>
Tensor<T> partial_rope(const Tensor<T>& x, std::size_t d_const,
                       std::size_t d_rot, const std::vector<std::size_t>& pos,
                       double theta_base) {
  if (d_rot == 0) return x;
  auto rotated =
      apply_rope(slice_last(x, d_const, d_const + d_rot), pos, theta_base);
  if (d_const == 0) return rotated;
  return concat_last(slice_last(x, 0, d_const), rotated);
}

// ---------------------------------------------------------------------------
// SMHA over one sample with data selection (or full activation via k = n).

template <typename T>
struct SmhaSampleResult {
  Tensor<T> u;       // [l, d] residual-added output
  DataRoutingPlan plan;
  Tensor<T> gates;   // [n, m]
};

template <typename T>
SmhaSampleResult<T> smha_forward(
    const Tensor<T>& h, const SmhaParams<T>& p, const AttentionMask& mask,
    std::size_t k,
    const std::vector<std::size_t>* active_experts = nullptr,
    const Tensor<T>* residual = nullptr) {
  if (h.ndim() != 2 || h.dim(1) != p.experts.d())
    throw ShapeError("smha_forward: input " + to_string(h.shape()) +
                     " does not match width " + std::to_string(p.experts.d()));
  if (residual && residual->shape() != h.shape())
    throw ShapeError("smha_forward: residual " + to_string(residual->shape()) +
                     " does not match input " + to_string(h.shape()));
  const std::size_t d = p.experts.d(), d_h = p.experts.d_h();
  p.rope.validate(d_h);

  auto x_patches = split_patches(h, p.l_p);  // [m, l_p, d]
  const std::size_t m = x_patches.dim(0);
  auto gates = data_gate(x_patches, p.gate);  // [n, m]

  SmhaSampleResult<T> res;
  res.gates = gates;
  res.plan = active_experts
                 ? plan_data_selection_over(gates, k, *active_experts)
                 : plan_data_selection(gates, k);
  const DataRoutingPlan& plan = res.plan;
  const std::size_t n_act = plan.active_count();
  const std::size_t l_a = plan.c * p.l_p;

  // One gather, then batched per-expert projections.
  auto gathered = reshape(gather_patches(x_patches, plan), {n_act, l_a, d});
  Tensor<T> wq = p.experts.w_q, wk = p.experts.w_k, wv = p.experts.w_v,
            wo = p.experts.w_o;
  if (n_act != p.experts.n) {
    wq = index_select(wq, 0, plan.experts);
    wk = index_select(wk, 0, plan.experts);
    wv = index_select(wv, 0, plan.experts);
    wo = index_select(wo, 0, plan.experts);
  }
  auto q = matmul(gathered, wq);  // [n_act, l_a, d_h]
  auto kk = matmul(gathered, wk);
  auto v = matmul(gathered, wv);

  // Rotate by original token positions (routing preserves order, so relative
  // offsets stay meaningful); compacted mode uses 0..l_a-1 instead.
  std::vector<std::size_t> pos;
  if (p.rope.compacted_positions) {
    pos.resize(l_a);
    for (std::size_t i = 0; i < l_a; ++i) pos[i] = i;
  } else {
    pos = expand_patch_positions(plan, p.l_p);
  }
  q = partial_rope(q, p.rope.d_qc, p.rope.d_qr, pos, p.rope.theta_base);
  kk = partial_rope(kk, p.rope.d_kc, p.rope.d_kr, pos, p.rope.theta_base);

  std::vector<std::uint8_t> key_valid;
  if (!mask.padding.empty())
    key_valid = select_padding_mask(mask.padding, plan, p.l_p);
  const auto allowed = build_allowed_mask(n_act, l_a, mask.causal, key_valid);

  auto o = scaled_dot_attention(q, kk, v, allowed);  // [n_act, l_a, d_h]
  auto y = matmul(o, wo);                            // [n_act, l_a, d]
  auto y4 = reshape(y, {n_act, plan.c, p.l_p, d});

  if (p.gate_scale_outputs) {
    // Gate value of each (expert, selected patch) pair, via one gather.
    std::vector<std::size_t> gidx;
    gidx.reserve(n_act * plan.c);
    for (std::size_t a = 0; a < n_act; ++a)
      for (std::size_t t = 0; t < plan.c; ++t)
        gidx.push_back(plan.experts[a] * m + plan.id[a][t]);
    auto g_sel = reshape(index_select(reshape(gates, {gates.numel()}), 0, gidx),
                         {n_act, plan.c});
    y4 = scale_slices(y4, g_sel);
  }

  // Selective residual: contributions land back on the residual stream (the
  // pre-norm input when a separate residual base is supplied).
  auto base = residual ? split_patches(*residual, p.l_p) : x_patches;
  auto u = scatter_add_patches(base, y4, plan);
  res.u = reshape(u, {m * p.l_p, d});
  return res;
}

// ---------------------------------------------------------------------------
// SMHA over a batch with expert selection: whole samples are routed, each
// expert runs its ragged segment through one grouped product.

template <typename T>
struct SmhaBatchResult {
  Tensor<T> u;       // [b, l, d]
  ExpertRoutingPlan plan;
  Tensor<T> gates;   // [b, n]
};

template <typename T>
SmhaBatchResult<T> smha_forward_batch(const Tensor<T>& x,
                                      const SmhaParams<T>& p,
                                      const AttentionMask& mask, std::size_t k,
                                      const Tensor<T>* residual = nullptr) {
  if (x.ndim() != 3 || x.dim(2) != p.experts.d())
    throw ShapeError("smha_forward_batch: input " + to_string(x.shape()) +
                     " does not match width " + std::to_string(p.experts.d()));
  if (residual && residual->shape() != x.shape())
    throw ShapeError("smha_forward_batch: residual " +
                     to_string(residual->shape()) + " does not match input " +
                     to_string(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  const std::size_t d_h = p.experts.d_h(), n = p.experts.n;
  p.rope.validate(d_h);

  SmhaBatchResult<T> res;
  res.gates = expert_gate(x, p.gate);  // [b, n]
  res.plan = plan_expert_selection(res.gates, k);
  const ExpertRoutingPlan& plan = res.plan;
  const std::size_t r_total = plan.total();

  auto gathered = gather_samples(x, plan);  // [R, l, d]
  auto flat = reshape(gathered, {r_total * l, d});
  auto sample_off = plan.offsets();
  std::vector<std::size_t> row_off(n + 1);
  for (std::size_t i = 0; i <= n; ++i) row_off[i] = sample_off[i] * l;

  auto q = reshape(segment_matmul(flat, p.experts.w_q, row_off),
                   {r_total, l, d_h});
  auto kk = reshape(segment_matmul(flat, p.experts.w_k, row_off),
                    {r_total, l, d_h});
  auto v = reshape(segment_matmul(flat, p.experts.w_v, row_off),
                   {r_total, l, d_h});

  std::vector<std::size_t> pos(l);
  for (std::size_t i = 0; i < l; ++i) pos[i] = i;
  q = partial_rope(q, p.rope.d_qc, p.rope.d_qr, pos, p.rope.theta_base);
  kk = partial_rope(kk, p.rope.d_kc, p.rope.d_kr, pos, p.rope.theta_base);

  std::vector<std::uint8_t> key_valid;
  if (!mask.padding.empty()) {
    if (mask.padding.size() != l)
      throw ShapeError("smha_forward_batch: padding length " +
                       std::to_string(mask.padding.size()) + " != l = " +
                       std::to_string(l));
    key_valid.resize(r_total * l);
    for (std::size_t r = 0; r < r_total; ++r)
      std::copy(mask.padding.begin(), mask.padding.end(),
                key_valid.begin() + r * l);
  }
  const auto allowed = build_allowed_mask(r_total, l, mask.causal, key_valid);

  auto o = scaled_dot_attention(q, kk, v, allowed);  // [R, l, d_h]
  auto y = reshape(segment_matmul(reshape(o, {r_total * l, d_h}),
                                  p.experts.w_o, row_off),
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

  res.u = scatter_add_samples(residual ? *residual : x, y, plan);
  return res;
}

}  // namespace uoe
