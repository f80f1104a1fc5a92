#pragma once

// Analytic floating-point-operation counts for the routed and dense forward
// passes. Every term mirrors one instrumented kernel call in the forward
// implementation (2 per multiply-add, 5 per softmax/norm/activation element,
// 8 per rotated element, 1 per element moved by an index op), so the analytic
// total equals the runtime counter exactly.
//
// Component attribution rules:
//  - The named components (attn_proj, attn_scores, mlp, gating,
//    scatter_gather) carry the multiply-add work of their function;
//    flat-rate per-element ops (attention softmax, silu, layer norm, rope)
//    appear identically in the routed and dense paths and are pooled under
//    `other` together with embedding, residual adds and the output head.
//  - Everything that exists only in the routed path (gate networks with
//    their pooling/softmax/balance arithmetic; routed index traffic) goes
//    to `gating` or `scatter_gather`, so at full activation
//    count_uoe - count_dense == gating + scatter_gather exactly.
//  - The slice of the routed scatter that a dense residual add would also
//    perform (one add per token) is reported under `other`.

#include <cstdint>
#include <vector>

#include "uoe/instrumentation.hpp"
#include "uoe/model.hpp"

namespace uoe {

struct FlopsReport {
  std::uint64_t attn_proj = 0;       // q/k/v/output projections
  std::uint64_t attn_scores = 0;     // score products, scaling, value mix
  std::uint64_t mlp = 0;             // expert (or dense) MLP products + biases
  std::uint64_t gating = 0;          // gate networks, gate scaling, balance
  std::uint64_t scatter_gather = 0;  // routed index traffic beyond residuals
  std::uint64_t other = 0;           // softmax/silu/norm/rope, embed, head

  std::uint64_t total() const {
    return attn_proj + attn_scores + mlp + gating + scatter_gather + other;
  }
};

namespace detail {

struct SubBlockLoad {
  // One entry per forward invocation of the sub-block (per sample in data
  // mode, once per batch in expert mode).
  bool expert_mode = false;
  std::vector<std::size_t> capacities;  // realized c per sample (data mode)
  std::size_t routed_samples = 0;       // total routed segments R (expert)
};

inline std::size_t balanced_capacity(std::size_t k, std::size_t m,
                                     std::size_t n) {
  return (k * m + n - 1) / n;  // ceil; the best case the planner can reach
}

inline SubBlockLoad assumed_load(RoutingMode mode, std::size_t k,
                                 std::size_t n, std::size_t m, std::size_t b) {
  SubBlockLoad load;
  if (mode == RoutingMode::kExpert) {
    load.expert_mode = true;
    load.routed_samples = b * k;
  } else {
    const std::size_t c =
        mode == RoutingMode::kFull ? m : balanced_capacity(k, m, n);
    load.capacities.assign(b, c);
  }
  return load;
}

inline SubBlockLoad realized_load(const SubBlockTrace& trace) {
  SubBlockLoad load;
  if (trace.expert_mode) {
    load.expert_mode = true;
    load.routed_samples = trace.batch.total();
  } else {
    for (const auto& plan : trace.samples) load.capacities.push_back(plan.c);
  }
  return load;
}

// Two-layer patch gate + balance-loss arithmetic, per sample.
inline std::uint64_t data_gate_flops(std::size_t m, std::size_t l_p,
                                     std::size_t d, std::size_t hg,
                                     std::size_t n) {
  std::uint64_t f = 0;
  f += std::uint64_t(m) * l_p * d;            // mean pool
  f += 2ull * m * d * hg + 2ull * m * hg * n; // two projections
  f += kFlopsPerSoftmaxElem * std::uint64_t(n) * m;
  f += std::uint64_t(n) * m + n + n + 1;      // balance: mean, mul, sum, scale
  f += 1;                                     // accumulate into the batch sum
  return f;
}

// Per-batch sample gate + balance-loss arithmetic.
inline std::uint64_t expert_gate_flops(bool pooled, std::size_t b,
                                       std::size_t l, std::size_t d,
                                       std::size_t n) {
  std::uint64_t f = 0;
  if (pooled)
    f += std::uint64_t(b) * l * d + 2ull * b * d * n;
  else
    f += 2ull * b * l * d * n;
  f += kFlopsPerSoftmaxElem * std::uint64_t(b) * n;
  f += std::uint64_t(b) * n + n + n + 1 + 1;  // balance + accumulate
  return f;
}

}  // namespace detail

// Forward-pass count for the routed model; traces may be null (balanced
// assumption) or the realized plans of an actual forward.
inline FlopsReport count_uoe(const UoeModelConfig& cfg, std::size_t l,
                             std::size_t b,
                             const std::vector<BlockTrace>* traces = nullptr) {
  const std::size_t d = cfg.d, hg = cfg.gate_hidden_width();
  const std::size_t m = l / cfg.l_p;
  const RopeConfig rope = cfg.rope();
  FlopsReport r;
  r.other += std::uint64_t(b) * l * d;  // embedding gather

  auto attn_block = [&](const detail::SubBlockLoad& load) {
    const std::size_t n = cfg.n_a, dh = cfg.d_h;
    if (load.expert_mode) {
      if (cfg.use_layer_norm)
        r.other += kFlopsPerNormElem * std::uint64_t(b) * l * d;
      r.gating += detail::expert_gate_flops(cfg.pooled_expert_gate, b, l, d, n);
      const std::uint64_t R = load.routed_samples;
      r.scatter_gather += R * l * d;  // gather
      r.attn_proj += 3ull * 2 * R * l * d * dh;
      r.other += kFlopsPerRopeElem * R * l * (rope.d_qr + rope.d_kr);
      r.attn_scores += 2ull * R * l * l * dh + R * l * l + 2ull * R * l * l * dh;
      r.other += kFlopsPerSoftmaxElem * R * l * l;
      r.attn_proj += 2ull * R * l * dh * d;
      if (cfg.gate_scale_outputs)
        r.gating += R + R * l * d;  // gate gather + scaling
      // Scatter: one residual-add worth of traffic per token is what a dense
      // block would spend anyway.
      r.scatter_gather += R * l * d - std::uint64_t(b) * l * d;
      r.other += std::uint64_t(b) * l * d;
      return;
    }
    for (std::size_t c : load.capacities) {
      const std::size_t la = c * cfg.l_p;
      if (cfg.use_layer_norm) r.other += kFlopsPerNormElem * std::uint64_t(l) * d;
      r.gating += detail::data_gate_flops(m, cfg.l_p, d, hg, n);
      r.scatter_gather += std::uint64_t(n) * la * d;  // gather
      r.attn_proj += 3ull * 2 * n * la * d * dh;
      r.other += kFlopsPerRopeElem * std::uint64_t(n) * la *
                 (rope.d_qr + rope.d_kr);
      r.attn_scores += 2ull * n * la * la * dh + std::uint64_t(n) * la * la +
                       2ull * n * la * la * dh;
      r.other += kFlopsPerSoftmaxElem * std::uint64_t(n) * la * la;
      r.attn_proj += 2ull * n * la * dh * d;
      if (cfg.gate_scale_outputs)
        r.gating += std::uint64_t(n) * c + std::uint64_t(n) * la * d;
      r.scatter_gather += std::uint64_t(n) * la * d - std::uint64_t(l) * d;
      r.other += std::uint64_t(l) * d;  // residual slice of the scatter
    }
    r.gating += 2;  // scale the per-sample balance sum, add into the total
  };

  auto mlp_block = [&](const detail::SubBlockLoad& load) {
    const std::size_t n = cfg.n_m, de = cfg.d_e;
    const bool phi2 = cfg.mlp_second_activation == SecondActivation::kSilu;
    if (load.expert_mode) {
      if (cfg.use_layer_norm)
        r.other += kFlopsPerNormElem * std::uint64_t(b) * l * d;
      r.gating += detail::expert_gate_flops(cfg.pooled_expert_gate, b, l, d, n);
      const std::uint64_t R = load.routed_samples;
      r.scatter_gather += R * l * d;
      r.mlp += 2ull * R * l * d * de;
      if (cfg.mlp_bias) {
        r.scatter_gather += R * l * de;  // per-row bias replication
        r.mlp += R * l * de;
      }
      r.other += kFlopsPerActElem * R * l * de;
      r.mlp += 2ull * R * l * de * d;
      if (cfg.gate_scale_outputs) r.gating += R + R * l * d;
      r.scatter_gather += R * l * d;
      if (cfg.mlp_bias) r.mlp += std::uint64_t(b) * l * d;
      if (phi2) r.other += kFlopsPerActElem * std::uint64_t(b) * l * d;
      r.other += std::uint64_t(b) * l * d;  // residual add
      return;
    }
    for (std::size_t c : load.capacities) {
      const std::size_t la = c * cfg.l_p;
      if (cfg.use_layer_norm) r.other += kFlopsPerNormElem * std::uint64_t(l) * d;
      r.gating += detail::data_gate_flops(m, cfg.l_p, d, hg, n);
      r.scatter_gather += std::uint64_t(n) * la * d;
      r.mlp += 2ull * n * la * d * de;
      if (cfg.mlp_bias) r.mlp += std::uint64_t(n) * la * de;
      r.other += kFlopsPerActElem * std::uint64_t(n) * la * de;
      r.mlp += 2ull * n * la * de * d;
      if (cfg.gate_scale_outputs)
        r.gating += std::uint64_t(n) * c + std::uint64_t(n) * la * d;
      r.scatter_gather += std::uint64_t(n) * la * d;
      if (cfg.mlp_bias) r.mlp += std::uint64_t(l) * d;
      if (phi2) r.other += kFlopsPerActElem * std::uint64_t(l) * d;
      r.other += std::uint64_t(l) * d;  // residual add
    }
    r.gating += 2;
  };

  for (std::size_t bl = 0; bl < cfg.layers; ++bl) {
    attn_block(traces ? detail::realized_load((*traces)[bl].attn)
                      : detail::assumed_load(cfg.attn_mode, cfg.k_attn,
                                             cfg.n_a, m, b));
    mlp_block(traces ? detail::realized_load((*traces)[bl].mlp)
                     : detail::assumed_load(cfg.mlp_mode, cfg.k_mlp, cfg.n_m,
                                            m, b));
  }

  if (cfg.use_layer_norm)
    r.other += kFlopsPerNormElem * std::uint64_t(b) * l * d;
  r.other += 2ull * b * l * d * cfg.vocab_size;  // head
  return r;
}

// Dense twin forward count; shares every non-routing term with count_uoe.
inline FlopsReport count_dense(const UoeModelConfig& cfg, std::size_t l,
                               std::size_t b) {
  const std::size_t d = cfg.d, W = cfg.attn_width(), De = cfg.mlp_width();
  const RopeConfig rope = cfg.rope();
  FlopsReport r;
  r.other += std::uint64_t(b) * l * d;  // embedding gather
  for (std::size_t bl = 0; bl < cfg.layers; ++bl) {
    for (std::size_t s = 0; s < b; ++s) {
      if (cfg.use_layer_norm) r.other += kFlopsPerNormElem * std::uint64_t(l) * d;
      r.attn_proj += 3ull * 2 * l * d * W;
      r.other += kFlopsPerRopeElem * std::uint64_t(cfg.n_a) * l *
                 (rope.d_qr + rope.d_kr);
      r.attn_scores += 2ull * cfg.n_a * l * l * cfg.d_h +
                       std::uint64_t(cfg.n_a) * l * l +
                       2ull * cfg.n_a * l * l * cfg.d_h;
      r.other += kFlopsPerSoftmaxElem * std::uint64_t(cfg.n_a) * l * l;
      r.attn_proj += 2ull * l * W * d;
      r.other += std::uint64_t(l) * d;  // attention residual add
      if (cfg.use_layer_norm) r.other += kFlopsPerNormElem * std::uint64_t(l) * d;
      r.mlp += 2ull * l * d * De;
      if (cfg.mlp_bias) r.mlp += std::uint64_t(l) * De;
      r.other += kFlopsPerActElem * std::uint64_t(l) * De;
      r.mlp += 2ull * l * De * d;
      if (cfg.mlp_bias) r.mlp += std::uint64_t(l) * d;
      if (cfg.mlp_second_activation == SecondActivation::kSilu)
        r.other += kFlopsPerActElem * std::uint64_t(l) * d;
      r.other += std::uint64_t(l) * d;  // MLP residual add
    }
  }
  if (cfg.use_layer_norm)
    r.other += kFlopsPerNormElem * std::uint64_t(b) * l * d;
  r.other += 2ull * b * l * d * cfg.vocab_size;
  return r;
}

inline double flops_ratio(const UoeModelConfig& cfg, std::size_t l,
                          std::size_t b,
                          const std::vector<BlockTrace>* traces = nullptr) {
  return double(count_uoe(cfg, l, b, traces).total()) /
         double(count_dense(cfg, l, b).total());
}

}  // namespace uoe
