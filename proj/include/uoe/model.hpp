#pragma once

// Transformer assembly: pre-norm blocks built from routed attention and the
// MLP expert union, a dense twin over the merged weights, and the task plus
// load-balance losses. Both models draw their shared parameters from the same
// named streams, so equal seeds mean bit-equal weights.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "uoe/attention.hpp"
#include "uoe/common.hpp"
#include "uoe/mlp_experts.hpp"
#include "uoe/rng.hpp"

namespace uoe {

enum class RoutingMode { kFull, kData, kExpert };

inline RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "full") return RoutingMode::kFull;
  if (s == "data") return RoutingMode::kData;
  if (s == "expert") return RoutingMode::kExpert;
  throw ConfigError("routing mode must be 'full', 'data' or 'expert', got '" +
                    s + "'");
}

inline const char* to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::kFull: return "full";
    case RoutingMode::kData: return "data";
    default: return "expert";
  }
}

struct UoeModelConfig {
  static constexpr std::size_t kRopeHalf =
      std::numeric_limits<std::size_t>::max();

  std::size_t layers = 2;
  std::size_t d = 64;        // model width
  std::size_t n_a = 4;       // attention experts (head groups)
  std::size_t d_h = 16;      // per-expert head width
  std::size_t n_m = 4;       // MLP experts
  std::size_t d_e = 32;      // per-expert hidden width
  std::size_t l_p = 8;       // patch length
  std::size_t k_attn = 2;
  std::size_t k_mlp = 2;
  RoutingMode attn_mode = RoutingMode::kData;
  RoutingMode mlp_mode = RoutingMode::kData;
  std::size_t vocab_size = 256;
  std::size_t max_len = 64;
  double alpha = 0.01;  // balance factor

  double rope_theta = 10000.0;
  std::size_t rope_rotated = kRopeHalf;  // rotated width; default half, even
  bool compacted_positions = false;

  bool gate_scale_outputs = false;
  bool pooled_expert_gate = false;
  SecondActivation mlp_second_activation = SecondActivation::kIdentity;
  bool mlp_bias = false;
  bool use_layer_norm = true;
  std::size_t gate_hidden = 0;  // 0 -> d
  std::uint64_t seed = 1;

  std::size_t attn_width() const { return n_a * d_h; }
  std::size_t mlp_width() const { return n_m * d_e; }
  std::size_t patches() const { return max_len / l_p; }
  std::size_t gate_hidden_width() const {
    return gate_hidden ? gate_hidden : d;
  }

  RopeConfig rope() const {
    RopeConfig r = default_rope_config(d_h);
    if (rope_rotated != kRopeHalf) {
      r.d_qr = r.d_kr = rope_rotated;
      r.d_qc = r.d_kc = d_h - rope_rotated;
    }
    r.theta_base = rope_theta;
    r.compacted_positions = compacted_positions;
    return r;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(d, "d");
    positive(n_a, "n_a");
    positive(d_h, "d_h");
    positive(n_m, "n_m");
    positive(d_e, "d_e");
    positive(l_p, "l_p");
    positive(max_len, "max_len");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (max_len % l_p != 0)
      throw ConfigError("max_len " + std::to_string(max_len) +
                        " not divisible by patch length " +
                        std::to_string(l_p));
    if (k_attn < 1 || k_attn > n_a)
      throw ConfigError("k_attn " + std::to_string(k_attn) +
                        " out of range [1, " + std::to_string(n_a) + "]");
    if (k_mlp < 1 || k_mlp > n_m)
      throw ConfigError("k_mlp " + std::to_string(k_mlp) +
                        " out of range [1, " + std::to_string(n_m) + "]");
    rope().validate(d_h);
  }
};

// ---------------------------------------------------------------------------
// Load-balance loss: alpha * sum_i f_i P_i, with f_i the hard stage-one
// selection fraction (scaled by n/k) and P_i the mean gate value. Gradients
// flow through P_i only.

inline std::vector<std::size_t> stage_one_counts(const DataRoutingPlan& plan) {
  std::vector<std::size_t> counts(plan.n, 0);
  for (const auto& picks : plan.id_prime)
    for (std::size_t i : picks) ++counts[i];
  return counts;
}

template <typename T>
Tensor<T> load_balance_loss(const Tensor<T>& mean_gate,
                            const std::vector<std::size_t>& counts,
                            std::size_t k, std::size_t items, T alpha) {
  const std::size_t n = mean_gate.numel();
  if (counts.size() != n)
    throw ShapeError("load_balance_loss: " + std::to_string(counts.size()) +
                     " counts for " + std::to_string(n) + " experts");
  if (k < 1 || k > n)
    throw ConfigError("load_balance_loss: top-k " + std::to_string(k) +
                      " out of range [1, " + std::to_string(n) + "]");
  std::vector<T> f(n);
  for (std::size_t i = 0; i < n; ++i)
    f[i] = static_cast<T>(n) * static_cast<T>(counts[i]) /
           (static_cast<T>(k) * static_cast<T>(items));
  return scale(sum_all(mul(Tensor<T>::from_data({n}, std::move(f)), mean_gate)),
               alpha);
}

template <typename T>
Tensor<T> load_balance_loss_data(const Tensor<T>& gates,
                                 const DataRoutingPlan& plan, T alpha) {
  return load_balance_loss(mean_axis(gates, 1), stage_one_counts(plan), plan.k,
                           plan.m, alpha);
}

template <typename T>
Tensor<T> load_balance_loss_expert(const Tensor<T>& gates,
                                   const ExpertRoutingPlan& plan, T alpha) {
  return load_balance_loss(mean_axis(gates, 0), plan.counts, plan.k, plan.b,
                           alpha);
}

// Mean negative log-likelihood plus its exponential.
template <typename T>
std::pair<Tensor<T>, double> cross_entropy_and_perplexity(
    const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  auto nll = cross_entropy_mean(logits, targets);
  return {nll, std::exp(static_cast<double>(nll.item()))};
}

// ---------------------------------------------------------------------------
// Routing traces for metrics and realized-activation accounting.

struct SubBlockTrace {
  bool expert_mode = false;
  std::vector<DataRoutingPlan> samples;  // one per sample in data/full mode
  ExpertRoutingPlan batch;               // expert mode
};

struct BlockTrace {
  SubBlockTrace attn, mlp;
};

template <typename T>
struct ModelOutput {
  Tensor<T> logits;   // [b*l, vocab]
  Tensor<T> balance;  // scalar, summed over routed sub-blocks
  std::vector<BlockTrace> traces;
};

// ---------------------------------------------------------------------------
// Routed model.

template <typename T>
struct UoeBlock {
  Tensor<T> norm1_gamma, norm1_beta;
  Tensor<T> norm2_gamma, norm2_beta;
  SmhaParams<T> attn;
  UomeParams<T> mlp;
};

template <typename T>
class UoeModel {
 public:
  UoeModelConfig cfg;
  Tensor<T> embedding;  // [vocab, d]
  std::vector<UoeBlock<T>> blocks;
  Tensor<T> final_gamma, final_beta;
  Tensor<T> head;  // [d, vocab]

  static UoeModel init(const UoeModelConfig& cfg) {
    cfg.validate();
    UoeModel m;
    m.cfg = cfg;
    Rng root(cfg.seed);
    const T sd = T(0.02);
    auto draw = [&](const std::string& name, Shape shape) {
      Rng r = root.stream(name);
      return Tensor<T>::normal(std::move(shape), r, sd);
    };
    const std::size_t d = cfg.d, hg = cfg.gate_hidden_width();
    m.embedding = draw("embedding", {cfg.vocab_size, d});
    m.blocks.resize(cfg.layers);
    for (std::size_t bl = 0; bl < cfg.layers; ++bl) {
      const std::string p = "block" + std::to_string(bl) + ".";
      auto& blk = m.blocks[bl];
      blk.norm1_gamma = Tensor<T>::full({d}, T(1));
      blk.norm1_beta = Tensor<T>::zeros({d});
      blk.norm2_gamma = Tensor<T>::full({d}, T(1));
      blk.norm2_beta = Tensor<T>::zeros({d});

      auto wq = draw(p + "attn.wq", {d, cfg.attn_width()});
      auto wk = draw(p + "attn.wk", {d, cfg.attn_width()});
      auto wv = draw(p + "attn.wv", {d, cfg.attn_width()});
      auto wo = draw(p + "attn.wo", {cfg.attn_width(), d});
      blk.attn.experts = partition_attention(wq, wk, wv, wo, cfg.n_a);
      blk.attn.gate.data_b = draw(p + "attn.gate.patch_hidden", {d, hg});
      blk.attn.gate.data_a = draw(p + "attn.gate.patch_out", {hg, cfg.n_a});
      blk.attn.gate.expert_w =
          draw(p + "attn.gate.sample",
               {cfg.pooled_expert_gate ? d : cfg.max_len * d, cfg.n_a});
      blk.attn.gate.pooled_expert_gate = cfg.pooled_expert_gate;
      blk.attn.rope = cfg.rope();
      blk.attn.l_p = cfg.l_p;
      blk.attn.gate_scale_outputs = cfg.gate_scale_outputs;

      auto a1 = draw(p + "mlp.in", {d, cfg.mlp_width()});
      auto a2 = draw(p + "mlp.out", {cfg.mlp_width(), d});
      if (cfg.mlp_bias) {
        blk.mlp.experts =
            partition_mlp(a1, a2, Tensor<T>::zeros({cfg.mlp_width()}),
                          Tensor<T>::zeros({d}), cfg.n_m);
      } else {
        blk.mlp.experts = partition_mlp(a1, a2, cfg.n_m);
      }
      blk.mlp.gate.data_b = draw(p + "mlp.gate.patch_hidden", {d, hg});
      blk.mlp.gate.data_a = draw(p + "mlp.gate.patch_out", {hg, cfg.n_m});
      blk.mlp.gate.expert_w =
          draw(p + "mlp.gate.sample",
               {cfg.pooled_expert_gate ? d : cfg.max_len * d, cfg.n_m});
      blk.mlp.gate.pooled_expert_gate = cfg.pooled_expert_gate;
      blk.mlp.l_p = cfg.l_p;
      blk.mlp.second_act = cfg.mlp_second_activation;
      blk.mlp.gate_scale_outputs = cfg.gate_scale_outputs;
    }
    m.final_gamma = Tensor<T>::full({d}, T(1));
    m.final_beta = Tensor<T>::zeros({d});
    m.head = draw("head", {d, cfg.vocab_size});
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embedding", embedding);
    for (std::size_t bl = 0; bl < blocks.size(); ++bl) {
      const std::string p = "block" + std::to_string(bl) + ".";
      auto& blk = blocks[bl];
      out.emplace_back(p + "norm1.gamma", blk.norm1_gamma);
      out.emplace_back(p + "norm1.beta", blk.norm1_beta);
      out.emplace_back(p + "attn.wq", blk.attn.experts.w_q);
      out.emplace_back(p + "attn.wk", blk.attn.experts.w_k);
      out.emplace_back(p + "attn.wv", blk.attn.experts.w_v);
      out.emplace_back(p + "attn.wo", blk.attn.experts.w_o);
      out.emplace_back(p + "attn.gate.patch_hidden", blk.attn.gate.data_b);
      out.emplace_back(p + "attn.gate.patch_out", blk.attn.gate.data_a);
      out.emplace_back(p + "attn.gate.sample", blk.attn.gate.expert_w);
      out.emplace_back(p + "norm2.gamma", blk.norm2_gamma);
      out.emplace_back(p + "norm2.beta", blk.norm2_beta);
      out.emplace_back(p + "mlp.in", blk.mlp.experts.a_in);
      out.emplace_back(p + "mlp.out", blk.mlp.experts.a_out);
      if (blk.mlp.experts.has_bias()) {
        out.emplace_back(p + "mlp.bias_in", blk.mlp.experts.b_in);
        out.emplace_back(p + "mlp.bias_out", blk.mlp.experts.b_out);
      }
      out.emplace_back(p + "mlp.gate.patch_hidden", blk.mlp.gate.data_b);
      out.emplace_back(p + "mlp.gate.patch_out", blk.mlp.gate.data_a);
      out.emplace_back(p + "mlp.gate.sample", blk.mlp.gate.expert_w);
    }
    out.emplace_back("final_norm.gamma", final_gamma);
    out.emplace_back("final_norm.beta", final_beta);
    out.emplace_back("head", head);
    return out;
  }

  ModelOutput<T> forward(const std::vector<std::size_t>& tokens,
                         std::size_t b) const {
    const std::size_t l = check_tokens(cfg, tokens, b);
    AttentionMask mask;  // causal, no padding
    ModelOutput<T> out;
    out.balance = Tensor<T>::zeros({1});
    auto x = reshape(index_select(embedding, 0, tokens), {b, l, cfg.d});
    for (const auto& blk : blocks) {
      BlockTrace trace;
      x = run_attn(blk, x, mask, b, out.balance, trace.attn);
      x = run_mlp(blk, x, b, out.balance, trace.mlp);
      out.traces.push_back(std::move(trace));
    }
    auto y = maybe_norm(x, final_gamma, final_beta);
    out.logits = matmul(reshape(y, {b * l, cfg.d}), head);
    return out;
  }

 private:
  static std::size_t check_tokens(const UoeModelConfig& cfg,
                                  const std::vector<std::size_t>& tokens,
                                  std::size_t b) {
    if (b == 0 || tokens.empty() || tokens.size() % b != 0)
      throw ShapeError("forward: " + std::to_string(tokens.size()) +
                       " tokens do not split into " + std::to_string(b) +
                       " samples");
    const std::size_t l = tokens.size() / b;
    if (l % cfg.l_p != 0)
      throw ShapeError("forward: sequence length " + std::to_string(l) +
                       " not divisible by patch length " +
                       std::to_string(cfg.l_p));
    for (std::size_t t : tokens)
      if (t >= cfg.vocab_size)
        throw BoundsError("forward: token " + std::to_string(t) +
                          " outside vocabulary of " +
                          std::to_string(cfg.vocab_size));
    return l;
  }

  Tensor<T> maybe_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta) const {
    return cfg.use_layer_norm ? layer_norm(x, gamma, beta) : x;
  }

  Tensor<T> run_attn(const UoeBlock<T>& blk, const Tensor<T>& x,
                     const AttentionMask& mask, std::size_t b,
                     Tensor<T>& balance, SubBlockTrace& trace) const {
    if (cfg.attn_mode == RoutingMode::kExpert) {
      auto h1 = maybe_norm(x, blk.norm1_gamma, blk.norm1_beta);
      auto r = smha_forward_batch(h1, blk.attn, mask, cfg.k_attn, &x);
      balance = add(balance, load_balance_loss_expert(r.gates, r.plan,
                                                      T(cfg.alpha)));
      trace.expert_mode = true;
      trace.batch = r.plan;
      return r.u;
    }
    const std::size_t k =
        cfg.attn_mode == RoutingMode::kFull ? cfg.n_a : cfg.k_attn;
    std::vector<Tensor<T>> outs;
    outs.reserve(b);
    auto bal = Tensor<T>::zeros({1});
    for (std::size_t s = 0; s < b; ++s) {
      auto xs = select_batch(x, s);
      auto h1 = maybe_norm(xs, blk.norm1_gamma, blk.norm1_beta);
      auto r = smha_forward(h1, blk.attn, mask, k, nullptr, &xs);
      bal = add(bal, load_balance_loss_data(r.gates, r.plan, T(cfg.alpha)));
      trace.samples.push_back(std::move(r.plan));
      outs.push_back(r.u);
    }
    balance = add(balance, scale(bal, T(1) / static_cast<T>(b)));
    return stack_batch(outs);
  }

  Tensor<T> run_mlp(const UoeBlock<T>& blk, const Tensor<T>& x, std::size_t b,
                    Tensor<T>& balance, SubBlockTrace& trace) const {
    if (cfg.mlp_mode == RoutingMode::kExpert) {
      auto h2 = maybe_norm(x, blk.norm2_gamma, blk.norm2_beta);
      auto r = uome_forward_batch(h2, blk.mlp, cfg.k_mlp, &x);
      balance = add(balance, load_balance_loss_expert(r.gates, r.plan,
                                                      T(cfg.alpha)));
      trace.expert_mode = true;
      trace.batch = r.plan;
      return r.u;
    }
    const std::size_t k =
        cfg.mlp_mode == RoutingMode::kFull ? cfg.n_m : cfg.k_mlp;
    std::vector<Tensor<T>> outs;
    outs.reserve(b);
    auto bal = Tensor<T>::zeros({1});
    for (std::size_t s = 0; s < b; ++s) {
      auto xs = select_batch(x, s);
      auto h2 = maybe_norm(xs, blk.norm2_gamma, blk.norm2_beta);
      auto r = uome_forward(h2, blk.mlp, k, nullptr, &xs);
      bal = add(bal, load_balance_loss_data(r.gates, r.plan, T(cfg.alpha)));
      trace.samples.push_back(std::move(r.plan));
      outs.push_back(r.u);
    }
    balance = add(balance, scale(bal, T(1) / static_cast<T>(b)));
    return stack_batch(outs);
  }
};

// ---------------------------------------------------------------------------
// Dense twin: identical parameter streams, merged weights, plain pre-norm
// transformer forward. Its trajectory is the reference for full activation.

template <typename T>
struct DenseBlock {
  Tensor<T> norm1_gamma, norm1_beta;
  Tensor<T> norm2_gamma, norm2_beta;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> a1, a2, b1, b2;
};

template <typename T>
class DenseModel {
 public:
  UoeModelConfig cfg;
  Tensor<T> embedding;
  std::vector<DenseBlock<T>> blocks;
  Tensor<T> final_gamma, final_beta;
  Tensor<T> head;

  static DenseModel init(const UoeModelConfig& cfg) {
    cfg.validate();
    DenseModel m;
    m.cfg = cfg;
    Rng root(cfg.seed);
    const T sd = T(0.02);
    auto draw = [&](const std::string& name, Shape shape) {
      Rng r = root.stream(name);
      return Tensor<T>::normal(std::move(shape), r, sd);
    };
    const std::size_t d = cfg.d;
    m.embedding = draw("embedding", {cfg.vocab_size, d});
    m.blocks.resize(cfg.layers);
    for (std::size_t bl = 0; bl < cfg.layers; ++bl) {
      const std::string p = "block" + std::to_string(bl) + ".";
      auto& blk = m.blocks[bl];
      blk.norm1_gamma = Tensor<T>::full({d}, T(1));
      blk.norm1_beta = Tensor<T>::zeros({d});
      blk.norm2_gamma = Tensor<T>::full({d}, T(1));
      blk.norm2_beta = Tensor<T>::zeros({d});
      blk.wq = draw(p + "attn.wq", {d, cfg.attn_width()});
      blk.wk = draw(p + "attn.wk", {d, cfg.attn_width()});
      blk.wv = draw(p + "attn.wv", {d, cfg.attn_width()});
      blk.wo = draw(p + "attn.wo", {cfg.attn_width(), d});
      blk.a1 = draw(p + "mlp.in", {d, cfg.mlp_width()});
      blk.a2 = draw(p + "mlp.out", {cfg.mlp_width(), d});
      if (cfg.mlp_bias) {
        blk.b1 = Tensor<T>::zeros({cfg.mlp_width()});
        blk.b2 = Tensor<T>::zeros({d});
      }
    }
    m.final_gamma = Tensor<T>::full({d}, T(1));
    m.final_beta = Tensor<T>::zeros({d});
    m.head = draw("head", {d, cfg.vocab_size});
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embedding", embedding);
    for (std::size_t bl = 0; bl < blocks.size(); ++bl) {
      const std::string p = "block" + std::to_string(bl) + ".";
      auto& blk = blocks[bl];
      out.emplace_back(p + "norm1.gamma", blk.norm1_gamma);
      out.emplace_back(p + "norm1.beta", blk.norm1_beta);
      out.emplace_back(p + "attn.wq", blk.wq);
      out.emplace_back(p + "attn.wk", blk.wk);
      out.emplace_back(p + "attn.wv", blk.wv);
      out.emplace_back(p + "attn.wo", blk.wo);
      out.emplace_back(p + "norm2.gamma", blk.norm2_gamma);
      out.emplace_back(p + "norm2.beta", blk.norm2_beta);
      out.emplace_back(p + "mlp.in", blk.a1);
      out.emplace_back(p + "mlp.out", blk.a2);
      if (blk.b1.defined()) {
        out.emplace_back(p + "mlp.bias_in", blk.b1);
        out.emplace_back(p + "mlp.bias_out", blk.b2);
      }
    }
    out.emplace_back("final_norm.gamma", final_gamma);
    out.emplace_back("final_norm.beta", final_beta);
    out.emplace_back("head", head);
    return out;
  }

  ModelOutput<T> forward(const std::vector<std::size_t>& tokens,
                         std::size_t b) const {
    if (b == 0 || tokens.empty() || tokens.size() % b != 0)
      throw ShapeError("forward: " + std::to_string(tokens.size()) +
                       " tokens do not split into " + std::to_string(b) +
                       " samples");
    const std::size_t l = tokens.size() / b, d = cfg.d;
    const RopeConfig rope = cfg.rope();
    std::vector<std::size_t> pos(l);
    for (std::size_t i = 0; i < l; ++i) pos[i] = i;
    const auto allowed = build_allowed_mask(cfg.n_a, l, /*causal=*/true, {});

    ModelOutput<T> out;
    out.balance = Tensor<T>::zeros({1});
    auto x = reshape(index_select(embedding, 0, tokens), {b, l, d});
    for (const auto& blk : blocks) {
      std::vector<Tensor<T>> outs;
      outs.reserve(b);
      for (std::size_t s = 0; s < b; ++s) {
        auto xs = select_batch(x, s);
        auto h1 = maybe_norm(xs, blk.norm1_gamma, blk.norm1_beta);
        auto split = [&](const Tensor<T>& w) {
          return permute3(reshape(matmul(h1, w), {l, cfg.n_a, cfg.d_h}), 1, 0,
                          2);  // [n_a, l, d_h]
        };
        auto q = partial_rope(split(blk.wq), rope.d_qc, rope.d_qr, pos,
                              rope.theta_base);
        auto kk = partial_rope(split(blk.wk), rope.d_kc, rope.d_kr, pos,
                               rope.theta_base);
        auto o = scaled_dot_attention(q, kk, split(blk.wv), allowed);
        auto merged = reshape(permute3(o, 1, 0, 2), {l, cfg.attn_width()});
        auto u = add(xs, matmul(merged, blk.wo));
        auto h2 = maybe_norm(u, blk.norm2_gamma, blk.norm2_beta);
        auto mlp_out = dense_mlp_forward(
            h2, blk.a1, blk.a2, cfg.mlp_second_activation,
            blk.b1.defined() ? &blk.b1 : nullptr,
            blk.b2.defined() ? &blk.b2 : nullptr);
        outs.push_back(add(u, mlp_out));
      }
      x = stack_batch(outs);
    }
    auto y = maybe_norm(x, final_gamma, final_beta);
    out.logits = matmul(reshape(y, {b * l, d}), head);
    return out;
  }

 private:
  Tensor<T> maybe_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta) const {
    return cfg.use_layer_norm ? layer_norm(x, gamma, beta) : x;
  }
};

}  // namespace uoe
