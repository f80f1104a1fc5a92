#pragma once

// Named self-check registry behind `uoe verify`: every library invariant gets
// a fast, seeded re-check with a one-line verdict. Checks are independent;
// a substring filter selects a subset. The partition-corruption switch exists
// for the mutation fixture in the test suite: it must make exactly the
// losslessness check fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uoe/checkpoint.hpp"
#include "uoe/common.hpp"
#include "uoe/config_file.hpp"
#include "uoe/corpus.hpp"
#include "uoe/decomposition.hpp"
#include "uoe/flops.hpp"
#include "uoe/model.hpp"
#include "uoe/rng.hpp"
#include "uoe/routing.hpp"
#include "uoe/strategies.hpp"
#include "uoe/tensor.hpp"
#include "uoe/train.hpp"

namespace uoe {

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::string filter;  // substring match on check names; empty = all
  bool inject_partition_off_by_one = false;  // test fixture only
};

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double ms = 0.0;
};

namespace verify_detail {

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
  void note(const std::string& what) {
    if (pass) detail = what;
  }
};

// Highest value first, ties to the lowest index -- mirror used as the oracle.
template <typename T>
std::vector<std::size_t> brute_top_k(const std::vector<T>& v, std::size_t k) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

template <typename T>
double max_abs_gap(const std::vector<T>& a, const std::vector<T>& b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(double(a[i]) - double(b[i])));
  return mx;
}

template <typename T>
double max_rel_gap(const std::vector<T>& a, const std::vector<T>& b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(double(a[i]) - double(b[i]));
    mx = std::max(mx, diff / (1.0 + std::abs(double(b[i]))));
  }
  return mx;
}

inline UoeModelConfig tiny_config(std::size_t n_a, std::size_t n_m,
                                  RoutingMode mode, std::uint64_t seed) {
  UoeModelConfig cfg;
  cfg.layers = 2;
  cfg.d = 16;
  cfg.n_a = n_a;
  cfg.d_h = 16 / n_a;
  cfg.n_m = n_m;
  cfg.d_e = 32 / n_m;
  cfg.l_p = 4;
  cfg.k_attn = n_a;
  cfg.k_mlp = n_m;
  cfg.attn_mode = mode;
  cfg.mlp_mode = mode;
  cfg.vocab_size = 32;
  cfg.max_len = 16;
  cfg.alpha = 0.01;
  cfg.seed = seed;
  return cfg;
}

inline std::vector<std::size_t> random_tokens(Rng& rng, std::size_t count,
                                              std::size_t vocab) {
  std::vector<std::size_t> t(count);
  for (auto& x : t) x = rng.next_index(vocab);
  return t;
}

}  // namespace verify_detail

inline std::vector<CheckResult> run_verify_checks(const VerifyOptions& opt) {
  using namespace verify_detail;
  std::vector<CheckResult> results;
  Rng root(opt.seed);

  auto run = [&](const std::string& name,
                 const std::function<void(Outcome&, Rng&)>& body) {
    if (!opt.filter.empty() && name.find(opt.filter) == std::string::npos)
      return;
    CheckResult r;
    r.name = name;
    Rng rng = root.stream(name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Outcome out;
      body(out, rng);
      r.pass = out.pass;
      r.detail = out.detail;
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.ms = std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - t0)
               .count();
    results.push_back(std::move(r));
  };

  // ---- tensor core -------------------------------------------------------

  run("tensor/adjoint-gather-scatter", [](Outcome& out, Rng& rng) {
    auto x = Tensor<double>::uniform({7, 5}, rng, -1.0, 1.0);
    auto y = Tensor<double>::uniform({4, 5}, rng, -1.0, 1.0);
    const std::vector<std::size_t> idx{6, 2, 5, 0};
    const double lhs = sum_all(mul(index_select(x, 0, idx), y)).item();
    const double rhs =
        sum_all(mul(x, index_add(Tensor<double>::zeros({7, 5}), 0, idx, y)))
            .item();
    const double gap = std::abs(lhs - rhs);
    out.require(gap <= 1e-12, "adjoint identity gap " + fmt(gap));
    out.note("gap " + fmt(gap));
  });

  run("tensor/f32-f64-agreement", [](Outcome& out, Rng& rng) {
    std::vector<double> xv(6 * 8), wv(8 * 8);
    for (auto& v : xv) v = rng.next_uniform(-1.0, 1.0);
    for (auto& v : wv) v = rng.next_uniform(-1.0, 1.0);
    auto chain64 = [&] {
      auto x = Tensor<double>::from_data({6, 8}, xv);
      auto w = Tensor<double>::from_data({8, 8}, wv);
      return layer_norm(silu(matmul(x, w)), Tensor<double>::full({8}, 1.0),
                        Tensor<double>::zeros({8}))
          .data();
    }();
    auto chain32 = [&] {
      std::vector<float> xf(xv.begin(), xv.end()), wf(wv.begin(), wv.end());
      auto x = Tensor<float>::from_data({6, 8}, xf);
      auto w = Tensor<float>::from_data({8, 8}, wf);
      return layer_norm(silu(matmul(x, w)), Tensor<float>::full({8}, 1.0f),
                        Tensor<float>::zeros({8}))
          .data();
    }();
    double mx = 0.0;
    for (std::size_t i = 0; i < chain64.size(); ++i)
      mx = std::max(mx, std::abs(chain64[i] - double(chain32[i])) /
                            (1.0 + std::abs(chain64[i])));
    out.require(mx <= 1e-4, "f32 deviates from f64 by " + fmt(mx));
    out.note("max rel gap " + fmt(mx));
  });

  run("tensor/grad-finite-difference", [](Outcome& out, Rng& rng) {
    // Composite graph touching matmul, softmax, norm and gather.
    std::vector<double> xv(5 * 6), wv(6 * 4), pv(4 * 6), qv(3 * 6);
    for (auto& v : xv) v = rng.next_uniform(-1.0, 1.0);
    for (auto& v : wv) v = rng.next_uniform(-1.0, 1.0);
    for (auto& v : pv) v = rng.next_uniform(-1.0, 1.0);
    for (auto& v : qv) v = rng.next_uniform(-1.0, 1.0);
    const std::vector<std::size_t> idx{3, 0, 4};
    auto norm_of = [](const Tensor<double>& t) {
      return layer_norm(t, Tensor<double>::full({6}, 1.0),
                        Tensor<double>::zeros({6}));
    };
    auto loss_of = [&](const std::vector<double>& x_now) {
      auto x = Tensor<double>::from_data({5, 6}, x_now);
      auto w = Tensor<double>::from_data({6, 4}, wv);
      auto probe = Tensor<double>::from_data({4, 6}, pv);
      auto weights = Tensor<double>::from_data({3, 6}, qv);
      auto h = softmax(matmul(index_select(norm_of(x), 0, idx), w), 1);
      return sum_all(mul(matmul(h, probe), weights));
    };
    auto x = Tensor<double>::from_data({5, 6}, xv).set_requires_grad(true);
    auto w = Tensor<double>::from_data({6, 4}, wv);
    auto probe = Tensor<double>::from_data({4, 6}, pv);
    auto weights = Tensor<double>::from_data({3, 6}, qv);
    auto h = softmax(matmul(index_select(norm_of(x), 0, idx), w), 1);
    auto loss = sum_all(mul(matmul(h, probe), weights));
    backward(loss);
    const auto grad = x.grad();
    const double hstep = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < xv.size(); i += 7) {
      auto lo = xv, hi = xv;
      lo[i] -= hstep;
      hi[i] += hstep;
      const double fd =
          (loss_of(hi).item() - loss_of(lo).item()) / (2.0 * hstep);
      const double rel =
          std::abs(grad[i] - fd) / std::max(1e-8, std::abs(fd));
      worst = std::max(worst, rel);
    }
    out.require(worst <= 1e-4, "gradient rel error " + fmt(worst));
    out.note("max rel error " + fmt(worst));
  });

  run("tensor/determinism", [&](Outcome& out, Rng&) {
    auto once = [&](std::uint64_t s) {
      Rng r(s);
      auto x = Tensor<double>::normal({4, 6}, r, 1.0).set_requires_grad(true);
      auto w = Tensor<double>::normal({6, 3}, r, 1.0);
      auto loss = sum_all(silu(matmul(x, w)));
      backward(loss);
      auto g = x.grad();
      auto v = loss.item();
      return std::make_pair(v, g);
    };
    auto [v1, g1] = once(opt.seed + 17);
    auto [v2, g2] = once(opt.seed + 17);
    out.require(v1 == v2 && g1 == g2, "same seed produced different results");
    out.note("bit-identical outputs and gradients");
  });

  // ---- decomposition -----------------------------------------------------

  run("decomposition/mlp-losslessness", [](Outcome& out, Rng& rng) {
    const std::size_t d = 8, de = 16, l = 6;
    double worst64 = 0.0, worst32 = 0.0;
    for (std::size_t n : {1, 2, 4, 8}) {
      auto a1 = Tensor<double>::uniform({d, de}, rng, -1.0, 1.0);
      auto a2 = Tensor<double>::uniform({de, d}, rng, -1.0, 1.0);
      auto x = Tensor<double>::uniform({l, d}, rng, -1.0, 1.0);
      auto dense = dense_mlp_forward(x, a1, a2);
      auto uni = expert_union_mlp_forward(x, partition_mlp(a1, a2, n));
      worst64 = std::max(worst64, max_abs_gap(uni.data(), dense.data()));

      std::vector<float> a1f(a1.data().begin(), a1.data().end());
      std::vector<float> a2f(a2.data().begin(), a2.data().end());
      std::vector<float> xf(x.data().begin(), x.data().end());
      auto a1s = Tensor<float>::from_data({d, de}, a1f);
      auto a2s = Tensor<float>::from_data({de, d}, a2f);
      auto xs = Tensor<float>::from_data({l, d}, xf);
      auto denses = dense_mlp_forward(xs, a1s, a2s);
      auto unis = expert_union_mlp_forward(xs, partition_mlp(a1s, a2s, n));
      worst32 = std::max(worst32, max_rel_gap(unis.data(), denses.data()));
    }
    out.require(worst64 <= 1e-12, "f64 union gap " + fmt(worst64));
    out.require(worst32 <= 1e-5, "f32 union rel gap " + fmt(worst32));
    out.note("f64 gap " + fmt(worst64) + ", f32 rel gap " + fmt(worst32));
  });

  run("decomposition/partition-roundtrip", [](Outcome& out, Rng& rng) {
    const std::size_t d = 8, de = 16, w = 8;
    auto a1 = Tensor<double>::uniform({d, de}, rng, -1.0, 1.0);
    auto a2 = Tensor<double>::uniform({de, d}, rng, -1.0, 1.0);
    auto [r1, r2] = reconstruct_mlp(partition_mlp(a1, a2, 4));
    out.require(r1.data() == a1.data() && r2.data() == a2.data(),
                "MLP partition round-trip is not bit-identical");
    auto wq = Tensor<double>::uniform({d, w}, rng, -1.0, 1.0);
    auto wk = Tensor<double>::uniform({d, w}, rng, -1.0, 1.0);
    auto wv = Tensor<double>::uniform({d, w}, rng, -1.0, 1.0);
    auto wo = Tensor<double>::uniform({w, d}, rng, -1.0, 1.0);
    auto rec = reconstruct_attention(partition_attention(wq, wk, wv, wo, 4));
    out.require(rec.wq.data() == wq.data() && rec.wk.data() == wk.data() &&
                    rec.wv.data() == wv.data() && rec.wo.data() == wo.data(),
                "attention partition round-trip is not bit-identical");
    out.note("bit-identical both paths");
  });

  run("decomposition/order-independence", [](Outcome& out, Rng& rng) {
    const std::size_t d = 8, de = 16, l = 5, n = 4;
    auto a1 = Tensor<double>::uniform({d, de}, rng, -1.0, 1.0);
    auto a2 = Tensor<double>::uniform({de, d}, rng, -1.0, 1.0);
    auto x = Tensor<double>::uniform({l, d}, rng, -1.0, 1.0);
    auto forward_order = expert_union_mlp_forward(x, partition_mlp(a1, a2, n));
    // Reverse the expert block order inside both factors: same union sum,
    // different accumulation order.
    const std::size_t we = de / n;
    std::vector<double> p1(d * de), p2(de * d);
    for (std::size_t e = 0; e < n; ++e) {
      const std::size_t src = n - 1 - e;
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c0 = 0; c0 < we; ++c0)
          p1[r * de + e * we + c0] = a1.data()[r * de + src * we + c0];
      for (std::size_t r = 0; r < we; ++r)
        for (std::size_t c0 = 0; c0 < d; ++c0)
          p2[(e * we + r) * d + c0] = a2.data()[(src * we + r) * d + c0];
    }
    auto swapped = expert_union_mlp_forward(
        x, partition_mlp(Tensor<double>::from_data({d, de}, p1),
                         Tensor<double>::from_data({de, d}, p2), n));
    const double gap = max_abs_gap(forward_order.data(), swapped.data());
    out.require(gap <= 1e-12, "reassociation gap " + fmt(gap));
    out.note("gap " + fmt(gap));
  });

  // ---- routing -----------------------------------------------------------

  run("routing/data-plan-brute-force", [](Outcome& out, Rng&) {
    const double levels[3] = {0.1, 0.5, 0.9};
    for (std::size_t n : {2, 3})
      for (std::size_t m : {2, 3}) {
        const std::size_t cells = n * m;
        std::vector<std::size_t> digit(cells, 0);
        for (std::size_t code = 0;; ++code) {
          std::vector<double> g(cells);
          for (std::size_t i = 0; i < cells; ++i) g[i] = levels[digit[i]];
          auto gt = Tensor<double>::from_data({n, m}, g);
          for (std::size_t k = 1; k <= n; ++k) {
            const auto plan = plan_data_selection(gt, k);
            // Oracle: stage-1 per patch column, stage-2 per expert row.
            std::vector<std::size_t> load(n, 0);
            for (std::size_t j = 0; j < m; ++j) {
              std::vector<double> col(n);
              for (std::size_t i = 0; i < n; ++i) col[i] = g[i * m + j];
              const auto picks = brute_top_k(col, k);
              out.require(plan.id_prime[j] == picks,
                          "stage-1 mismatch at patch " + std::to_string(j));
              for (std::size_t i : picks) ++load[i];
            }
            const std::size_t c =
                *std::max_element(load.begin(), load.end());
            out.require(plan.c == c, "capacity mismatch");
            for (std::size_t i = 0; i < n; ++i) {
              std::vector<double> row(g.begin() + i * m,
                                      g.begin() + (i + 1) * m);
              auto picks = brute_top_k(row, c);
              std::sort(picks.begin(), picks.end());
              out.require(plan.id[i] == picks,
                          "stage-2 mismatch at expert " + std::to_string(i));
            }
            if (!out.pass) return;
          }
          // Next gate assignment in the 3-level grid.
          std::size_t pos = 0;
          while (pos < cells && ++digit[pos] == 3) digit[pos++] = 0;
          if (pos == cells) break;
        }
      }
    out.note("exhaustive 3-level grid, n,m <= 3, all k");
  });

  run("routing/expert-plan-brute-force", [](Outcome& out, Rng&) {
    const double levels[3] = {0.2, 0.5, 0.8};
    for (std::size_t b : {2, 3})
      for (std::size_t n : {2, 3}) {
        const std::size_t cells = b * n;
        std::vector<std::size_t> digit(cells, 0);
        for (std::size_t code = 0;; ++code) {
          std::vector<double> g(cells);
          for (std::size_t i = 0; i < cells; ++i) g[i] = levels[digit[i]];
          auto gt = Tensor<double>::from_data({b, n}, g);
          for (std::size_t k = 1; k <= n; ++k) {
            const auto plan = plan_expert_selection(gt, k);
            std::vector<std::vector<std::size_t>> lists(n);
            for (std::size_t j = 0; j < b; ++j) {
              std::vector<double> row(g.begin() + j * n,
                                      g.begin() + (j + 1) * n);
              for (std::size_t i : brute_top_k(row, k))
                lists[i].push_back(j);
            }
            std::size_t total = 0;
            for (std::size_t i = 0; i < n; ++i) {
              out.require(plan.assignments[i] == lists[i],
                          "assignment mismatch at expert " +
                              std::to_string(i));
              out.require(plan.counts[i] == lists[i].size(),
                          "count mismatch");
              total += plan.counts[i];
            }
            out.require(total == b * k, "fan-out total != b*k");
            if (!out.pass) return;
          }
          std::size_t pos = 0;
          while (pos < cells && ++digit[pos] == 3) digit[pos++] = 0;
          if (pos == cells) break;
        }
      }
    out.note("exhaustive 3-level grid, b,n <= 3, all k");
  });

  run("routing/capacity-bounds", [](Outcome& out, Rng& rng) {
    for (std::size_t trial = 0; trial < 50 && out.pass; ++trial) {
      const std::size_t n = 2 + rng.next_index(4);
      const std::size_t m = 2 + rng.next_index(6);
      const std::size_t k = 1 + rng.next_index(n);
      auto g = Tensor<double>::uniform({n, m}, rng, 0.0, 1.0);
      const auto plan = plan_data_selection(g, k);
      const std::size_t lower = (m * k + n - 1) / n;
      out.require(plan.c >= lower && plan.c <= m,
                  "capacity " + std::to_string(plan.c) + " outside [" +
                      std::to_string(lower) + ", " + std::to_string(m) + "]");
      for (const auto& row : plan.id)
        out.require(row.size() == plan.c, "expert list size != c");
      for (std::size_t j = 0; j < m; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (g.data()[i * m + j] > g.data()[best * m + j]) best = i;
        const auto& picks = plan.id_prime[j];
        out.require(std::find(picks.begin(), picks.end(), best) !=
                        picks.end(),
                    "highest-gate expert missing from stage-1 picks");
      }
    }
    out.note("pigeonhole bounds and argmax retention hold");
  });

  run("routing/scatter-adjoint", [](Outcome& out, Rng& rng) {
    const std::size_t n = 3, m = 5, l_p = 2, d = 4;
    auto g = Tensor<double>::uniform({n, m}, rng, 0.0, 1.0);
    const auto plan = plan_data_selection(g, 2);
    auto xp = Tensor<double>::uniform({m, l_p, d}, rng, -1.0, 1.0);
    auto gathered = gather_patches(xp, plan);
    auto y = Tensor<double>::uniform(gathered.shape(), rng, -1.0, 1.0);
    auto scattered =
        scatter_add_patches(Tensor<double>::zeros({m, l_p, d}), y, plan);
    // Explicit double sum over (expert, slot).
    std::vector<double> manual(m * l_p * d, 0.0);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t t = 0; t < plan.c; ++t) {
        const std::size_t patch = plan.id[a][t];
        for (std::size_t e = 0; e < l_p * d; ++e)
          manual[patch * l_p * d + e] +=
              y.data()[((a * plan.c + t) * l_p * d) + e];
      }
    const double gap = max_abs_gap(scattered.data(), manual);
    out.require(gap <= 1e-12, "scatter vs double sum gap " + fmt(gap));
    // Gather must pull the exact rows.
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t t = 0; t < plan.c; ++t)
        for (std::size_t e = 0; e < l_p * d; ++e)
          out.require(gathered.data()[((a * plan.c + t) * l_p * d) + e] ==
                          xp.data()[plan.id[a][t] * l_p * d + e],
                      "gather pulled a wrong row");
    out.note("gap " + fmt(gap));
  });

  run("routing/single-pass-execution", [](Outcome& out, Rng& rng) {
    const auto cfg = tiny_config(2, 2, RoutingMode::kData, 11);
    auto model = UoeModel<double>::init(cfg);
    auto x = Tensor<double>::uniform({cfg.max_len, cfg.d}, rng, -1.0, 1.0);
    auto& blk = model.blocks.front();
    op_counters().reset();
    smha_forward(x, blk.attn, AttentionMask{}, cfg.k_attn);
    out.require(op_counters().gather_passes == 1,
                "attention used " +
                    std::to_string(op_counters().gather_passes) +
                    " gather passes");
    out.require(op_counters().scatter_passes == 1,
                "attention used " +
                    std::to_string(op_counters().scatter_passes) +
                    " scatter passes");
    op_counters().reset();
    uome_forward(x, blk.mlp, cfg.k_mlp);
    out.require(op_counters().gather_passes == 1 &&
                    op_counters().scatter_passes == 1,
                "MLP pass count is not one gather + one scatter");
    op_counters().reset();
    out.note("one gather and one scatter per routed sub-block");
  });

  // ---- model equivalence and gradients -----------------------------------

  run("model/losslessness", [&](Outcome& out, Rng& rng) {
    double worst64 = 0.0, worst32 = 0.0;
    for (std::size_t n_a : {1, 2, 4, 8})
      for (std::size_t n_m : {1, 2, 4, 8}) {
        auto cfg = tiny_config(n_a, n_m, RoutingMode::kFull, 100 + n_a * 10 + n_m);
        auto model = UoeModel<double>::init(cfg);
        auto dense = DenseModel<double>::init(cfg);
        if (opt.inject_partition_off_by_one && n_a >= 2) {
          // Shift one boundary element between adjacent attention experts.
          auto& wq = model.blocks[0].attn.experts.w_q.mutable_data();
          std::swap(wq[cfg.d_h - 1], wq[cfg.d * cfg.d_h]);
        }
        const auto tokens =
            random_tokens(rng, 2 * cfg.max_len, cfg.vocab_size);
        const auto got = model.forward(tokens, 2);
        const auto want = dense.forward(tokens, 2);
        worst64 =
            std::max(worst64, max_abs_gap(got.logits.data(),
                                          want.logits.data()));
        if (n_a == n_m && n_a <= 4) {
          auto m32 = UoeModel<float>::init(cfg);
          auto d32 = DenseModel<float>::init(cfg);
          worst32 = std::max(
              worst32, max_rel_gap(m32.forward(tokens, 2).logits.data(),
                                   d32.forward(tokens, 2).logits.data()));
        }
      }
    out.require(worst64 <= 1e-10, "f64 union-vs-dense gap " + fmt(worst64));
    out.require(worst32 <= 1e-5, "f32 union-vs-dense rel gap " + fmt(worst32));
    out.note("f64 gap " + fmt(worst64) + ", f32 rel gap " + fmt(worst32));
  });

  run("model/data-full-agreement", [](Outcome& out, Rng& rng) {
    // Data selection with k = n covers everything and must equal full mode.
    auto cfg = tiny_config(4, 4, RoutingMode::kData, 23);
    auto model = UoeModel<double>::init(cfg);
    const auto tokens = random_tokens(rng, 2 * cfg.max_len, cfg.vocab_size);
    const auto routed = model.forward(tokens, 2);
    auto cfg_full = cfg;
    cfg_full.attn_mode = RoutingMode::kFull;
    cfg_full.mlp_mode = RoutingMode::kFull;
    auto full = UoeModel<double>::init(cfg_full);
    const auto want = full.forward(tokens, 2);
    out.require(routed.logits.data() == want.logits.data(),
                "k = n data routing differs from full mode");
    out.note("bit-identical logits");
  });

  run("model/unselected-expert-independence", [](Outcome& out, Rng& rng) {
    auto cfg = tiny_config(2, 4, RoutingMode::kExpert, 31);
    cfg.k_attn = 2;  // full attention fan-out; probe the MLP experts
    cfg.k_mlp = 2;
    auto model = UoeModel<double>::init(cfg);
    const std::size_t b = 3;
    const auto tokens = random_tokens(rng, b * cfg.max_len, cfg.vocab_size);
    const auto before = model.forward(tokens, b);
    const auto& plan = before.traces[0].mlp.batch;
    // Find a (sample, expert) pair where the expert was not selected.
    std::size_t sample = 0, expert = 0;
    bool found = false;
    for (std::size_t j = 0; j < b && !found; ++j)
      for (std::size_t i = 0; i < cfg.n_m && !found; ++i) {
        const auto& lst = plan.assignments[i];
        if (std::find(lst.begin(), lst.end(), j) == lst.end()) {
          sample = j;
          expert = i;
          found = true;
        }
      }
    out.require(found, "every expert took every sample; cannot probe");
    if (!found) return;
    auto& a_in = model.blocks[0].mlp.experts.a_in.mutable_data();
    const std::size_t slice = cfg.d * cfg.d_e;
    for (std::size_t i = 0; i < slice; ++i) a_in[expert * slice + i] += 0.75;
    const auto after = model.forward(tokens, b);
    const std::size_t row_len = cfg.vocab_size;
    bool unchanged = true;
    for (std::size_t t = 0; t < cfg.max_len; ++t) {
      const std::size_t row = sample * cfg.max_len + t;
      for (std::size_t v = 0; v < row_len; ++v)
        unchanged &= before.logits.data()[row * row_len + v] ==
                     after.logits.data()[row * row_len + v];
    }
    out.require(unchanged,
                "perturbing an unselected expert changed sample " +
                    std::to_string(sample));
    out.note("sample " + std::to_string(sample) +
             " bit-unchanged after perturbing expert " +
             std::to_string(expert));
  });

  run("model/gradcheck", [](Outcome& out, Rng& rng) {
    double worst = 0.0;
    for (RoutingMode mode : {RoutingMode::kData, RoutingMode::kExpert}) {
      UoeModelConfig cfg;
      cfg.layers = 1;
      cfg.d = 8;
      cfg.n_a = 2;
      cfg.d_h = 4;
      cfg.n_m = 2;
      cfg.d_e = 8;
      cfg.l_p = 4;
      cfg.k_attn = 1;
      cfg.k_mlp = 1;
      cfg.attn_mode = mode;
      cfg.mlp_mode = mode;
      cfg.vocab_size = 16;
      cfg.max_len = 8;
      cfg.alpha = 0.01;
      cfg.seed = 7 + static_cast<std::uint64_t>(mode);
      auto model = UoeModel<double>::init(cfg);
      auto params = model.parameters();
      for (auto& [name, t] : params) t.set_requires_grad(true);
      const std::size_t b = 2;
      const auto tokens = random_tokens(rng, b * cfg.max_len, cfg.vocab_size);
      const auto targets =
          random_tokens(rng, b * cfg.max_len, cfg.vocab_size);
      auto loss_value = [&] {
        auto o = model.forward(tokens, b);
        auto [nll, ppl] = cross_entropy_and_perplexity(o.logits, targets);
        return add(nll, o.balance);
      };
      auto loss = loss_value();
      backward(loss);
      const double h = 1e-4;
      for (std::size_t pi = 0; pi < params.size(); pi += 3) {
        auto& [name, t] = params[pi];
        auto& vals = t.mutable_data();
        for (std::size_t e = 0; e < vals.size();
             e += std::max<std::size_t>(1, vals.size() / 2)) {
          const double keep = vals[e];
          vals[e] = keep + h;
          const double up = loss_value().item();
          vals[e] = keep - h;
          const double dn = loss_value().item();
          vals[e] = keep;
          const double fd = (up - dn) / (2.0 * h);
          const double rel = std::abs(t.grad()[e] - fd) /
                             std::max(1e-6, std::abs(fd));
          worst = std::max(worst, rel);
        }
      }
      for (auto& [name, t] : params) t.zero_grad();
    }
    out.require(worst <= 1e-4, "model gradient rel error " + fmt(worst));
    out.note("max rel error " + fmt(worst));
  });

  // ---- attention masks and rotary terms ----------------------------------

  run("attention/causal-submask", [](Outcome& out, Rng& rng) {
    for (std::size_t l : {8, 32, 128}) {
      const auto full = shared_causal_submask(l);
      for (std::size_t trial = 0; trial < 30 && out.pass; ++trial) {
        const std::size_t la = 2 + rng.next_index(l - 2);
        std::vector<std::size_t> pool(l);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i = 0; i < la; ++i) {
          const std::size_t j = i + rng.next_index(pool.size() - i);
          std::swap(pool[i], pool[j]);
        }
        std::vector<std::size_t> sel(pool.begin(), pool.begin() + la);
        std::sort(sel.begin(), sel.end());
        const auto tril = shared_causal_submask(la);
        for (std::size_t i = 0; i < la; ++i)
          for (std::size_t j = 0; j < la; ++j)
            out.require(full[sel[i] * l + sel[j]] == tril[i * la + j],
                        "submask differs from tril at l=" +
                            std::to_string(l));
      }
    }
    out.note("30 random index sets per l in {8,32,128}, exact");
  });

  run("attention/softmax-rows", [](Outcome& out, Rng& rng) {
    const std::size_t batch = 3, L = 12;
    auto scores = Tensor<double>::uniform({batch, L, L}, rng, -2.0, 2.0);
    const auto allowed = build_allowed_mask(batch, L, true, {});
    auto probs = masked_softmax_last(scores, allowed);
    double worst = 0.0;
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < L; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          const double pv = probs.data()[(bi * L + i) * L + j];
          sum += pv;
          if (!allowed[(bi * L + i) * L + j])
            out.require(pv == 0.0, "masked key received weight");
        }
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    out.require(worst <= 1e-6, "attention row sum off by " + fmt(worst));
    out.note("row sums within " + fmt(worst));
  });

  run("attention/rope-relative-shift", [](Outcome& out, Rng& rng) {
    const std::size_t dr = 8;
    std::vector<double> qv(dr), kv(dr);
    for (auto& v : qv) v = rng.next_uniform(-1.0, 1.0);
    for (auto& v : kv) v = rng.next_uniform(-1.0, 1.0);
    auto dot_at = [&](std::size_t pq, std::size_t pk) {
      auto q = apply_rope(Tensor<double>::from_data({1, dr}, qv), {pq},
                          10000.0);
      auto k = apply_rope(Tensor<double>::from_data({1, dr}, kv), {pk},
                          10000.0);
      double s = 0.0;
      for (std::size_t i = 0; i < dr; ++i)
        s += q.data()[i] * k.data()[i];
      return s;
    };
    double worst = 0.0;
    for (std::size_t delta : {0, 1, 3, 7})
      for (std::size_t shift : {0, 5, 29}) {
        const double base = dot_at(10 + delta, 10);
        const double moved = dot_at(10 + delta + shift, 10 + shift);
        worst = std::max(worst, std::abs(base - moved));
      }
    out.require(worst <= 1e-9, "rotary logit drifted by " + fmt(worst));
    out.note("max drift " + fmt(worst));
  });

  // ---- load balance ------------------------------------------------------

  run("balance/closed-forms", [](Outcome& out, Rng& rng) {
    const double alpha = 0.01;
    double worst = 0.0;
    for (std::size_t n : {2, 4, 8})
      for (std::size_t m : {8, 64}) {
        auto g = Tensor<double>::full({n, m}, 1.0 / double(n));
        const auto plan = plan_data_selection(g, std::max<std::size_t>(1, n / 2));
        const double got =
            load_balance_loss_data(g, plan, alpha).item();
        worst = std::max(worst, std::abs(got - alpha));
      }
    out.require(worst <= 1e-12, "uniform gating loss off by " + fmt(worst));

    // Maximal imbalance: two experts, top-1, all mass on expert 0.
    const std::size_t b = 6;
    std::vector<double> one_hot(b * 2, 0.0);
    for (std::size_t j = 0; j < b; ++j) one_hot[j * 2] = 1.0;
    auto g = Tensor<double>::from_data({b, 2}, one_hot);
    const auto plan = plan_expert_selection(g, 1);
    const double got = load_balance_loss_expert(g, plan, alpha).item();
    out.require(std::abs(got - 2.0 * alpha) <= 1e-12,
                "all-to-one loss " + fmt(got) + " != 2*alpha");

    auto gr = Tensor<double>::uniform({4, 10}, rng, 0.0, 1.0);
    auto grs = softmax(gr, 0);
    const double any =
        load_balance_loss_data(grs, plan_data_selection(grs, 2), alpha)
            .item();
    out.require(any >= 0.0, "balance loss went negative");
    out.note("uniform = alpha, all-to-one = 2*alpha, random >= 0");
  });

  // ---- operation counting ------------------------------------------------

  run("flops/overhead-identity", [](Outcome& out, Rng&) {
    UoeModelConfig cfg;
    cfg.layers = 2;
    cfg.d = 32;
    cfg.n_a = 4;
    cfg.d_h = 8;
    cfg.n_m = 4;
    cfg.d_e = 16;
    cfg.l_p = 8;
    cfg.k_attn = 4;
    cfg.k_mlp = 4;
    cfg.attn_mode = RoutingMode::kData;
    cfg.mlp_mode = RoutingMode::kExpert;
    cfg.max_len = 128;
    const std::size_t l = 128, b = 2;
    const auto uoe = count_uoe(cfg, l, b);
    const auto dense = count_dense(cfg, l, b);
    out.require(uoe.attn_proj == dense.attn_proj &&
                    uoe.attn_scores == dense.attn_scores &&
                    uoe.mlp == dense.mlp && uoe.other == dense.other,
                "full activation changed a shared component count");
    out.require(uoe.total() - dense.total() ==
                    uoe.gating + uoe.scatter_gather,
                "overhead identity is not exact");
    out.note("uoe - dense == gating + traffic, exactly");
  });

  run("flops/monotone-ratio", [](Outcome& out, Rng&) {
    UoeModelConfig cfg;
    cfg.layers = 2;
    cfg.d = 64;
    cfg.n_a = 4;
    cfg.d_h = 16;
    cfg.n_m = 4;
    cfg.d_e = 64;
    cfg.l_p = 8;
    cfg.k_attn = 2;
    cfg.k_mlp = 2;
    cfg.attn_mode = RoutingMode::kData;
    cfg.mlp_mode = RoutingMode::kExpert;
    cfg.gate_hidden = 16;
    cfg.pooled_expert_gate = true;
    cfg.max_len = 2048;
    double prev = 0.0;
    for (std::size_t k = 1; k <= 4; ++k) {
      auto c = cfg;
      c.k_attn = k;
      c.k_mlp = k;
      const double r = flops_ratio(c, 256, 1);
      out.require(r >= prev, "ratio decreased when k grew");
      prev = r;
    }
    const double at256 = flops_ratio(cfg, 256, 1);
    out.require(at256 >= 0.25 && at256 <= 0.60,
                "half-activation ratio " + fmt(at256) + " outside band");
    const auto rep = count_uoe(cfg, 256, 1);
    const double gshare = double(rep.gating) / double(rep.total());
    out.require(gshare < 0.02, "gating share " + fmt(gshare) + " >= 2%");
    double prev_l = 2.0;
    for (std::size_t l : {256, 512, 1024, 2048}) {
      const double r = flops_ratio(cfg, l, 1);
      out.require(r < prev_l, "ratio did not fall as l grew");
      prev_l = r;
    }
    out.note("ratio at l=256 is " + fmt(at256) + ", gating share " +
             fmt(gshare));
  });

  run("flops/instrumented-agreement", [](Outcome& out, Rng& rng) {
    auto cfg = tiny_config(2, 2, RoutingMode::kData, 77);
    cfg.mlp_mode = RoutingMode::kExpert;
    auto model = UoeModel<double>::init(cfg);
    const std::size_t b = 2;
    const auto tokens = random_tokens(rng, b * cfg.max_len, cfg.vocab_size);
    op_counters().reset();
    const auto o = model.forward(tokens, b);
    const auto measured = op_counters().flops;
    op_counters().reset();
    const auto analytic =
        count_uoe(cfg, cfg.max_len, b, &o.traces).total();
    const double rel = std::abs(double(analytic) - double(measured)) /
                       double(measured);
    out.require(rel <= 0.01, "analytic count off by " + fmt(rel));
    out.note("analytic " + std::to_string(analytic) + " vs measured " +
             std::to_string(measured) + " (rel gap " + fmt(rel) + ")");
  });

  // ---- execution strategies ----------------------------------------------

  run("strategies/agreement", [&](Outcome& out, Rng&) {
    const auto problem = make_block_problem(32, 4, 64, opt.seed + 5);
    const auto serial = run_block_strategy(problem, Strategy::kSerial);
    const auto batched = run_block_strategy(problem, Strategy::kBatched);
    const auto fused = run_block_strategy(problem, Strategy::kBatchedFused);
    const double g1 = max_abs_diff(serial, batched);
    const double g2 = max_abs_diff(serial, fused);
    out.require(g1 <= 1e-12, "batched disagrees by " + fmt(g1));
    out.require(g2 <= 1e-12, "fused disagrees by " + fmt(g2));
    out.note("batched gap " + fmt(g1) + ", fused gap " + fmt(g2));
  });

  // ---- corpus, checkpoints, training determinism -------------------------

  run("corpus/window-layout", [](Outcome& out, Rng&) {
    std::vector<std::uint8_t> bytes(41);
    for (std::size_t i = 0; i < bytes.size(); ++i)
      bytes[i] = static_cast<std::uint8_t>((i * 37 + 11) % 256);
    const std::size_t l = 8;
    out.require(window_count(bytes.size(), l) == 5, "window count wrong");
    out.require(window_count(l, l) == 0, "exact fit must yield no window");
    out.require(window_count(l + 1, l) == 1, "l+1 bytes must yield one");
    std::vector<std::size_t> in, tg;
    fill_window(bytes, l, 2, in, tg);
    bool ok = in.size() == l && tg.size() == l;
    for (std::size_t i = 0; ok && i < l; ++i) {
      ok &= in[i] == bytes[2 * l + i];
      ok &= tg[i] == bytes[2 * l + i + 1];
    }
    out.require(ok, "window content is not contiguous-with-shifted-targets");
    out.note("stride-l windows, targets shifted by one");
  });

  run("checkpoint/roundtrip-crc", [](Outcome& out, Rng& rng) {
    std::vector<ArrayRecord> records;
    std::vector<double> vals{1.5, -0.0, 1e300, -2.25};
    records.push_back(record_from_values<double>("a", {2, 2}, vals));
    records.push_back(record_from_u64("counter", 0x123456789abcdef0ull));
    const auto bytes = serialize_checkpoint(records);
    const auto back = deserialize_checkpoint(bytes);
    out.require(serialize_checkpoint(back) == bytes,
                "round-trip changed the byte stream");
    auto corrupt = bytes;
    corrupt[bytes.size() / 2] ^= 0x40;
    bool caught = false;
    try {
      deserialize_checkpoint(corrupt);
    } catch (const FormatError&) {
      caught = true;
    }
    out.require(caught, "bit flip was not rejected");
    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    caught = false;
    try {
      deserialize_checkpoint(truncated);
    } catch (const FormatError&) {
      caught = true;
    }
    out.require(caught, "truncation was not rejected");
    out.note("byte-stable round trip; corruption rejected");
    (void)rng;
  });

  run("train/determinism", [](Outcome& out, Rng&) {
    std::vector<std::uint8_t> corpus(600);
    for (std::size_t i = 0; i < corpus.size(); ++i)
      corpus[i] = static_cast<std::uint8_t>((i * 31 + 7) % 251);
    auto run_once = [&] {
      auto cfg = tiny_config(2, 2, RoutingMode::kData, 3);
      cfg.vocab_size = 256;  // raw bytes
      TrainConfig tc;
      tc.steps = 3;
      tc.batch_size = 2;
      tc.seq_len = cfg.max_len;
      tc.adam.lr = 1e-3;
      tc.data_seed = 99;
      Trainer<double, UoeModel<double>> tr(UoeModel<double>::init(cfg), tc);
      MetricsCsv csv;
      for (const auto& [step, m] : tr.run(corpus, "", ""))
        csv.add(step, m);
      return std::make_pair(csv.to_string(),
                            serialize_checkpoint(tr.checkpoint_records()));
    };
    const auto a = run_once();
    const auto b = run_once();
    out.require(a.first == b.first, "CSV bytes differ between same-seed runs");
    out.require(a.second == b.second,
                "checkpoint bytes differ between same-seed runs");
    out.note("CSV and checkpoint byte-identical across runs");
  });

  return results;
}

// Prints one verdict line per check; returns the process exit code.
inline int run_verify(const VerifyOptions& opt, std::ostream& out) {
  const auto results = run_verify_checks(opt);
  if (results.empty()) {
    out << "no checks match filter '" << opt.filter << "'\n";
    return 2;
  }
  std::string first_fail;
  std::size_t failed = 0;
  for (const auto& r : results) {
    char ms[32];
    std::snprintf(ms, sizeof(ms), "%.1f", r.ms);
    out << (r.pass ? "ok   " : "FAIL ") << r.name;
    for (std::size_t i = r.name.size(); i < 36; ++i) out << ' ';
    out << ' ' << r.detail << "  (" << ms << " ms)\n";
    if (!r.pass) {
      ++failed;
      if (first_fail.empty()) first_fail = r.name;
    }
  }
  out << results.size() << " checks, " << (results.size() - failed)
      << " passed, " << failed << " failed\n";
  if (failed) {
    out << "first failing check: " << first_fail << "\n";
    return 1;
  }
  return 0;
}

}  // namespace uoe
