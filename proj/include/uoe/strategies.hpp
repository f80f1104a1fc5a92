#pragma once

// Three execution strategies for one data-routed transformer block (causal
// attention and the expert MLP, pre-norm and rotary terms elided), computed
// on raw buffers so the comparison times memory movement and kernel
// structure, not tape bookkeeping:
//
//   kSerial       per-expert loop; every expert performs its own gather,
//                 projections, attention, MLP and scatter.
//   kBatched      one index selection gathers all experts' patches into a
//                 contiguous block, one scatter writes all results back.
//   kBatchedFused same single-gather layout with multiply-accumulate
//                 matmul kernels (k-outer, row-wise accumulation).
//
// All three compute the same function; callers cross-check outputs before
// trusting any timing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/rng.hpp"
#include "uoe/routing.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

enum class Strategy { kSerial, kBatched, kBatchedFused };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kSerial: return "serial";
    case Strategy::kBatched: return "batched";
    case Strategy::kBatchedFused: return "batched_fused";
  }
  return "?";
}

// One routed block instance with a realized selection plan.
struct BlockProblem {
  std::size_t d = 0, n = 0, l = 0, l_p = 0, d_h = 0, d_e = 0;
  std::size_t c = 0;  // patches per expert
  std::vector<double> x;                          // [l, d]
  std::vector<double> wq, wk, wv;                 // [n, d, d_h]
  std::vector<double> wo;                         // [n, d_h, d]
  std::vector<double> a_in;                       // [n, d, d_e]
  std::vector<double> a_out;                      // [n, d_e, d]
  std::vector<std::vector<std::size_t>> patches;  // per expert, sorted ids

  std::size_t m() const { return l / l_p; }
  std::size_t l_a() const { return c * l_p; }
};

inline BlockProblem make_block_problem(std::size_t d, std::size_t n,
                                       std::size_t l, std::uint64_t seed) {
  if (d % n != 0)
    throw ConfigError("bench: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(n) + " experts");
  BlockProblem p;
  p.d = d;
  p.n = n;
  p.l = l;
  p.l_p = 8;
  if (l % p.l_p != 0)
    throw ConfigError("bench: sequence " + std::to_string(l) +
                      " not divisible by patch length 8");
  p.d_h = d / n;
  p.d_e = d / n;
  Rng rng(seed);
  auto fill = [&](std::vector<double>& v, std::size_t count) {
    v.resize(count);
    for (auto& x : v) x = rng.next_uniform(-0.5, 0.5);
  };
  fill(p.x, l * d);
  fill(p.wq, n * d * p.d_h);
  fill(p.wk, n * d * p.d_h);
  fill(p.wv, n * d * p.d_h);
  fill(p.wo, n * p.d_h * d);
  fill(p.a_in, n * d * p.d_e);
  fill(p.a_out, n * p.d_e * d);

  // Route through the real planner at half activation.
  const std::size_t m = p.m();
  std::vector<double> gvals(n * m);
  for (auto& g : gvals) g = rng.next_uniform(0.0, 1.0);
  auto gates = Tensor<double>::from_data({n, m}, gvals);
  const auto plan = plan_data_selection(gates, std::max<std::size_t>(1, n / 2));
  p.c = plan.c;
  p.patches = plan.id;
  return p;
}

namespace detail {

// C[p, r] = A[p, q] * B[q, r]; plain dot-product order.
inline void mm_naive(const double* a, const double* b, double* c,
                     std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < q; ++k) s += a[i * q + k] * b[k * r + j];
      c[i * r + j] = s;
    }
}

// Same product with k-outer multiply-accumulate over contiguous rows.
inline void mm_fused(const double* a, const double* b, double* c,
                     std::size_t p, std::size_t q, std::size_t r) {
  std::fill(c, c + p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    const double* arow = a + i * q;
    double* crow = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = arow[k];
      const double* brow = b + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

// scores[i, j] = sum_k q[i, k] * kmat[j, k]; both operands row-major.
inline void mm_dot_t(const double* q, const double* kmat, double* scores,
                     std::size_t rows, std::size_t inner) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k)
        s += q[i * inner + k] * kmat[j * inner + k];
      scores[i * rows + j] = s;
    }
}

inline void causal_softmax_rows(double* scores, std::size_t rows,
                                double scale) {
  for (std::size_t i = 0; i < rows; ++i) {
    double* row = scores + i * rows;
    double mx = -1e300;
    for (std::size_t j = 0; j <= i; ++j) {
      row[j] *= scale;
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
    for (std::size_t j = i + 1; j < rows; ++j) row[j] = 0.0;
  }
}

inline void silu_rows(double* v, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i)
    v[i] = v[i] / (1.0 + std::exp(-v[i]));
}

struct ExpertScratch {
  std::vector<double> q, k, v, scores, o, mid;

  void resize(std::size_t la, std::size_t dh, std::size_t de) {
    q.resize(la * dh);
    k.resize(la * dh);
    v.resize(la * dh);
    scores.resize(la * la);
    o.resize(la * dh);
    mid.resize(la * de);
  }

  std::size_t doubles() const {
    return q.size() + k.size() + v.size() + scores.size() + o.size() +
           mid.size();
  }
};

// Causal attention for one expert's gathered rows, result into y_out [la, d].
inline void expert_attention(const BlockProblem& p, std::size_t a,
                             const double* gathered, ExpertScratch& s,
                             bool fused, double* y_out) {
  const std::size_t la = p.l_a(), d = p.d, dh = p.d_h;
  auto mm = fused ? mm_fused : mm_naive;
  mm(gathered, p.wq.data() + a * d * dh, s.q.data(), la, d, dh);
  mm(gathered, p.wk.data() + a * d * dh, s.k.data(), la, d, dh);
  mm(gathered, p.wv.data() + a * d * dh, s.v.data(), la, d, dh);
  mm_dot_t(s.q.data(), s.k.data(), s.scores.data(), la, dh);
  causal_softmax_rows(s.scores.data(), la, 1.0 / std::sqrt(double(dh)));
  mm(s.scores.data(), s.v.data(), s.o.data(), la, la, dh);
  mm(s.o.data(), p.wo.data() + a * dh * d, y_out, la, dh, d);
}

// Gated-free two-matmul MLP for one expert, result into y_out [la, d].
inline void expert_mlp(const BlockProblem& p, std::size_t a,
                       const double* gathered, ExpertScratch& s, bool fused,
                       double* y_out) {
  const std::size_t la = p.l_a(), d = p.d, de = p.d_e;
  auto mm = fused ? mm_fused : mm_naive;
  mm(gathered, p.a_in.data() + a * d * de, s.mid.data(), la, d, de);
  silu_rows(s.mid.data(), la * de);
  mm(s.mid.data(), p.a_out.data() + a * de * d, y_out, la, de, d);
}

}  // namespace detail

// Runs the routed block under one strategy; `threads` > 1 shards the
// per-expert compute of the batched strategies (outputs stay deterministic:
// every expert writes disjoint scratch, the scatter runs serially).
inline std::vector<double> run_block_strategy(const BlockProblem& p,
                                              Strategy strategy,
                                              std::size_t threads = 1) {
  const std::size_t la = p.l_a(), d = p.d, lp = p.l_p, de = p.d_e;
  std::vector<double> u = p.x;      // after attention
  std::vector<double> out;          // after MLP

  auto gather_rows = [&](const std::vector<double>& src, std::size_t a,
                         double* dst) {
    for (std::size_t t = 0; t < p.c; ++t) {
      const double* s = src.data() + p.patches[a][t] * lp * d;
      std::copy(s, s + lp * d, dst + t * lp * d);
    }
  };
  auto scatter_rows = [&](std::vector<double>& dst, std::size_t a,
                          const double* src) {
    for (std::size_t t = 0; t < p.c; ++t) {
      double* dv = dst.data() + p.patches[a][t] * lp * d;
      for (std::size_t j = 0; j < lp * d; ++j) dv[j] += src[j + t * lp * d];
    }
  };

  if (strategy == Strategy::kSerial) {
    detail::ExpertScratch s;
    s.resize(la, p.d_h, de);
    std::vector<double> buf(la * d), y(la * d);
    for (std::size_t a = 0; a < p.n; ++a) {
      gather_rows(p.x, a, buf.data());
      detail::expert_attention(p, a, buf.data(), s, /*fused=*/false, y.data());
      scatter_rows(u, a, y.data());
    }
    out = u;
    for (std::size_t a = 0; a < p.n; ++a) {
      gather_rows(u, a, buf.data());
      detail::expert_mlp(p, a, buf.data(), s, /*fused=*/false, y.data());
      scatter_rows(out, a, y.data());
    }
    return out;
  }

  const bool fused = strategy == Strategy::kBatchedFused;
  const std::size_t workers =
      std::min(std::max<std::size_t>(1, threads), p.n);
  std::vector<detail::ExpertScratch> scratch(workers);
  for (auto& s : scratch) s.resize(la, p.d_h, de);
  std::vector<double> gathered(p.n * la * d);
  std::vector<double> y(la * d);
  std::vector<double> results(workers > 1 ? p.n * la * d : 0);

  // One gather pass for all experts, then per-expert compute. Scatter-adds
  // always land in ascending expert order so thread count never changes the
  // accumulation order (workers write a result slab, scattered serially).
  auto phase = [&](const std::vector<double>& src, std::vector<double>& dst,
                   bool attention) {
    for (std::size_t a = 0; a < p.n; ++a)
      gather_rows(src, a, gathered.data() + a * la * d);
    if (workers == 1) {
      for (std::size_t a = 0; a < p.n; ++a) {
        const double* in = gathered.data() + a * la * d;
        if (attention)
          detail::expert_attention(p, a, in, scratch[0], fused, y.data());
        else
          detail::expert_mlp(p, a, in, scratch[0], fused, y.data());
        scatter_rows(dst, a, y.data());
      }
      return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t a = w; a < p.n; a += workers) {
          const double* in = gathered.data() + a * la * d;
          double* y_out = results.data() + a * la * d;
          if (attention)
            detail::expert_attention(p, a, in, scratch[w], fused, y_out);
          else
            detail::expert_mlp(p, a, in, scratch[w], fused, y_out);
        }
      });
    for (auto& t : pool) t.join();
    for (std::size_t a = 0; a < p.n; ++a)
      scatter_rows(dst, a, results.data() + a * la * d);
  };

  phase(p.x, u, /*attention=*/true);
  out = u;
  phase(u, out, /*attention=*/false);
  return out;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(a[i] - b[i]));
  return mx;
}

// ---------------------------------------------------------------------------
// Timing harness: monotonic clock, fixed warmup + timed iteration counts.

struct BenchRow {
  Strategy strategy;
  std::size_t d = 0, n = 0, l = 0;
  double mean_ms = 0.0, p50_ms = 0.0;
  std::size_t peak_bytes_estimate = 0;
};

inline std::size_t strategy_peak_bytes(const BlockProblem& p,
                                       Strategy strategy,
                                       std::size_t threads = 1) {
  const std::size_t la = p.l_a();
  const std::size_t scratch =
      4 * la * p.d_h + la * la + la * p.d_e;  // q,k,v,o + scores + mid
  const std::size_t streams = 2 * p.l * p.d;  // u and the final output
  std::size_t total = streams;
  if (strategy == Strategy::kSerial) {
    total += scratch + 2 * la * p.d;  // one gather buffer + one result
  } else {
    const std::size_t workers =
        std::min(std::max<std::size_t>(1, threads), p.n);
    total += workers * scratch + p.n * la * p.d + la * p.d;  // gathered + y
    if (workers > 1) total += p.n * la * p.d;                // result slab
  }
  return sizeof(double) * total;
}

inline BenchRow time_strategy(const BlockProblem& p, Strategy strategy,
                              std::size_t warmup, std::size_t iters,
                              std::size_t threads) {
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i)
    run_block_strategy(p, strategy, threads);
  std::vector<double> samples;
  samples.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    auto result = run_block_strategy(p, strategy, threads);
    const auto t1 = clock::now();
    if (!std::isfinite(result[0]))
      throw ContractError("bench: non-finite strategy output");
    samples.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  BenchRow row;
  row.strategy = strategy;
  row.d = p.d;
  row.n = p.n;
  row.l = p.l;
  for (double s : samples) row.mean_ms += s;
  row.mean_ms /= static_cast<double>(samples.size());
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  row.p50_ms = samples.size() % 2 ? samples[mid]
                                  : 0.5 * (samples[mid - 1] + samples[mid]);
  row.peak_bytes_estimate = strategy_peak_bytes(p, strategy, threads);
  return row;
}

// Grid spec "d=32,64;n=4;l=128,256": semicolon-separated axes, each a
// comma-separated value list for d, n or l.
struct BenchGrid {
  std::vector<std::size_t> ds{64};
  std::vector<std::size_t> ns{4};
  std::vector<std::size_t> ls{128, 256, 512};
};

inline BenchGrid parse_bench_grid(const std::string& spec) {
  if (spec.empty()) return BenchGrid{};
  BenchGrid grid;
  grid.ds.clear();
  grid.ns.clear();
  grid.ls.clear();
  std::stringstream axes(spec);
  std::string axis;
  while (std::getline(axes, axis, ';')) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("bench: bad grid axis '" + axis + "'");
    const std::string key = axis.substr(0, eq);
    std::vector<std::size_t>* target = nullptr;
    if (key == "d") target = &grid.ds;
    else if (key == "n") target = &grid.ns;
    else if (key == "l") target = &grid.ls;
    else throw ConfigError("bench: unknown grid axis '" + key + "'");
    std::stringstream values(axis.substr(eq + 1));
    std::string value;
    while (std::getline(values, value, ',')) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(value, &pos);
      } catch (const std::exception&) {
        throw ConfigError("bench: bad grid value '" + value + "'");
      }
      if (pos != value.size() || v == 0)
        throw ConfigError("bench: bad grid value '" + value + "'");
      target->push_back(static_cast<std::size_t>(v));
    }
    if (target->empty())
      throw ConfigError("bench: empty grid axis '" + key + "'");
  }
  if (grid.ds.empty() || grid.ns.empty() || grid.ls.empty())
    throw ConfigError("bench: grid must set d, n and l");
  return grid;
}

// Cross-checks all three strategies, then times them at every grid point.
inline std::vector<BenchRow> run_bench(const BenchGrid& grid,
                                       std::size_t warmup, std::size_t iters,
                                       std::size_t threads,
                                       std::uint64_t seed,
                                       double agreement_tol = 1e-12) {
  std::vector<BenchRow> rows;
  for (std::size_t d : grid.ds)
    for (std::size_t n : grid.ns)
      for (std::size_t l : grid.ls) {
        const auto problem = make_block_problem(d, n, l, seed);
        const auto serial =
            run_block_strategy(problem, Strategy::kSerial, threads);
        for (Strategy s : {Strategy::kBatched, Strategy::kBatchedFused}) {
          const auto other = run_block_strategy(problem, s, threads);
          const double diff = max_abs_diff(serial, other);
          if (diff > agreement_tol)
            throw ContractError(
                std::string("bench: strategy ") + to_string(s) +
                " disagrees with serial by " + std::to_string(diff) +
                " at d=" + std::to_string(d) + " n=" + std::to_string(n) +
                " l=" + std::to_string(l));
        }
        for (Strategy s : {Strategy::kSerial, Strategy::kBatched,
                           Strategy::kBatchedFused})
          rows.push_back(time_strategy(problem, s, warmup, iters, threads));
      }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "strategy,d,n,l,mean_ms,p50_ms,peak_bytes_estimate\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.mean_ms);
    const std::string mean = buf;
    std::snprintf(buf, sizeof(buf), "%.6f", r.p50_ms);
    const std::string p50 = buf;
    out << to_string(r.strategy) << ',' << r.d << ',' << r.n << ',' << r.l
        << ',' << mean << ',' << p50 << ',' << r.peak_bytes_estimate << '\n';
  }
  return out.str();
}

}  // namespace uoe
