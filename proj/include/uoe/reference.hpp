#pragma once

// Deliberately naive reference implementations. Everything here trades speed
// for obviousness; tests and `uoe verify` compare the optimized paths against
// these.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "uoe/common.hpp"

namespace uoe::ref {

// Plain triple loop, accumulation order j-inner (differs from the production
// kernel's row-temp scheme, so agreement is a two-route check).
template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b,
                      std::size_t p, std::size_t q, std::size_t r) {
  std::vector<T> c(p * r, T(0));
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      T sum = 0;
      for (std::size_t k = 0; k < q; ++k) sum += a[i * q + k] * b[k * r + j];
      c[i * r + j] = sum;
    }
  return c;
}

template <typename T>
std::vector<T> softmax_rows(const std::vector<T>& x, std::size_t rows,
                            std::size_t n) {
  std::vector<T> y(x.size());
  for (std::size_t rw = 0; rw < rows; ++rw) {
    T mx = x[rw * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[rw * n + j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[rw * n + j] = std::exp(x[rw * n + j] - mx);
      sum += y[rw * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[rw * n + j] /= sum;
  }
  return y;
}

// Central finite difference of a scalar function with respect to one slot of
// a flat parameter vector.
inline double central_difference(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, std::size_t slot, double h) {
  const double orig = x[slot];
  x[slot] = orig + h;
  const double fp = f(x);
  x[slot] = orig - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

// 2x2 rotation-matrix application for one feature pair: the explicit form the
// fast rotary kernel must match.
inline void rotate_pair(double& a, double& b, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double na = a * c - b * s;
  const double nb = a * s + b * c;
  a = na;
  b = nb;
}

// ---------------------------------------------------------------------------
// Subset-enumeration routing oracles. The planners use sort-based top-k; the
// oracles instead enumerate every k-combination and keep the one with the
// largest value sum, breaking ties toward the lexicographically smallest
// index set. For distinct values both routes provably agree; for ties the
// declared lowest-index rule makes them agree as well.

template <typename Visit>
void for_each_combination(std::size_t count, std::size_t k, Visit&& visit) {
  std::vector<std::size_t> combo(k);
  for (std::size_t i = 0; i < k; ++i) combo[i] = i;
  if (k > count) return;
  while (true) {
    visit(combo);
    // Advance to the next combination in lexicographic order.
    std::size_t i = k;
    while (i > 0 && combo[i - 1] == count - k + (i - 1)) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t j = i; j < k; ++j) combo[j] = combo[j - 1] + 1;
  }
}

template <typename T>
std::vector<std::size_t> best_subset(const std::vector<T>& values,
                                     std::size_t k) {
  std::vector<std::size_t> best;
  T best_sum = 0;
  for_each_combination(values.size(), k, [&](const std::vector<std::size_t>& s) {
    T sum = 0;
    for (std::size_t i : s) sum += values[i];
    if (best.empty() || sum > best_sum ||
        (sum == best_sum &&
         std::lexicographical_compare(s.begin(), s.end(), best.begin(),
                                      best.end()))) {
      best = s;
      best_sum = sum;
    }
  });
  return best;  // ascending index order by construction
}

struct DataPlanOracle {
  std::size_t c = 0;
  std::vector<std::vector<std::size_t>> stage1;  // m sets (ascending)
  std::vector<std::vector<std::size_t>> id;      // n x c ascending
};

// g is row-major [n, m].
template <typename T>
DataPlanOracle enumerate_data_plan(const std::vector<T>& g, std::size_t n,
                                   std::size_t m, std::size_t k) {
  DataPlanOracle out;
  out.stage1.resize(m);
  std::vector<std::size_t> load(n, 0);
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<T> column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = g[i * m + j];
    out.stage1[j] = best_subset(column, k);
    for (std::size_t i : out.stage1[j]) ++load[i];
  }
  out.c = *std::max_element(load.begin(), load.end());
  out.id.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<T> row(g.begin() + i * m, g.begin() + (i + 1) * m);
    out.id[i] = best_subset(row, out.c);
  }
  return out;
}

// g is row-major [b, n]; returns per-expert ascending sample lists.
template <typename T>
std::vector<std::vector<std::size_t>> enumerate_expert_plan(
    const std::vector<T>& g, std::size_t b, std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> assignments(n);
  for (std::size_t j = 0; j < b; ++j) {
    std::vector<T> row(g.begin() + j * n, g.begin() + (j + 1) * n);
    for (std::size_t i : best_subset(row, k)) assignments[i].push_back(j);
  }
  return assignments;
}

// ---------------------------------------------------------------------------
// Doubly-indexed causal mask: take a full l x l lower-triangular mask and
// index both axes by a sorted token subset.
inline std::vector<std::uint8_t> causal_submask_by_indexing(
    std::size_t l, const std::vector<std::size_t>& idx) {
  const std::size_t la = idx.size();
  std::vector<std::uint8_t> full(l * l, 0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j <= i; ++j) full[i * l + j] = 1;
  std::vector<std::uint8_t> sub(la * la);
  for (std::size_t a = 0; a < la; ++a)
    for (std::size_t b = 0; b < la; ++b)
      sub[a * la + b] = full[idx[a] * l + idx[b]];
  return sub;
}

// Naive masked attention, element by element.
inline std::vector<double> attention_loop(
    const std::vector<double>& q, const std::vector<double>& k,
    const std::vector<double>& v, const std::vector<std::uint8_t>& allowed,
    std::size_t batch, std::size_t L, std::size_t d_h) {
  std::vector<double> out(batch * L * d_h, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_h));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> w(L, 0.0);
      double mx = -1e300;
      bool any = false;
      for (std::size_t j = 0; j < L; ++j) {
        if (!allowed[(b * L + i) * L + j]) continue;
        double s = 0;
        for (std::size_t e = 0; e < d_h; ++e)
          s += q[(b * L + i) * d_h + e] * k[(b * L + j) * d_h + e];
        w[j] = s * inv_sqrt;
        mx = any ? std::max(mx, w[j]) : w[j];
        any = true;
      }
      if (!any) continue;
      double sum = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (!allowed[(b * L + i) * L + j]) continue;
        w[j] = std::exp(w[j] - mx);
        sum += w[j];
      }
      for (std::size_t j = 0; j < L; ++j) {
        if (!allowed[(b * L + i) * L + j]) continue;
        for (std::size_t e = 0; e < d_h; ++e)
          out[(b * L + i) * d_h + e] += (w[j] / sum) * v[(b * L + j) * d_h + e];
      }
    }
  return out;
}

// Dense multi-head attention with partial rotary embedding, written as plain
// loops over merged [d, n*d_h] projections. Returns the attention output
// (residual not added).
struct DenseMhaSetup {
  std::size_t n_heads = 1, d_h = 0;
  std::size_t d_qc = 0, d_qr = 0, d_kc = 0, d_kr = 0;
  double theta_base = 10000.0;
  bool causal = true;
};

inline std::vector<double> dense_mha(const std::vector<double>& x,
                                     const std::vector<double>& wq,
                                     const std::vector<double>& wk,
                                     const std::vector<double>& wv,
                                     const std::vector<double>& wo,
                                     std::size_t l, std::size_t d,
                                     const DenseMhaSetup& cfg) {
  const std::size_t n = cfg.n_heads, dh = cfg.d_h, width = n * dh;
  auto q = matmul(x, wq, l, d, width);
  auto k = matmul(x, wk, l, d, width);
  auto v = matmul(x, wv, l, d, width);
  auto rope_head = [&](std::vector<double>& buf, std::size_t head,
                       std::size_t d_const, std::size_t d_rot) {
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t i = 0; i < d_rot / 2; ++i) {
        const double angle =
            static_cast<double>(t) *
            std::pow(cfg.theta_base,
                     -2.0 * static_cast<double>(i) / static_cast<double>(d_rot));
        rotate_pair(buf[t * width + head * dh + d_const + 2 * i],
                    buf[t * width + head * dh + d_const + 2 * i + 1], angle);
      }
  };
  for (std::size_t h = 0; h < n; ++h) {
    rope_head(q, h, cfg.d_qc, cfg.d_qr);
    rope_head(k, h, cfg.d_kc, cfg.d_kr);
  }
  std::vector<double> concat(l * width, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t i = 0; i < l; ++i) {
      std::vector<double> w(l, 0.0);
      double mx = -1e300;
      const std::size_t jmax = cfg.causal ? i + 1 : l;
      for (std::size_t j = 0; j < jmax; ++j) {
        double s = 0;
        for (std::size_t e = 0; e < dh; ++e)
          s += q[i * width + h * dh + e] * k[j * width + h * dh + e];
        w[j] = s * inv_sqrt;
        mx = std::max(mx, w[j]);
      }
      double sum = 0;
      for (std::size_t j = 0; j < jmax; ++j) {
        w[j] = std::exp(w[j] - mx);
        sum += w[j];
      }
      for (std::size_t j = 0; j < jmax; ++j)
        for (std::size_t e = 0; e < dh; ++e)
          concat[i * width + h * dh + e] +=
              (w[j] / sum) * v[j * width + h * dh + e];
    }
  return matmul(concat, wo, l, width, d);
}

}  // namespace uoe::ref
