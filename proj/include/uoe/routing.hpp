#pragma once

// Routing: gating networks and the two selection paradigms.
//  - data selection: a sample's patches are distributed over experts with a
//    dynamic per-expert capacity; every expert receives exactly c patches.
//  - expert selection: whole samples pick their top-k experts, giving ragged
//    per-expert batches.
// Both paths execute through one flat index_select / index_add pass.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

// ---------------------------------------------------------------------------
// Deterministic top-k: highest value first, ties resolved in favor of the
// lowest index.

namespace detail {

// Returns the k chosen indices in (value desc, index asc) rank order.
template <typename T>
std::vector<std::size_t> top_k_indices(const T* values, std::size_t count,
                                       std::size_t k,
                                       std::size_t stride = 1) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return values[a * stride] > values[b * stride];
                   });
  order.resize(k);
  return order;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plans.

struct DataRoutingPlan {
  std::size_t m = 0;  // patch count
  std::size_t n = 0;  // total expert count
  std::size_t k = 0;  // stage-1 fan-out per patch
  std::size_t c = 0;  // dynamic capacity: max stage-1 load over active experts
  // Experts taking part (all n by default; a restricted subset in combined
  // mode). id and the gather rows are parallel to this list.
  std::vector<std::size_t> experts;
  std::vector<std::vector<std::size_t>> id_prime;  // m x k stage-1 picks
  std::vector<std::vector<std::size_t>> id;        // per active expert, c ascending patch ids

  std::size_t active_count() const { return experts.size(); }

  // Uniform encoding: all per-expert patch lists concatenated.
  std::vector<std::size_t> flat_indices() const {
    std::vector<std::size_t> flat;
    flat.reserve(id.size() * c);
    for (const auto& row : id) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
  }
};

struct ExpertRoutingPlan {
  std::size_t b = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> assignments;  // n ascending sample lists
  std::vector<std::size_t> counts;                    // c_i = |assignments[i]|

  std::size_t total() const {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  }

  std::vector<std::size_t> flat_samples() const {
    std::vector<std::size_t> flat;
    flat.reserve(total());
    for (const auto& row : assignments)
      flat.insert(flat.end(), row.begin(), row.end());
    return flat;
  }

  // n+1 prefix offsets into flat_samples, segment i = expert i's samples.
  std::vector<std::size_t> offsets() const {
    std::vector<std::size_t> off(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) off[i + 1] = off[i] + counts[i];
    return off;
  }
};

// ---------------------------------------------------------------------------
// Patch handling.

template <typename T>
Tensor<T> split_patches(const Tensor<T>& x, std::size_t l_p) {
  if (x.ndim() != 2)
    throw ShapeError("split_patches: expected [l, d], got " +
                     to_string(x.shape()));
  const std::size_t l = x.dim(0), d = x.dim(1);
  if (l_p == 0 || l % l_p != 0)
    throw ConfigError("split_patches: length " + std::to_string(l) +
                      " not divisible by patch length " + std::to_string(l_p));
  return reshape(x, {l / l_p, l_p, d});
}

// ---------------------------------------------------------------------------
// Gating networks.

template <typename T>
struct GateParams {
  // Data gate, a two-layer composition: mean-pool tokens in a patch, then
  // d -> h_g, then h_g -> n, normalized over experts per patch.
  Tensor<T> data_b;  // [d, h_g]
  Tensor<T> data_a;  // [h_g, n]
  // Expert gate: flatten l*d -> n, or mean-pool d -> n when pooled.
  Tensor<T> expert_w;
  bool pooled_expert_gate = false;
};

template <typename T>
Tensor<T> data_gate(const Tensor<T>& x_patches, const GateParams<T>& p) {
  if (x_patches.ndim() != 3)
    throw ShapeError("data_gate: expected [m, l_p, d], got " +
                     to_string(x_patches.shape()));
  if (x_patches.dim(2) != p.data_b.dim(0))
    throw ShapeError("data_gate: width " + std::to_string(x_patches.dim(2)) +
                     " does not match gate input " +
                     std::to_string(p.data_b.dim(0)));
  auto pooled = mean_axis(x_patches, 1);            // [m, d]
  auto hidden = matmul(pooled, p.data_b);           // [m, h_g]
  auto logits = transpose_last2(matmul(hidden, p.data_a));  // [n, m]
  return softmax(logits, 0);  // normalize over experts, per patch column
}

template <typename T>
Tensor<T> expert_gate(const Tensor<T>& x_batch, const GateParams<T>& p) {
  if (x_batch.ndim() != 3)
    throw ShapeError("expert_gate: expected [b, l, d], got " +
                     to_string(x_batch.shape()));
  const std::size_t b = x_batch.dim(0), l = x_batch.dim(1), d = x_batch.dim(2);
  Tensor<T> logits;
  if (p.pooled_expert_gate) {
    if (p.expert_w.dim(0) != d)
      throw ConfigError("expert_gate: pooled gate expects input width " +
                        std::to_string(p.expert_w.dim(0)) + ", got " +
                        std::to_string(d));
    logits = matmul(mean_axis(x_batch, 1), p.expert_w);
  } else {
    if (p.expert_w.dim(0) != l * d)
      throw ConfigError("expert_gate: flattened length " +
                        std::to_string(l * d) + " does not match gate input " +
                        std::to_string(p.expert_w.dim(0)));
    logits = matmul(reshape(x_batch, {b, l * d}), p.expert_w);
  }
  return softmax(logits, 1);
}

// ---------------------------------------------------------------------------
// Planners. Planning reads gate values and produces integer indices only; it
// is not differentiated through.

// Two-stage data-selection plan over a restricted expert set.
template <typename T>
DataRoutingPlan plan_data_selection_over(
    const Tensor<T>& g, std::size_t k,
    const std::vector<std::size_t>& active_experts) {
  if (g.ndim() != 2)
    throw ShapeError("plan_data_selection: gates must be [n, m], got " +
                     to_string(g.shape()));
  const std::size_t n = g.dim(0), m = g.dim(1);
  const std::size_t n_active = active_experts.size();
  if (k < 1 || k > n_active)
    throw ConfigError("plan_data_selection: top-k " + std::to_string(k) +
                      " out of range [1, " + std::to_string(n_active) + "]");
  for (std::size_t e : active_experts)
    if (e >= n)
      throw BoundsError("plan_data_selection: active expert " +
                        std::to_string(e) + " out of range [0, " +
                        std::to_string(n) + ")");

  DataRoutingPlan plan;
  plan.m = m;
  plan.n = n;
  plan.k = k;
  plan.experts = active_experts;

  // Stage 1: each patch picks its k highest-gated active experts.
  std::vector<std::size_t> load(n_active, 0);
  plan.id_prime.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<T> column(n_active);
    for (std::size_t a = 0; a < n_active; ++a)
      column[a] = g.data()[active_experts[a] * m + j];
    auto picks = detail::top_k_indices(column.data(), n_active, k);
    plan.id_prime[j].reserve(k);
    for (std::size_t a : picks) {
      plan.id_prime[j].push_back(active_experts[a]);
      ++load[a];
    }
  }

  // Stage 2: capacity is the worst-case stage-1 load; every active expert
  // then takes its c best patches regardless of its stage-1 count.
  plan.c = *std::max_element(load.begin(), load.end());
  plan.id.resize(n_active);
  for (std::size_t a = 0; a < n_active; ++a) {
    const T* row = g.data().data() + active_experts[a] * m;
    auto picks = detail::top_k_indices(row, m, plan.c);
    std::sort(picks.begin(), picks.end());  // restore original patch order
    plan.id[a] = std::move(picks);
  }
  return plan;
}

template <typename T>
DataRoutingPlan plan_data_selection(const Tensor<T>& g, std::size_t k) {
  if (g.ndim() != 2)
    throw ShapeError("plan_data_selection: gates must be [n, m], got " +
                     to_string(g.shape()));
  std::vector<std::size_t> all(g.dim(0));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return plan_data_selection_over(g, k, all);
}

template <typename T>
ExpertRoutingPlan plan_expert_selection(const Tensor<T>& g, std::size_t k) {
  if (g.ndim() != 2)
    throw ShapeError("plan_expert_selection: gates must be [b, n], got " +
                     to_string(g.shape()));
  const std::size_t b = g.dim(0), n = g.dim(1);
  if (k < 1 || k > n)
    throw ConfigError("plan_expert_selection: top-k " + std::to_string(k) +
                      " out of range [1, " + std::to_string(n) + "]");
  ExpertRoutingPlan plan;
  plan.b = b;
  plan.n = n;
  plan.k = k;
  plan.assignments.resize(n);
  plan.counts.assign(n, 0);
  for (std::size_t j = 0; j < b; ++j) {
    auto picks = detail::top_k_indices(g.data().data() + j * n, n, k);
    for (std::size_t i : picks) {
      plan.assignments[i].push_back(j);  // j ascending => lists stay sorted
      ++plan.counts[i];
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Execution: one gather / one scatter per routed block.

template <typename T>
Tensor<T> gather_patches(const Tensor<T>& x_patches,
                         const DataRoutingPlan& plan) {
  if (x_patches.ndim() != 3 || x_patches.dim(0) != plan.m)
    throw ShapeError("gather_patches: input " + to_string(x_patches.shape()) +
                     " does not match plan with m=" + std::to_string(plan.m));
  auto flat = index_select(x_patches, 0, plan.flat_indices());
  return reshape(flat, {plan.active_count(), plan.c, x_patches.dim(1),
                        x_patches.dim(2)});
}

template <typename T>
Tensor<T> scatter_add_patches(const Tensor<T>& base, const Tensor<T>& y_expert,
                              const DataRoutingPlan& plan) {
  if (base.ndim() != 3 || base.dim(0) != plan.m)
    throw ShapeError("scatter_add_patches: base " + to_string(base.shape()) +
                     " does not match plan with m=" + std::to_string(plan.m));
  const std::size_t rows = plan.active_count() * plan.c;
  auto values = reshape(y_expert, {rows, base.dim(1), base.dim(2)});
  return index_add(base, 0, plan.flat_indices(), values);
}

template <typename T>
Tensor<T> gather_samples(const Tensor<T>& x_batch,
                         const ExpertRoutingPlan& plan) {
  if (x_batch.ndim() != 3 || x_batch.dim(0) != plan.b)
    throw ShapeError("gather_samples: input " + to_string(x_batch.shape()) +
                     " does not match plan with b=" + std::to_string(plan.b));
  return index_select(x_batch, 0, plan.flat_samples());
}

template <typename T>
Tensor<T> scatter_add_samples(const Tensor<T>& base, const Tensor<T>& y_routed,
                              const ExpertRoutingPlan& plan) {
  if (base.ndim() != 3 || base.dim(0) != plan.b)
    throw ShapeError("scatter_add_samples: base " + to_string(base.shape()) +
                     " does not match plan with b=" + std::to_string(plan.b));
  return index_add(base, 0, plan.flat_samples(), y_routed);
}

}  // namespace uoe
