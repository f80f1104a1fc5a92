#pragma once

// Lossless weight partition: a dense MLP or attention projection is sliced
// into expert groups whose union reproduces the dense computation. The
// inverse (reconstruction) doubles as the equivalence oracle in tests.

#include <cstddef>
#include <string>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

enum class SecondActivation { kIdentity, kSilu };

inline SecondActivation second_activation_from_string(const std::string& s) {
  if (s == "identity") return SecondActivation::kIdentity;
  if (s == "silu") return SecondActivation::kSilu;
  throw ConfigError("mlp_second_activation must be 'identity' or 'silu', got '" +
                    s + "'");
}

// ---------------------------------------------------------------------------
// MLP expert group: column partition of the first layer, row partition of the
// second. Slices are stored stacked (n x d x d_e and n x d_e x d) so the
// union path runs as one batched product.

template <typename T>
struct MlpExpertGroup {
  Tensor<T> a_in;   // [n, d, d_e]
  Tensor<T> a_out;  // [n, d_e, d]
  Tensor<T> b_in;   // optional [n, d_e], column split of the layer-1 bias
  Tensor<T> b_out;  // optional [d], shared layer-2 bias (added once, after the sum)
  std::size_t n = 0;

  bool has_bias() const { return b_in.defined(); }
  std::size_t d() const { return a_in.dim(1); }
  std::size_t d_e() const { return a_in.dim(2); }
};

template <typename T>
MlpExpertGroup<T> partition_mlp(const Tensor<T>& a1, const Tensor<T>& a2,
                                std::size_t n) {
  if (a1.ndim() != 2 || a2.ndim() != 2 || a1.dim(1) != a2.dim(0) ||
      a1.dim(0) != a2.dim(1))
    throw ShapeError("partition_mlp: expected [d, D_e] and [D_e, d], got " +
                     to_string(a1.shape()) + " and " + to_string(a2.shape()));
  const std::size_t d = a1.dim(0), de_total = a1.dim(1);
  if (n == 0 || de_total % n != 0)
    throw ConfigError("partition_mlp: hidden width " +
                      std::to_string(de_total) + " not divisible by " +
                      std::to_string(n) + " experts");
  const std::size_t de = de_total / n;
  MlpExpertGroup<T> g;
  g.n = n;
  std::vector<T> ain(n * d * de), aout(n * de * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t rw = 0; rw < d; ++rw)  // columns [i*de, (i+1)*de) of a1
      for (std::size_t c = 0; c < de; ++c)
        ain[(i * d + rw) * de + c] = a1.data()[rw * de_total + i * de + c];
    // rows [i*de, (i+1)*de) of a2 are contiguous
    std::copy_n(a2.data().data() + i * de * d, de * d,
                aout.data() + i * de * d);
  }
  g.a_in = Tensor<T>::from_data({n, d, de}, std::move(ain));
  g.a_out = Tensor<T>::from_data({n, de, d}, std::move(aout));
  return g;
}

template <typename T>
MlpExpertGroup<T> partition_mlp(const Tensor<T>& a1, const Tensor<T>& a2,
                                const Tensor<T>& b1, const Tensor<T>& b2,
                                std::size_t n) {
  MlpExpertGroup<T> g = partition_mlp(a1, a2, n);
  const std::size_t de = g.d_e();
  if (b1.ndim() != 1 || b1.dim(0) != n * de || b2.ndim() != 1 ||
      b2.dim(0) != g.d())
    throw ShapeError("partition_mlp: bias shapes " + to_string(b1.shape()) +
                     ", " + to_string(b2.shape()) + " inconsistent");
  g.b_in = Tensor<T>::from_data({n, de}, b1.data());
  g.b_out = Tensor<T>::from_data({g.d()}, b2.data());
  return g;
}

// Inverse of partition_mlp; bit-identical round trip.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reconstruct_mlp(const MlpExpertGroup<T>& g) {
  const std::size_t n = g.n, d = g.d(), de = g.d_e();
  std::vector<T> a1(d * n * de), a2(n * de * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t rw = 0; rw < d; ++rw)
      for (std::size_t c = 0; c < de; ++c)
        a1[rw * n * de + i * de + c] = g.a_in.data()[(i * d + rw) * de + c];
    std::copy_n(g.a_out.data().data() + i * de * d, de * d,
                a2.data() + i * de * d);
  }
  return {Tensor<T>::from_data({d, n * de}, std::move(a1)),
          Tensor<T>::from_data({n * de, d}, std::move(a2))};
}

template <typename T>
Tensor<T> apply_second_activation(const Tensor<T>& y, SecondActivation act) {
  return act == SecondActivation::kSilu ? silu(y) : y;
}

// Reference two-layer MLP: phi2(silu(x*a1 [+ b1])*a2 [+ b2]).
template <typename T>
Tensor<T> dense_mlp_forward(const Tensor<T>& x, const Tensor<T>& a1,
                            const Tensor<T>& a2,
                            SecondActivation act = SecondActivation::kIdentity,
                            const Tensor<T>* b1 = nullptr,
                            const Tensor<T>* b2 = nullptr) {
  auto h = matmul(x, a1);
  if (b1) h = add_bias_last(h, *b1);
  auto v = silu(h);
  auto y = matmul(v, a2);
  if (b2) y = add_bias_last(y, *b2);
  return apply_second_activation(y, act);
}

// Union path: every expert computes its slice, partial outputs are summed by
// one scatter-add before any second-layer nonlinearity.
template <typename T>
Tensor<T> expert_union_mlp_forward(
    const Tensor<T>& x, const MlpExpertGroup<T>& g,
    SecondActivation act = SecondActivation::kIdentity) {
  if (x.ndim() != 2 || x.dim(1) != g.d())
    throw ShapeError("expert_union_mlp_forward: input " +
                     to_string(x.shape()) + " does not match width " +
                     std::to_string(g.d()));
  const std::size_t l = x.dim(0), n = g.n, d = g.d();
  auto h = matmul(x, g.a_in);  // [n, l, d_e] via broadcast
  if (g.has_bias()) h = add_bias_batched(h, g.b_in);
  auto v = silu(h);
  auto partials = reshape(matmul(v, g.a_out), {n * l, d});
  std::vector<std::size_t> idx(n * l);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < l; ++j) idx[i * l + j] = j;
  auto y = index_add(Tensor<T>::zeros({l, d}), 0, idx, partials);
  if (g.has_bias()) y = add_bias_last(y, g.b_out);
  return apply_second_activation(y, act);
}

// ---------------------------------------------------------------------------
// Attention expert group: per-expert column slices of the QKV projections and
// row slices of the output projection. One expert == one head group.

template <typename T>
struct AttnExpertGroup {
  Tensor<T> w_q, w_k, w_v;  // [n, d, d_h]
  Tensor<T> w_o;            // [n, d_h, d]
  std::size_t n = 0;

  std::size_t d() const { return w_q.dim(1); }
  std::size_t d_h() const { return w_q.dim(2); }
};

namespace detail {

template <typename T>
Tensor<T> column_slices(const Tensor<T>& w, std::size_t n) {
  const std::size_t d = w.dim(0), width = w.dim(1), dh = width / n;
  std::vector<T> out(n * d * dh);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t rw = 0; rw < d; ++rw)
      for (std::size_t c = 0; c < dh; ++c)
        out[(i * d + rw) * dh + c] = w.data()[rw * width + i * dh + c];
  return Tensor<T>::from_data({n, d, dh}, std::move(out));
}

}  // namespace detail

template <typename T>
AttnExpertGroup<T> partition_attention(const Tensor<T>& wq, const Tensor<T>& wk,
                                       const Tensor<T>& wv, const Tensor<T>& wo,
                                       std::size_t n) {
  if (wq.ndim() != 2 || wk.shape() != wq.shape() || wv.shape() != wq.shape() ||
      wo.ndim() != 2 || wo.dim(0) != wq.dim(1) || wo.dim(1) != wq.dim(0))
    throw ShapeError("partition_attention: inconsistent projection shapes " +
                     to_string(wq.shape()) + " / " + to_string(wo.shape()));
  const std::size_t width = wq.dim(1);
  if (n == 0 || width % n != 0)
    throw ConfigError("partition_attention: projection width " +
                      std::to_string(width) + " not divisible by " +
                      std::to_string(n) + " experts");
  AttnExpertGroup<T> g;
  g.n = n;
  g.w_q = detail::column_slices(wq, n);
  g.w_k = detail::column_slices(wk, n);
  g.w_v = detail::column_slices(wv, n);
  const std::size_t dh = width / n, d = wq.dim(0);
  std::vector<T> wo_s(n * dh * d);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(wo.data().data() + i * dh * d, dh * d,
                wo_s.data() + i * dh * d);
  g.w_o = Tensor<T>::from_data({n, dh, d}, std::move(wo_s));
  return g;
}

template <typename T>
struct DenseAttentionWeights {
  Tensor<T> wq, wk, wv, wo;
};

template <typename T>
DenseAttentionWeights<T> reconstruct_attention(const AttnExpertGroup<T>& g) {
  const std::size_t n = g.n, d = g.d(), dh = g.d_h();
  auto merge_cols = [&](const Tensor<T>& s) {
    std::vector<T> w(d * n * dh);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t rw = 0; rw < d; ++rw)
        for (std::size_t c = 0; c < dh; ++c)
          w[rw * n * dh + i * dh + c] = s.data()[(i * d + rw) * dh + c];
    return Tensor<T>::from_data({d, n * dh}, std::move(w));
  };
  std::vector<T> wo(n * dh * d);
  std::copy_n(g.w_o.data().data(), n * dh * d, wo.data());
  return {merge_cols(g.w_q), merge_cols(g.w_k), merge_cols(g.w_v),
          Tensor<T>::from_data({n * dh, d}, std::move(wo))};
}

}  // namespace uoe
