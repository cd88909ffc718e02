#pragma once

// Single-head retention in its three computation forms.
//
// All three forms compute, for every row n,
//
//   raw_n    = Σ_{m≤n} γ^(n−m) (q_n·k_m) v_m
//   rawsum_n = Σ_{m≤n} γ^(n−m) (q_n·k_m)
//
// and then apply the same per-row rescaling selected by
// NormalizationConfig: a_n = [1/√d_k] · [1/√(Σ_{i≤n} γ^(n−i))], followed by
// division by max(|a_n·rawsum_n|, 1). The parallel form evaluates this
// literally through the normalized decay mask; the recurrent and chunkwise
// forms carry the running sums needed to reproduce it exactly.
//
// Every function is a template over the value type X (Tensor<T> or Var<T>)
// so the training path differentiates the very same code.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "retnet/autodiff.hpp"
#include "retnet/ops.hpp"

namespace retnet {

struct NormalizationConfig {
  bool scale_qk = true;       // QK^T / √d_k
  bool normalize_D = true;    // D_nm / √(Σ_i D_ni)
  bool clamp_row_sum = true;  // R_nm / max(|Σ_i R_ni|, 1)

  static NormalizationConfig none() { return {false, false, false}; }
  bool operator==(const NormalizationConfig&) const = default;
};

template <class T>
struct DecayMask {
  T gamma = 1;
  std::size_t length = 0;
  Tensor<T> matrix;         // length×length, lower triangular
  std::vector<T> row_sums;  // Σ_i γ^(n−i) of the raw mask
  bool normalized = false;
};

namespace detail {

// Raw γ^(n−m) mask without the public range check (γ = 0 allowed).
template <class T>
Tensor<T> raw_decay(T gamma, std::size_t length) {
  Tensor<T> m({length, length});
  for (std::size_t n = 0; n < length; ++n)
    for (std::size_t j = 0; j <= n; ++j) m(n, j) = static_cast<T>(std::pow(static_cast<double>(gamma), static_cast<double>(n - j)));
  return m;
}

}  // namespace detail

/// Causal exponential-decay mask D_nm = γ^(n−m) (n ≥ m), optionally with
/// every row divided by √(Σ_i D_ni).
template <class T>
DecayMask<T> decay_mask(T gamma, std::size_t length, const NormalizationConfig& cfg = {}) {
  if (!(gamma > T(0) && gamma <= T(1)))
    throw ShapeError("decay_mask: gamma " + std::to_string(gamma) + " outside (0, 1]");
  if (length < 1) throw ShapeError("decay_mask: length must be at least 1");
  DecayMask<T> mask;
  mask.gamma = gamma;
  mask.length = length;
  mask.matrix = detail::raw_decay(gamma, length);
  mask.row_sums.resize(length);
  for (std::size_t n = 0; n < length; ++n) {
    T s = 0;
    for (std::size_t j = 0; j <= n; ++j) s += mask.matrix(n, j);
    mask.row_sums[n] = s;
  }
  if (cfg.normalize_D) {
    mask.normalized = true;
    for (std::size_t n = 0; n < length; ++n) {
      const T inv = T(1) / std::sqrt(mask.row_sums[n]);
      for (auto& v : mask.matrix.row_span(n)) v *= inv;
    }
  }
  return mask;
}

/// Recurrent memory of one head. `s` is d_k×d_v, `k_sum` is 1×d_k.
template <class X>
struct RetentionState {
  using T = scalar_of<X>;
  X s;
  X k_sum;
  T scale = 0;  // Σ_{i≤n} γ^(n−i)
  long position = 0;

  static RetentionState zeros(std::size_t dk, std::size_t dv) {
    RetentionState st;
    st.s = make_constant<X>(Tensor<T>({dk, dv}));
    st.k_sum = make_constant<X>(Tensor<T>({1, dk}));
    return st;
  }

  /// Floats held by the state; independent of position.
  std::size_t element_count() const { return value_of(s).size() + value_of(k_sum).size() + 1; }
};

/// Positions first_position, first_position+1, … applied to consecutive rows.
template <class X>
X apply_xpos(const X& x, long first_position, int sign, double base = 10000.0) {
  using T = scalar_of<X>;
  const auto theta = rotation_angles<T>(value_of(x).cols(), base);
  return rotate_rows(x, std::span<const T>(theta), first_position, sign);
}

/// Arbitrary per-row positions (Tensor only).
template <class T>
Tensor<T> apply_xpos(const Tensor<T>& x, std::span<const long> positions, int sign, double base = 10000.0) {
  detail::check(positions.size() == x.rows(), "apply_xpos: one position per row required");
  const auto theta = rotation_angles<T>(x.cols(), base);
  std::vector<Tensor<T>> rows;
  rows.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    rows.push_back(rotate_pairs(slice_rows(x, i, i + 1), std::span<const T>(theta), positions[i], sign));
  return concat_rows(std::span<const Tensor<T>>(rows));
}

namespace detail {

template <class X>
void check_qkv(const X& q, const X& k, const X& v, const char* op) {
  const auto& Q = value_of(q);
  const auto& K = value_of(k);
  const auto& V = value_of(v);
  check(Q.rank() == 2 && K.rank() == 2 && V.rank() == 2, std::string(op) + ": q, k, v must be matrices");
  check(Q.shape() == K.shape(), std::string(op) + ": q " + shape_str(Q.shape()) + " and k " + shape_str(K.shape()) + " differ");
  check(V.rows() == Q.rows(), std::string(op) + ": v has " + std::to_string(V.rows()) + " rows, q has " + std::to_string(Q.rows()));
}

template <class T>
T qk_factor(std::size_t dk, const NormalizationConfig& cfg) {
  return cfg.scale_qk ? T(1) / std::sqrt(static_cast<T>(dk)) : T(1);
}

}  // namespace detail

/// (QK^T ⊙ D)V over a full sequence starting at position 0. q and k must
/// already carry their position rotation.
template <class X>
X retention_parallel(const X& q, const X& k, const X& v, const DecayMask<scalar_of<X>>& mask,
                     const NormalizationConfig& cfg) {
  using T = scalar_of<X>;
  detail::check_qkv(q, k, v, "retention_parallel");
  const std::size_t len = value_of(q).rows();
  detail::check(mask.length == len, "retention_parallel: mask length " + std::to_string(mask.length) + " != sequence length " + std::to_string(len));
  detail::check(mask.normalized == cfg.normalize_D, "retention_parallel: mask normalization disagrees with config");
  X scores = matmul_nt(q, k);
  if (cfg.scale_qk) scores = scale(scores, detail::qk_factor<T>(value_of(q).cols(), cfg));
  X r = mul_const(scores, mask.matrix);
  X out = matmul(r, v);
  if (cfg.clamp_row_sum) out = clamp_rows(out, row_sum(r));
  return out;
}

template <class X>
struct StepResult {
  X output;
  RetentionState<X> state;
};

/// One recurrent step: S_n = γ S_{n−1} + k_n^T v_n, output q_n S_n (then
/// rescaled). q, k are 1×d_k rotated for state.position; v is 1×d_v.
template <class X>
StepResult<X> retention_recurrent_step(const X& q, const X& k, const X& v, const RetentionState<X>& state,
                                       scalar_of<X> gamma, const NormalizationConfig& cfg) {
  using T = scalar_of<X>;
  detail::check_qkv(q, k, v, "retention_recurrent_step");
  detail::check(value_of(q).rows() == 1, "retention_recurrent_step: expects a single row");
  StepResult<X> res;
  res.state.s = add(scale(state.s, gamma), matmul_tn(k, v));
  res.state.scale = gamma * state.scale + T(1);
  res.state.position = state.position + 1;

  T a = detail::qk_factor<T>(value_of(q).cols(), cfg);
  if (cfg.normalize_D) a /= std::sqrt(res.state.scale);
  X out = scale(matmul(q, res.state.s), a);
  if (cfg.clamp_row_sum) {
    res.state.k_sum = add(scale(state.k_sum, gamma), k);
    out = clamp_rows(out, scale(matmul_nt(q, res.state.k_sum), a));
  } else {
    res.state.k_sum = state.k_sum;
  }
  res.output = std::move(out);
  return res;
}

/// One chunk of the chunkwise form. Rows of q, k, v are consecutive
/// positions starting at state.position; the chunk may be shorter than the
/// nominal chunk size (final chunk).
///
/// Within-chunk index j (0-based), chunk length b:
///   cross-chunk term for row j  = (q_j · S_prev) γ^(j+1)
///   state update                = γ^b S_prev + Σ_j γ^(b−1−j) k_j^T v_j
template <class X>
StepResult<X> retention_chunk(const X& q, const X& k, const X& v, const RetentionState<X>& state,
                              scalar_of<X> gamma, const NormalizationConfig& cfg, bool flip_inner_decay = false) {
  using T = scalar_of<X>;
  detail::check_qkv(q, k, v, "retention_chunk");
  const std::size_t b = value_of(q).rows();
  detail::check(b >= 1, "retention_chunk: empty chunk");
  const double g = static_cast<double>(gamma);

  std::vector<T> xi(b), zeta(b), a(b);
  for (std::size_t j = 0; j < b; ++j) {
    xi[j] = static_cast<T>(std::pow(g, static_cast<double>(j + 1)));
    // flip_inner_decay reproduces the other reading of the ambiguous
    // exponent; it is wrong and exists only to prove the equivalence suite
    // catches it.
    zeta[j] = static_cast<T>(std::pow(g, static_cast<double>(flip_inner_decay ? j : b - 1 - j)));
  }
  const T qk = detail::qk_factor<T>(value_of(q).cols(), cfg);
  T running = state.scale;
  for (std::size_t j = 0; j < b; ++j) {
    running = gamma * running + T(1);
    a[j] = cfg.normalize_D ? qk / std::sqrt(running) : qk;
  }

  const Tensor<T> inner_mask = detail::raw_decay(gamma, b);
  X r = mul_const(matmul_nt(q, k), inner_mask);
  X raw = add(matmul(r, v), scale_rows(matmul(q, state.s), std::span<const T>(xi)));
  X out = scale_rows(raw, std::span<const T>(a));

  StepResult<X> res;
  const T decay_b = static_cast<T>(std::pow(g, static_cast<double>(b)));
  X kz = scale_rows(k, std::span<const T>(zeta));
  res.state.s = add(scale(state.s, decay_b), matmul_tn(kz, v));
  res.state.scale = running;
  res.state.position = state.position + static_cast<long>(b);
  if (cfg.clamp_row_sum) {
    X rawsum = add(row_sum(r), scale_rows(matmul_nt(q, state.k_sum), std::span<const T>(xi)));
    out = clamp_rows(out, scale_rows(rawsum, std::span<const T>(a)));
    res.state.k_sum = add(scale(state.k_sum, decay_b), col_sum(kz));
  } else {
    res.state.k_sum = state.k_sum;
  }
  res.output = std::move(out);
  return res;
}

/// Whole sequence in chunks of `chunk_size`, continuing from `state`.
template <class X>
StepResult<X> retention_chunkwise(const X& q, const X& k, const X& v, const RetentionState<X>& state,
                                  scalar_of<X> gamma, std::size_t chunk_size, const NormalizationConfig& cfg,
                                  bool flip_inner_decay = false) {
  detail::check(chunk_size >= 1, "retention_chunkwise: chunk size must be at least 1");
  detail::check_qkv(q, k, v, "retention_chunkwise");
  const std::size_t len = value_of(q).rows();
  std::vector<X> outs;
  RetentionState<X> st = state;
  for (std::size_t start = 0; start < len; start += chunk_size) {
    const std::size_t end = std::min(len, start + chunk_size);
    auto r = retention_chunk(slice_rows(q, start, end), slice_rows(k, start, end), slice_rows(v, start, end), st, gamma,
                             cfg, flip_inner_decay);
    outs.push_back(std::move(r.output));
    st = std::move(r.state);
  }
  StepResult<X> res;
  res.output = outs.size() == 1 ? outs[0] : concat_rows(std::span<const X>(outs));
  res.state = std::move(st);
  return res;
}

/// Recurrent form over a whole sequence (row by row).
template <class X>
StepResult<X> retention_recurrent(const X& q, const X& k, const X& v, const RetentionState<X>& state,
                                  scalar_of<X> gamma, const NormalizationConfig& cfg) {
  detail::check_qkv(q, k, v, "retention_recurrent");
  const std::size_t len = value_of(q).rows();
  std::vector<X> outs;
  outs.reserve(len);
  RetentionState<X> st = state;
  for (std::size_t i = 0; i < len; ++i) {
    auto r = retention_recurrent_step(slice_rows(q, i, i + 1), slice_rows(k, i, i + 1), slice_rows(v, i, i + 1), st,
                                      gamma, cfg);
    outs.push_back(std::move(r.output));
    st = std::move(r.state);
  }
  StepResult<X> res;
  res.output = outs.size() == 1 ? outs[0] : concat_rows(std::span<const X>(outs));
  res.state = std::move(st);
  return res;
}

}  // namespace retnet
