#pragma once

// Gated multi-scale retention: h heads, each with its own fixed decay rate,
// normalized per head and gated by swish(X W_G).

#include <cmath>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "retnet/retention.hpp"

namespace retnet {

enum class GammaVariant { standard, log_spaced };

inline std::string to_string(GammaVariant v) { return v == GammaVariant::standard ? "default" : "paper_experiments"; }

inline GammaVariant parse_gamma_variant(const std::string& s) {
  if (s == "default" || s == "standard") return GammaVariant::standard;
  if (s == "paper_experiments" || s == "log_spaced") return GammaVariant::log_spaced;
  throw std::invalid_argument("unknown gamma variant '" + s + "'");
}

/// Per-head decay rates.
///   standard:   γ_i = 1 − 2^(−5−i)
///   log_spaced: γ = 1 − exp(linspace(log 1/32, log 1/512, h))
inline std::vector<double> gamma_schedule(std::size_t heads, GammaVariant variant = GammaVariant::standard) {
  if (heads < 1) throw ShapeError("gamma_schedule: need at least one head");
  std::vector<double> g(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    if (variant == GammaVariant::standard) {
      g[i] = 1.0 - std::ldexp(1.0, -5 - static_cast<int>(i));
    } else {
      const double lo = std::log(1.0 / 32.0), hi = std::log(1.0 / 512.0);
      const double t = heads == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(heads - 1);
      g[i] = 1.0 - std::exp(lo + (hi - lo) * t);
    }
  }
  if (variant == GammaVariant::log_spaced) {
    // exp(log(2^-k)) is not always exactly 2^-k in floating point; snap
    // the two endpoints to their closed forms.
    g.front() = 1.0 - 1.0 / 32.0;
    if (heads > 1) g.back() = 1.0 - 1.0 / 512.0;
  }
  return g;
}

/// Table-7 style switches. All default to the full layer.
struct AblationFlags {
  bool no_gate = false;
  bool no_groupnorm = false;
  bool no_decay = false;      // γ = 1 on every head
  bool single_scale = false;  // γ = 127/128 on every head
  std::optional<std::size_t> head_dim_override;

  bool operator==(const AblationFlags&) const = default;
};

enum class Paradigm { parallel, chunkwise, recurrent };

inline std::string to_string(Paradigm p) {
  switch (p) {
    case Paradigm::parallel: return "parallel";
    case Paradigm::chunkwise: return "chunkwise";
    case Paradigm::recurrent: return "recurrent";
  }
  return "?";
}

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "parallel") return Paradigm::parallel;
  if (s == "chunkwise") return Paradigm::chunkwise;
  if (s == "recurrent") return Paradigm::recurrent;
  throw std::invalid_argument("unknown paradigm '" + s + "'");
}

/// Static shape and behaviour of one MSR layer.
struct MsrConfig {
  std::size_t d_model = 64;
  std::size_t heads = 2;
  GammaVariant gamma_variant = GammaVariant::standard;
  AblationFlags flags;
  NormalizationConfig norm;
  bool groupnorm_affine = true;
  double rotation_base = 10000.0;

  /// Head count after applying head_dim_override.
  std::size_t effective_heads() const {
    if (flags.head_dim_override) {
      const std::size_t hd = *flags.head_dim_override;
      if (hd == 0 || d_model % hd != 0)
        throw ShapeError("MsrConfig: head dimension " + std::to_string(hd) + " does not divide d_model " + std::to_string(d_model));
      return d_model / hd;
    }
    return heads;
  }
  std::size_t qk_head_dim() const { return d_model / effective_heads(); }
  std::size_t v_head_dim() const { return 2 * d_model / effective_heads(); }

  void validate() const {
    const std::size_t h = effective_heads();
    if (h == 0 || d_model % h != 0)
      throw ShapeError("MsrConfig: " + std::to_string(h) + " heads do not divide d_model " + std::to_string(d_model));
    if (qk_head_dim() % 2 != 0) throw ShapeError("MsrConfig: query/key head dimension must be even for the rotation");
    if (flags.no_decay && flags.single_scale) throw ShapeError("MsrConfig: no_decay and single_scale are exclusive");
  }

  std::vector<double> gammas() const {
    const std::size_t h = effective_heads();
    if (flags.no_decay) return std::vector<double>(h, 1.0);
    if (flags.single_scale) return std::vector<double>(h, 127.0 / 128.0);
    return gamma_schedule(h, gamma_variant);
  }
};

/// W_Q, W_K: d×d; W_V, W_G: d×2d; W_O: 2d×d; GroupNorm gain/bias: 1×2d.
template <class X>
struct MsrParams {
  X wq, wk, wv, wg, wo;
  X gn_gain, gn_bias;
};

/// Trainable parameters of the layer excluding normalization affine terms.
inline std::size_t msr_param_count(std::size_t d, std::size_t heads = 1) {
  if (heads == 0 || d % heads != 0) throw ShapeError("msr_param_count: heads must divide d");
  return d * d + d * d + d * 2 * d + d * 2 * d + 2 * d * d;
}

template <class X>
struct MsrState {
  std::vector<RetentionState<X>> heads;

  static MsrState zeros(const MsrConfig& cfg) {
    MsrState st;
    const std::size_t h = cfg.effective_heads();
    for (std::size_t i = 0; i < h; ++i) st.heads.push_back(RetentionState<X>::zeros(cfg.qk_head_dim(), cfg.v_head_dim()));
    return st;
  }

  long position() const { return heads.empty() ? 0 : heads.front().position; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& h : heads) n += h.element_count();
    return n;
  }
};

/// Pre-normalization concatenated head outputs (len×2d). Exposed for
/// head-isolation and normalization-neutrality checks.
template <class X>
X msr_heads(const X& x, const MsrParams<X>& p, const MsrConfig& cfg, Paradigm paradigm, std::size_t chunk_size,
            std::type_identity_t<MsrState<X>>* state, bool flip_inner_decay = false) {
  using T = scalar_of<X>;
  cfg.validate();
  const std::size_t h = cfg.effective_heads();
  const std::size_t dk = cfg.qk_head_dim(), dv = cfg.v_head_dim();
  const auto gammas = cfg.gammas();
  detail::check(value_of(x).cols() == cfg.d_model, "msr_forward: input width " + std::to_string(value_of(x).cols()) + " != d_model " + std::to_string(cfg.d_model));

  if (paradigm == Paradigm::parallel) {
    detail::check(state == nullptr || state->position() == 0,
                  "msr_forward: parallel paradigm cannot continue from a non-empty state");
  } else {
    detail::check(state != nullptr, "msr_forward: " + to_string(paradigm) + " paradigm requires a state");
    if (state->heads.empty()) *state = MsrState<X>::zeros(cfg);
    detail::check(state->heads.size() == h, "msr_forward: state has " + std::to_string(state->heads.size()) + " heads, layer has " + std::to_string(h));
  }
  const long pos0 = (paradigm == Paradigm::parallel) ? 0 : state->position();
  const std::size_t len = value_of(x).rows();

  X q = matmul(x, p.wq);
  X k = matmul(x, p.wk);
  X v = matmul(x, p.wv);
  std::vector<X> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    X qi = apply_xpos(slice_cols(q, i * dk, (i + 1) * dk), pos0, +1, cfg.rotation_base);
    X ki = apply_xpos(slice_cols(k, i * dk, (i + 1) * dk), pos0, +1, cfg.rotation_base);
    X vi = slice_cols(v, i * dv, (i + 1) * dv);
    const T gamma = static_cast<T>(gammas[i]);
    switch (paradigm) {
      case Paradigm::parallel:
        heads.push_back(retention_parallel(qi, ki, vi, decay_mask<T>(gamma, len, cfg.norm), cfg.norm));
        break;
      case Paradigm::chunkwise: {
        auto r = retention_chunkwise(qi, ki, vi, state->heads[i], gamma, chunk_size, cfg.norm, flip_inner_decay);
        heads.push_back(std::move(r.output));
        state->heads[i] = std::move(r.state);
        break;
      }
      case Paradigm::recurrent: {
        auto r = retention_recurrent(qi, ki, vi, state->heads[i], gamma, cfg.norm);
        heads.push_back(std::move(r.output));
        state->heads[i] = std::move(r.state);
        break;
      }
    }
  }
  return h == 1 ? heads[0] : concat_cols(std::span<const X>(heads));
}

/// MSR(X) = (swish(X W_G) ⊙ GroupNorm_h(Concat(head_1..head_h))) W_O.
template <class X>
X msr_forward(const X& x, const MsrParams<X>& p, const MsrConfig& cfg, Paradigm paradigm, std::size_t chunk_size,
              std::type_identity_t<MsrState<X>>* state, bool flip_inner_decay = false) {
  using T = scalar_of<X>;
  X y = msr_heads(x, p, cfg, paradigm, chunk_size, state, flip_inner_decay);
  if (!cfg.flags.no_groupnorm) {
    y = group_norm(y, cfg.effective_heads(), default_norm_eps<T>());
    if (cfg.groupnorm_affine) y = affine(y, p.gn_gain, p.gn_bias);
  }
  if (!cfg.flags.no_gate) y = hadamard(swish(matmul(x, p.wg)), y);
  return matmul(y, p.wo);
}

}  // namespace retnet
