#pragma once

// Decoder-only language models built from pre-LayerNorm residual blocks:
//
//   Y = Mix(LN(X)) + X
//   X' = FFN(LN(Y)) + Y,   FFN(X) = gelu(X W_1) W_2
//
// Mix is gated multi-scale retention (Arch::retnet) or causal softmax
// attention (Arch::transformer). Both use the same rotation on queries and
// keys; at equal (layers, d_model) the two blocks hold 12·d² non-norm
// parameters each.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "retnet/msr.hpp"

namespace retnet {

enum class Arch { retnet, transformer };

inline std::string to_string(Arch a) { return a == Arch::retnet ? "retnet" : "transformer"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "retnet") return Arch::retnet;
  if (s == "transformer" || s == "baseline") return Arch::transformer;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

struct ModelConfig {
  Arch arch = Arch::retnet;
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t vocab_size = 258;
  std::size_t ffn_dim = 0;  // 0 selects 2·d_model (retnet) or 4·d_model (transformer)
  Paradigm paradigm = Paradigm::parallel;
  std::size_t chunk_size = 32;
  AblationFlags flags;
  GammaVariant gamma_variant = GammaVariant::standard;
  NormalizationConfig norm;
  bool groupnorm_affine = true;
  bool tie_embeddings = true;
  double dropout = 0.0;
  double init_std = 0.02;
  double rotation_base = 10000.0;
  Precision precision = Precision::fp64;
  std::uint64_t seed = 0;

  std::size_t ffn() const {
    if (ffn_dim) return ffn_dim;
    return arch == Arch::retnet ? 2 * d_model : 4 * d_model;
  }

  std::size_t attention_head_dim() const { return d_model / heads; }

  MsrConfig msr() const {
    MsrConfig m;
    m.d_model = d_model;
    m.heads = heads;
    m.gamma_variant = gamma_variant;
    m.flags = flags;
    m.norm = norm;
    m.groupnorm_affine = groupnorm_affine;
    m.rotation_base = rotation_base;
    return m;
  }

  void validate() const {
    if (d_model == 0 || heads == 0) throw ShapeError("ModelConfig: d_model and heads must be positive");
    if (vocab_size == 0) throw ShapeError("ModelConfig: vocab_size must be positive");
    if (chunk_size == 0) throw ShapeError("ModelConfig: chunk_size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ShapeError("ModelConfig: dropout must lie in [0, 1)");
    if (arch == Arch::retnet) {
      msr().validate();
    } else {
      if (d_model % heads != 0) throw ShapeError("ModelConfig: heads must divide d_model");
      if (attention_head_dim() % 2 != 0) throw ShapeError("ModelConfig: attention head dimension must be even");
      if (paradigm != Paradigm::parallel) throw ShapeError("ModelConfig: the transformer baseline trains in the parallel paradigm only");
      if (flags != AblationFlags{}) throw ShapeError("ModelConfig: ablation flags apply to retnet only");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <class X>
struct RetBlockParams {
  X ln1_gain, ln1_bias;
  MsrParams<X> msr;
  X ln2_gain, ln2_bias, w1, w2;
};

template <class X>
struct AttnBlockParams {
  X ln1_gain, ln1_bias;
  X wq, wk, wv, wo;
  X ln2_gain, ln2_bias, w1, w2;
};

template <class X>
struct ModelParams {
  X embed;  // vocab×d
  X head;   // d×vocab, absent when tied
  std::vector<RetBlockParams<X>> ret_blocks;
  std::vector<AttnBlockParams<X>> attn_blocks;
  X final_gain, final_bias;
};

template <class T>
bool present(const Tensor<T>& t) {
  return !t.empty();
}
template <class T>
bool present(const Var<T>& v) {
  return v.defined();
}

/// Calls f(name, member) for every parameter slot in a fixed order,
/// including absent ones (callers test with present()).
template <class P, class F>
void visit_param_slots(P& p, F&& f) {
  f(std::string("embed"), p.embed);
  f(std::string("head"), p.head);
  for (std::size_t l = 0; l < p.ret_blocks.size(); ++l) {
    auto& b = p.ret_blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    f(pre + "ln1.gain", b.ln1_gain);
    f(pre + "ln1.bias", b.ln1_bias);
    f(pre + "msr.wq", b.msr.wq);
    f(pre + "msr.wk", b.msr.wk);
    f(pre + "msr.wv", b.msr.wv);
    f(pre + "msr.wg", b.msr.wg);
    f(pre + "msr.wo", b.msr.wo);
    f(pre + "msr.gn.gain", b.msr.gn_gain);
    f(pre + "msr.gn.bias", b.msr.gn_bias);
    f(pre + "ln2.gain", b.ln2_gain);
    f(pre + "ln2.bias", b.ln2_bias);
    f(pre + "ffn.w1", b.w1);
    f(pre + "ffn.w2", b.w2);
  }
  for (std::size_t l = 0; l < p.attn_blocks.size(); ++l) {
    auto& b = p.attn_blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    f(pre + "ln1.gain", b.ln1_gain);
    f(pre + "ln1.bias", b.ln1_bias);
    f(pre + "attn.wq", b.wq);
    f(pre + "attn.wk", b.wk);
    f(pre + "attn.wv", b.wv);
    f(pre + "attn.wo", b.wo);
    f(pre + "ln2.gain", b.ln2_gain);
    f(pre + "ln2.bias", b.ln2_bias);
    f(pre + "ffn.w1", b.w1);
    f(pre + "ffn.w2", b.w2);
  }
  f(std::string("final_ln.gain"), p.final_gain);
  f(std::string("final_ln.bias"), p.final_bias);
}

/// Calls f(name, member) for present parameters only.
template <class P, class F>
void for_each_param(P& p, F&& f) {
  visit_param_slots(p, [&](const std::string& name, auto& x) {
    if (present(x)) f(name, x);
  });
}

/// Same layout, each present slot mapped through fn.
template <class Y, class X, class Fn>
ModelParams<Y> map_params(const ModelParams<X>& in, Fn&& fn) {
  ModelParams<Y> out;
  out.ret_blocks.resize(in.ret_blocks.size());
  out.attn_blocks.resize(in.attn_blocks.size());
  std::vector<Y*> dst;
  visit_param_slots(out, [&](const std::string&, Y& y) { dst.push_back(&y); });
  std::size_t i = 0;
  visit_param_slots(in, [&](const std::string& name, const X& x) {
    if (present(x)) *dst[i] = fn(name, x);
    ++i;
  });
  return out;
}

template <class T>
ModelParams<Var<T>> as_leaves(const ModelParams<Tensor<T>>& p) {
  return map_params<Var<T>>(p, [](const std::string&, const Tensor<T>& t) { return Var<T>::leaf(t); });
}

template <class T>
ModelParams<Tensor<T>> grads_of(const ModelParams<Var<T>>& p) {
  return map_params<Tensor<T>>(p, [](const std::string&, const Var<T>& v) { return v.grad(); });
}

template <class X>
std::size_t param_count(const ModelParams<X>& p) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string&, const X& x) { n += value_of(x).size(); });
  return n;
}

namespace detail {

inline bool is_norm_param(const std::string& name) {
  return name.find("ln") != std::string::npos || name.find(".gn.") != std::string::npos;
}

}  // namespace detail

/// Parameters outside embedding/output head, optionally excluding
/// normalization gains and biases.
template <class X>
std::size_t non_embedding_param_count(const ModelParams<X>& p, bool include_norm = false) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string& name, const X& x) {
    if (name == "embed" || name == "head") return;
    if (!include_norm && detail::is_norm_param(name)) return;
    n += value_of(x).size();
  });
  return n;
}

/// Non-norm parameters of one block implied by the config alone.
inline std::size_t block_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  if (cfg.arch == Arch::retnet) {
    std::size_t mix = msr_param_count(d, cfg.msr().effective_heads());
    if (cfg.flags.no_gate) mix -= 2 * d * d;
    return mix + 2 * d * cfg.ffn();
  }
  return 4 * d * d + 2 * d * cfg.ffn();
}

/// Truncated normal (±2σ): σ = init_std for input-side matrices and
/// embeddings, init_std/√(2L) for output-side projections (W_O and the
/// second FFN matrix). Norm gains start at 1, biases at 0.
template <class T>
ModelParams<Tensor<T>> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model, f = cfg.ffn(), V = cfg.vocab_size;
  const double std_in = cfg.init_std;
  const double std_out = cfg.init_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.layers, 1)));
  auto mat = [&](std::size_t r, std::size_t c, double s) {
    Tensor<T> t({r, c});
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(s));
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor<T>({1, n}, T(1)); };
  auto zeros = [](std::size_t n) { return Tensor<T>({1, n}); };

  ModelParams<Tensor<T>> p;
  p.embed = mat(V, d, std_in);
  if (!cfg.tie_embeddings) p.head = mat(d, V, std_in);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (cfg.arch == Arch::retnet) {
      RetBlockParams<Tensor<T>> b;
      b.ln1_gain = ones(d);
      b.ln1_bias = zeros(d);
      b.msr.wq = mat(d, d, std_in);
      b.msr.wk = mat(d, d, std_in);
      b.msr.wv = mat(d, 2 * d, std_in);
      if (!cfg.flags.no_gate) b.msr.wg = mat(d, 2 * d, std_in);
      b.msr.wo = mat(2 * d, d, std_out);
      if (cfg.groupnorm_affine && !cfg.flags.no_groupnorm) {
        b.msr.gn_gain = ones(2 * d);
        b.msr.gn_bias = zeros(2 * d);
      }
      b.ln2_gain = ones(d);
      b.ln2_bias = zeros(d);
      b.w1 = mat(d, f, std_in);
      b.w2 = mat(f, d, std_out);
      p.ret_blocks.push_back(std::move(b));
    } else {
      AttnBlockParams<Tensor<T>> b;
      b.ln1_gain = ones(d);
      b.ln1_bias = zeros(d);
      b.wq = mat(d, d, std_in);
      b.wk = mat(d, d, std_in);
      b.wv = mat(d, d, std_in);
      b.wo = mat(d, d, std_out);
      b.ln2_gain = ones(d);
      b.ln2_bias = zeros(d);
      b.w1 = mat(d, f, std_in);
      b.w2 = mat(f, d, std_out);
      p.attn_blocks.push_back(std::move(b));
    }
  }
  p.final_gain = ones(d);
  p.final_bias = zeros(d);
  return p;
}

// ---------------------------------------------------------------------------
// Forward

template <class X>
struct ModelState {
  std::vector<MsrState<X>> layers;

  long position() const { return layers.empty() ? 0 : layers.front().position(); }
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.element_count();
    return n;
  }
};

struct ForwardOptions {
  Rng* dropout_rng = nullptr;     // dropout active only when set
  bool flip_inner_decay = false;  // equivalence-suite fault injection
};

namespace detail {

template <class X>
X layer_norm_affine(const X& x, const X& gain, const X& bias) {
  return affine(layer_norm(x, default_norm_eps<scalar_of<X>>()), gain, bias);
}

template <class X>
X maybe_dropout(const X& x, double p, Rng* rng) {
  using T = scalar_of<X>;
  if (p <= 0.0 || rng == nullptr) return x;
  const auto& v = value_of(x);
  Tensor<T> mask(v.shape());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask.data()) m = rng->uniform() < p ? T(0) : keep;
  return mul_const(x, mask);
}

template <class X>
X ffn(const X& x, const X& w1, const X& w2) {
  return matmul(gelu(matmul(x, w1)), w2);
}

template <class X>
X causal_attention(const X& x, const AttnBlockParams<X>& b, const ModelConfig& cfg) {
  using T = scalar_of<X>;
  const std::size_t h = cfg.heads, dh = cfg.attention_head_dim();
  X q = matmul(x, b.wq);
  X k = matmul(x, b.wk);
  X v = matmul(x, b.wv);
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<X> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    X qi = apply_xpos(slice_cols(q, i * dh, (i + 1) * dh), 0, +1, cfg.rotation_base);
    X ki = apply_xpos(slice_cols(k, i * dh, (i + 1) * dh), 0, +1, cfg.rotation_base);
    X vi = slice_cols(v, i * dh, (i + 1) * dh);
    heads.push_back(matmul(causal_softmax(scale(matmul_nt(qi, ki), inv)), vi));
  }
  X cat = h == 1 ? heads[0] : concat_cols(std::span<const X>(heads));
  return matmul(cat, b.wo);
}

}  // namespace detail

/// Logits [len×vocab] for a token sequence. For the retnet, `paradigm`
/// selects how retention is evaluated; recurrent and chunkwise continue
/// from (and update) `state` when one is given.
template <class X>
X model_forward(std::span<const int> tokens, const ModelConfig& cfg, const ModelParams<X>& p, Paradigm paradigm,
                std::size_t chunk_size, std::type_identity_t<ModelState<X>>* state = nullptr, const ForwardOptions& opt = {}) {
  detail::check(!tokens.empty(), "model_forward: empty token sequence");
  for (int t : tokens)
    detail::check(t >= 0 && static_cast<std::size_t>(t) < cfg.vocab_size,
                  "model_forward: token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
  X x = embedding(p.embed, tokens);
  if (cfg.arch == Arch::retnet) {
    const MsrConfig mcfg = cfg.msr();
    ModelState<X> local;
    ModelState<X>* st = state ? state : &local;
    if (st->layers.size() != cfg.layers) st->layers.assign(cfg.layers, MsrState<X>{});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& b = p.ret_blocks[l];
      MsrState<X>* ls = paradigm == Paradigm::parallel ? nullptr : &st->layers[l];
      X m = msr_forward(detail::layer_norm_affine(x, b.ln1_gain, b.ln1_bias), b.msr, mcfg, paradigm, chunk_size, ls,
                        opt.flip_inner_decay);
      X y = add(x, detail::maybe_dropout(m, cfg.dropout, opt.dropout_rng));
      X f = detail::ffn(detail::layer_norm_affine(y, b.ln2_gain, b.ln2_bias), b.w1, b.w2);
      x = add(y, detail::maybe_dropout(f, cfg.dropout, opt.dropout_rng));
    }
  } else {
    detail::check(paradigm == Paradigm::parallel && state == nullptr,
                  "model_forward: the transformer baseline runs the parallel form; use baseline_decode_step for incremental decoding");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& b = p.attn_blocks[l];
      X a = detail::causal_attention(detail::layer_norm_affine(x, b.ln1_gain, b.ln1_bias), b, cfg);
      X y = add(x, detail::maybe_dropout(a, cfg.dropout, opt.dropout_rng));
      X f = detail::ffn(detail::layer_norm_affine(y, b.ln2_gain, b.ln2_bias), b.w1, b.w2);
      x = add(y, detail::maybe_dropout(f, cfg.dropout, opt.dropout_rng));
    }
  }
  x = detail::layer_norm_affine(x, p.final_gain, p.final_bias);
  return cfg.tie_embeddings ? matmul_nt(x, p.embed) : matmul(x, p.head);
}

/// Convenience: plain-tensor forward in the config's own paradigm.
template <class T>
Tensor<T> forward(std::span<const int> tokens, const ModelConfig& cfg, const ModelParams<Tensor<T>>& p) {
  return model_forward(tokens, cfg, p, cfg.arch == Arch::retnet ? cfg.paradigm : Paradigm::parallel, cfg.chunk_size);
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <class T>
struct KvCache {
  std::vector<T> keys;    // position-major, d_model per position (rotated)
  std::vector<T> values;  // position-major, d_model per position
  std::size_t element_count() const { return keys.size() + values.size(); }
};

/// Everything carried between decode steps. Exactly one of the two member
/// lists is populated, according to the architecture.
template <class T>
struct DecodeSession {
  Arch arch = Arch::retnet;
  ModelState<Tensor<T>> retention;  // O(1) in position
  std::vector<KvCache<T>> kv;       // grows with position
  long position = 0;

  static DecodeSession start(const ModelConfig& cfg) {
    DecodeSession s;
    s.arch = cfg.arch;
    if (cfg.arch == Arch::retnet) {
      const MsrConfig m = cfg.msr();
      s.retention.layers.assign(cfg.layers, MsrState<Tensor<T>>::zeros(m));
    } else {
      s.kv.assign(cfg.layers, KvCache<T>{});
    }
    return s;
  }

  /// Cached or recurrent floats held between steps.
  std::size_t state_elements() const {
    if (arch == Arch::retnet) return retention.element_count();
    std::size_t n = 0;
    for (const auto& c : kv) n += c.element_count();
    return n;
  }
};

namespace detail {

template <class T>
Tensor<T> attention_step(const Tensor<T>& x, const AttnBlockParams<Tensor<T>>& b, const ModelConfig& cfg,
                         KvCache<T>& cache, long position) {
  const std::size_t d = cfg.d_model, h = cfg.heads, dh = cfg.attention_head_dim();
  const Tensor<T> q = matmul(x, b.wq);
  const Tensor<T> k = matmul(x, b.wk);
  const Tensor<T> v = matmul(x, b.wv);
  const auto theta = rotation_angles<T>(dh, cfg.rotation_base);
  std::vector<Tensor<T>> qh;
  qh.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    qh.push_back(rotate_rows(slice_cols(q, i * dh, (i + 1) * dh), std::span<const T>(theta), position, +1));
    const Tensor<T> kr = rotate_rows(slice_cols(k, i * dh, (i + 1) * dh), std::span<const T>(theta), position, +1);
    cache.keys.insert(cache.keys.end(), kr.data().begin(), kr.data().end());
  }
  cache.values.insert(cache.values.end(), v.data().begin(), v.data().end());
  const std::size_t n = cache.keys.size() / d;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({1, d});
  std::vector<T> w(n);
  for (std::size_t i = 0; i < h; ++i) {
    const T* qi = qh[i].data().data();
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const T* kj = cache.keys.data() + j * d + i * dh;
      T s = 0;
      for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
      w[j] = s * inv;
      m = std::max(m, w[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (w[j] = std::exp(w[j] - m));
    T* o = out.data().data() + i * dh;
    for (std::size_t j = 0; j < n; ++j) {
      const T pj = w[j] / z;
      const T* vj = cache.values.data() + j * d + i * dh;
      for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vj[c];
    }
  }
  return matmul(out, b.wo);
}

}  // namespace detail

/// Advances the session by one token and returns that position's logits
/// [1×vocab]. Retnet sessions use the recurrent form; transformer sessions
/// append to a per-layer key/value cache.
template <class T>
Tensor<T> decode_step(DecodeSession<T>& session, int token, const ModelConfig& cfg, const ModelParams<Tensor<T>>& p) {
  detail::check(session.arch == cfg.arch, "decode_step: session architecture does not match config");
  const int tok[1] = {token};
  if (cfg.arch == Arch::retnet) {
    Tensor<T> logits = model_forward<Tensor<T>>(std::span<const int>(tok, 1), cfg, p, Paradigm::recurrent, 1, &session.retention);
    ++session.position;
    return logits;
  }
  detail::check(token >= 0 && static_cast<std::size_t>(token) < cfg.vocab_size, "decode_step: token outside vocabulary");
  detail::check(session.kv.size() == cfg.layers, "decode_step: session layer count mismatch");
  Tensor<T> x = embedding(p.embed, std::span<const int>(tok, 1));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& b = p.attn_blocks[l];
    Tensor<T> a = detail::attention_step(detail::layer_norm_affine(x, b.ln1_gain, b.ln1_bias), b, cfg, session.kv[l], session.position);
    Tensor<T> y = add(x, a);
    x = add(y, detail::ffn(detail::layer_norm_affine(y, b.ln2_gain, b.ln2_bias), b.w1, b.w2));
  }
  ++session.position;
  x = detail::layer_norm_affine(x, p.final_gain, p.final_bias);
  return cfg.tie_embeddings ? matmul_nt(x, p.embed) : matmul(x, p.head);
}

template <class T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Greedy continuation of `prompt` by `steps` tokens through decode_step.
template <class T>
std::vector<int> greedy_decode(std::span<const int> prompt, std::size_t steps, const ModelConfig& cfg,
                               const ModelParams<Tensor<T>>& p) {
  detail::check(!prompt.empty(), "greedy_decode: empty prompt");
  auto session = DecodeSession<T>::start(cfg);
  std::vector<int> out(prompt.begin(), prompt.end());
  Tensor<T> logits;
  for (int t : prompt) logits = decode_step(session, t, cfg, p);
  for (std::size_t i = 0; i < steps; ++i) {
    const int next = static_cast<int>(argmax<T>(std::as_const(logits).data()));
    out.push_back(next);
    if (i + 1 < steps) logits = decode_step(session, next, cfg, p);
  }
  return out;
}

}  // namespace retnet
