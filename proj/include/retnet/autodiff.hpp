#pragma once

// Reverse-mode differentiation over the op set in ops.hpp.
//
// A Var is a handle to a graph node holding its forward value, an adjoint
// buffer and a closure that pushes the node's adjoint into its parents.
// Graphs are built by calling the same free functions used on Tensor;
// backward() walks them in reverse topological order. A graph belongs to
// the thread that built it.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "retnet/ops.hpp"

namespace retnet {

template <class T>
class Var {
 public:
  using value_type = T;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // lazily allocated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
      if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
      if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
      return grad;
    }
    void accumulate(const Tensor<T>& g) {
      auto& buf = grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
  };

  Var() = default;

  /// Trainable leaf.
  static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }
  /// Leaf excluded from differentiation.
  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }

  const Tensor<T>& value() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Adjoint accumulated by backward(); zeros if the node was never reached.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool defined() const { return static_cast<bool>(node_); }

  /// Builds an interior node. `backward` is dropped when no parent needs a
  /// gradient.
  static Var make(Tensor<T> value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    Var out(std::move(value), false);
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        out.node_->requires_grad = true;
        break;
      }
    }
    if (out.node_->requires_grad) {
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node> node_;
};

/// Runs reverse accumulation from a scalar (1-element) root.
template <class T>
void backward(const Var<T>& root) {
  using Node = typename Var<T>::Node;
  if (root.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.value().shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace detail {

template <class T>
using NodeT = typename Var<T>::Node;

template <class T>
void push(NodeT<T>& n, std::size_t parent, const Tensor<T>& g) {
  auto& p = *n.parents[parent];
  if (p.requires_grad) p.accumulate(g);
}

template <class T>
bool wants(NodeT<T>& n, std::size_t parent) {
  return n.parents[parent]->requires_grad;
}

template <class T>
const Tensor<T>& in(NodeT<T>& n, std::size_t parent) {
  return n.parents[parent]->value;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Each mirrors the Tensor overload in ops.hpp.

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(matmul(a.value(), b.value()), {a, b}, [](auto& n) {
    if (detail::wants<T>(n, 0)) detail::push<T>(n, 0, matmul_nt(n.grad, detail::in<T>(n, 1)));
    if (detail::wants<T>(n, 1)) detail::push<T>(n, 1, matmul_tn(detail::in<T>(n, 0), n.grad));
  });
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(matmul_nt(a.value(), b.value()), {a, b}, [](auto& n) {
    if (detail::wants<T>(n, 0)) detail::push<T>(n, 0, matmul(n.grad, detail::in<T>(n, 1)));
    if (detail::wants<T>(n, 1)) detail::push<T>(n, 1, matmul_tn(n.grad, detail::in<T>(n, 0)));
  });
}

template <class T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(matmul_tn(a.value(), b.value()), {a, b}, [](auto& n) {
    if (detail::wants<T>(n, 0)) detail::push<T>(n, 0, matmul_nt(detail::in<T>(n, 1), n.grad));
    if (detail::wants<T>(n, 1)) detail::push<T>(n, 1, matmul(detail::in<T>(n, 0), n.grad));
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(add(a.value(), b.value()), {a, b}, [](auto& n) {
    detail::push<T>(n, 0, n.grad);
    detail::push<T>(n, 1, n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(sub(a.value(), b.value()), {a, b}, [](auto& n) {
    detail::push<T>(n, 0, n.grad);
    if (detail::wants<T>(n, 1)) detail::push<T>(n, 1, scale(n.grad, T(-1)));
  });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(hadamard(a.value(), b.value()), {a, b}, [](auto& n) {
    if (detail::wants<T>(n, 0)) detail::push<T>(n, 0, hadamard(n.grad, detail::in<T>(n, 1)));
    if (detail::wants<T>(n, 1)) detail::push<T>(n, 1, hadamard(n.grad, detail::in<T>(n, 0)));
  });
}

template <class T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& m) {
  return Var<T>::make(mul_const(a.value(), m), {a}, [m](auto& n) { detail::push<T>(n, 0, hadamard(n.grad, m)); });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return Var<T>::make(scale(a.value(), s), {a}, [s](auto& n) { detail::push<T>(n, 0, scale(n.grad, s)); });
}

template <class T>
Var<T> scale_rows(const Var<T>& a, std::span<const T> factors) {
  std::vector<T> f(factors.begin(), factors.end());
  return Var<T>::make(scale_rows(a.value(), factors), {a}, [f = std::move(f)](auto& n) {
    detail::push<T>(n, 0, scale_rows(n.grad, std::span<const T>(f)));
  });
}

template <class T>
Var<T> row_sum(const Var<T>& a) {
  return Var<T>::make(row_sum(a.value()), {a}, [cols = a.cols()](auto& n) {
    Tensor<T> g({n.grad.size(), cols});
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (auto& v : g.row_span(i)) v = n.grad[i];
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> col_sum(const Var<T>& a) {
  return Var<T>::make(col_sum(a.value()), {a}, [rows = a.rows()](auto& n) {
    Tensor<T> g({rows, n.grad.size()});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) = n.grad[j];
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> clamp_rows(const Var<T>& x, const Var<T>& s) {
  return Var<T>::make(clamp_rows(x.value(), s.value()), {x, s}, [](auto& n) {
    const auto& x = detail::in<T>(n, 0);
    const auto& s = detail::in<T>(n, 1);
    const std::size_t rows = x.rows();
    if (detail::wants<T>(n, 0)) {
      Tensor<T> gx = clamp_rows(n.grad, s);
      detail::push<T>(n, 0, gx);
    }
    if (detail::wants<T>(n, 1)) {
      Tensor<T> gs(s.shape());
      for (std::size_t i = 0; i < rows; ++i) {
        const T si = s[i];
        if (std::abs(si) <= T(1)) continue;
        T dot = 0;
        auto gr = n.grad.row_span(i);
        auto xr = x.row_span(i);
        for (std::size_t j = 0; j < gr.size(); ++j) dot += gr[j] * xr[j];
        gs[i] = -dot * (si > 0 ? T(1) : T(-1)) / (si * si);
      }
      detail::push<T>(n, 1, gs);
    }
  });
}

template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  return Var<T>::make(affine(x.value(), gain.value(), bias.value()), {x, gain, bias},
                      [](auto& n) {
                        const auto& x = detail::in<T>(n, 0);
                        const auto& g = detail::in<T>(n, 1);
                        if (detail::wants<T>(n, 0)) {
                          Tensor<T> gx = n.grad;
                          for (std::size_t i = 0; i < gx.rows(); ++i) {
                            auto r = gx.row_span(i);
                            for (std::size_t j = 0; j < r.size(); ++j) r[j] *= g[j];
                          }
                          detail::push<T>(n, 0, gx);
                        }
                        if (detail::wants<T>(n, 1) || detail::wants<T>(n, 2)) {
                          Tensor<T> gg(g.shape()), gb(g.shape());
                          for (std::size_t i = 0; i < x.rows(); ++i)
                            for (std::size_t j = 0; j < x.cols(); ++j) {
                              gg[j] += n.grad(i, j) * x(i, j);
                              gb[j] += n.grad(i, j);
                            }
                          detail::push<T>(n, 1, gg);
                          detail::push<T>(n, 2, gb);
                        }
                      });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end) {
  return Var<T>::make(slice_rows(a.value(), begin, end), {a}, [begin, shape = a.shape()](auto& n) {
    Tensor<T> g(shape);
    std::copy(n.grad.data().begin(), n.grad.data().end(), g.data().begin() + begin * shape[1]);
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end) {
  return Var<T>::make(slice_cols(a.value(), begin, end), {a}, [begin, end, shape = a.shape()](auto& n) {
    Tensor<T> g(shape);
    for (std::size_t i = 0; i < shape[0]; ++i)
      for (std::size_t j = begin; j < end; ++j) g(i, j) = n.grad(i, j - begin);
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& v : values) {
    offsets.push_back(off);
    off += v.rows();
  }
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return Var<T>::make(concat_rows(std::span<const Tensor<T>>(values)), ps, [offsets](auto& n) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (!detail::wants<T>(n, k)) continue;
      const auto& shape = n.parents[k]->value.shape();
      detail::push<T>(n, k, slice_rows(n.grad, offsets[k], offsets[k] + shape[0]));
    }
  });
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& v : values) {
    offsets.push_back(off);
    off += v.cols();
  }
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return Var<T>::make(concat_cols(std::span<const Tensor<T>>(values)), ps, [offsets](auto& n) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (!detail::wants<T>(n, k)) continue;
      const auto& shape = n.parents[k]->value.shape();
      detail::push<T>(n, k, slice_cols(n.grad, offsets[k], offsets[k] + shape[1]));
    }
  });
}

template <class T>
Var<T> rotate_rows(const Var<T>& x, std::span<const T> angles, long first_position, int sign) {
  std::vector<T> th(angles.begin(), angles.end());
  return Var<T>::make(rotate_rows(x.value(), angles, first_position, sign), {x},
                      [th = std::move(th), first_position, sign](auto& n) {
                        detail::push<T>(n, 0, rotate_rows(n.grad, std::span<const T>(th), first_position, -sign));
                      });
}

template <class T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, T eps = default_norm_eps<T>()) {
  Tensor<T> y = group_norm(x.value(), groups, eps);
  // Per-(row, group) inverse std, needed by the adjoint.
  const std::size_t g = x.cols() / groups;
  std::vector<T> inv(x.rows() * groups);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.value().row_span(i);
    for (std::size_t b = 0; b < groups; ++b) {
      inv[i * groups + b] = static_cast<T>(detail::group_moments<T>(r.subspan(b * g, g), eps).second);
    }
  }
  return Var<T>::make(std::move(y), {x}, [inv = std::move(inv), groups, g](auto& n) {
    const auto& y = n.value;
    Tensor<T> gx(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      for (std::size_t b = 0; b < groups; ++b) {
        auto yb = y.row_span(i).subspan(b * g, g);
        auto db = n.grad.row_span(i).subspan(b * g, g);
        auto out = gx.row_span(i).subspan(b * g, g);
        T mean_d = 0, mean_dy = 0;
        for (std::size_t j = 0; j < g; ++j) {
          mean_d += db[j];
          mean_dy += db[j] * yb[j];
        }
        mean_d /= static_cast<T>(g);
        mean_dy /= static_cast<T>(g);
        const T s = inv[i * groups + b];
        for (std::size_t j = 0; j < g; ++j) out[j] = s * (db[j] - mean_d - yb[j] * mean_dy);
      }
    }
    detail::push<T>(n, 0, gx);
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, T eps = default_norm_eps<T>()) {
  return group_norm(x, 1, eps);
}

template <class T>
Var<T> swish(const Var<T>& x) {
  return Var<T>::make(swish(x.value()), {x}, [](auto& n) {
    const auto& x = detail::in<T>(n, 0);
    Tensor<T> g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = sigmoid(x[i]);
      g[i] *= s * (T(1) + x[i] * (T(1) - s));
    }
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  return Var<T>::make(gelu(x.value()), {x}, [](auto& n) {
    const auto& x = detail::in<T>(n, 0);
    Tensor<T> g = n.grad;
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] *= cdf + v * pdf;
    }
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> causal_softmax(const Var<T>& x, std::size_t offset = 0) {
  return Var<T>::make(causal_softmax(x.value(), offset), {x}, [](auto& n) {
    const auto& p = n.value;
    Tensor<T> g(p.shape());
    for (std::size_t i = 0; i < p.rows(); ++i) {
      auto pr = p.row_span(i);
      auto dr = n.grad.row_span(i);
      T dot = 0;
      for (std::size_t j = 0; j < pr.size(); ++j) dot += pr[j] * dr[j];
      auto gr = g.row_span(i);
      for (std::size_t j = 0; j < pr.size(); ++j) gr[j] = pr[j] * (dr[j] - dot);
    }
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> tokens) {
  std::vector<int> ids(tokens.begin(), tokens.end());
  return Var<T>::make(embedding(table.value(), tokens), {table}, [ids = std::move(ids), shape = table.shape()](auto& n) {
    Tensor<T> g(shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = g.row_span(ids[i]);
      auto src = n.grad.row_span(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    detail::push<T>(n, 0, g);
  });
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  std::vector<int> tg(targets.begin(), targets.end());
  return Var<T>::make(cross_entropy(logits.value(), targets), {logits}, [tg = std::move(tg)](auto& n) {
    Tensor<T> g = softmax_rows(detail::in<T>(n, 0));
    std::size_t counted = 0;
    for (int t : tg) counted += (t != kIgnoreTarget);
    const T w = n.grad[0] / static_cast<T>(counted);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto r = g.row_span(i);
      if (tg[i] == kIgnoreTarget) {
        std::fill(r.begin(), r.end(), T(0));
        continue;
      }
      r[tg[i]] -= T(1);
      for (auto& v : r) v *= w;
    }
    detail::push<T>(n, 0, g);
  });
}

// ---------------------------------------------------------------------------
// Value-type traits so generic layer code can create constants and read
// values uniformly.

template <class X>
struct value_traits;

template <class T>
struct value_traits<Tensor<T>> {
  using scalar = T;
  static Tensor<T> constant(Tensor<T> t) { return t; }
  static const Tensor<T>& value(const Tensor<T>& x) { return x; }
};

template <class T>
struct value_traits<Var<T>> {
  using scalar = T;
  static Var<T> constant(Tensor<T> t) { return Var<T>::constant(std::move(t)); }
  static const Tensor<T>& value(const Var<T>& x) { return x.value(); }
};

template <class X>
using scalar_of = typename value_traits<X>::scalar;

template <class X>
const Tensor<scalar_of<X>>& value_of(const X& x) {
  return value_traits<X>::value(x);
}

template <class X>
X make_constant(Tensor<scalar_of<X>> t) {
  return value_traits<X>::constant(std::move(t));
}

// ---------------------------------------------------------------------------
// Gradient entry points

/// Reverse-mode gradients of a scalar function with respect to each input.
template <class T>
std::vector<Tensor<T>> grad(const std::function<Var<T>(std::span<const Var<T>>)>& f, std::span<const Tensor<T>> params) {
  std::vector<Var<T>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(Var<T>::leaf(p));
  Var<T> loss = f(std::span<const Var<T>>(leaves));
  backward(loss);
  std::vector<Tensor<T>> out;
  out.reserve(leaves.size());
  for (const auto& l : leaves) out.push_back(l.grad());
  return out;
}

/// Central-difference estimate (f(θ+h) − f(θ−h)) / 2h for every coordinate.
inline std::vector<Tensor<double>> finite_diff(const std::function<double(std::span<const Tensor<double>>)>& f,
                                               std::span<const Tensor<double>> params, double step = 1e-5) {
  std::vector<Tensor<double>> work(params.begin(), params.end());
  std::vector<Tensor<double>> out;
  out.reserve(work.size());
  for (std::size_t p = 0; p < work.size(); ++p) {
    Tensor<double> g(work[p].shape());
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + step;
      const double fp = f(work);
      work[p][i] = orig - step;
      const double fm = f(work);
      work[p][i] = orig;
      g[i] = (fp - fm) / (2.0 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// |a − b| / max(|a|, |b|, floor): the comparison metric used by all
/// gradient checks.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace retnet
