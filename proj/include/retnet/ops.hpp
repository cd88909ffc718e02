#pragma once

// Dense kernels over Tensor<T>. Every function here is pure and has a
// differentiable twin in autodiff.hpp with the same name, so layer code can
// be written once and instantiated with either value type.

#include <cmath>
#include <limits>
#include <utility>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "retnet/tensor.hpp"

namespace retnet {

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <class T>
void check_matrix(const Tensor<T>& a, const char* op) {
  check(a.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

/// Mean and 1/√(var + eps) of a block, accumulated in at least double.
template <class T, class A = std::common_type_t<T, double>>
std::pair<A, A> group_moments(std::span<const T> blk, T eps) {
  A mean = 0;
  for (T v : blk) mean += static_cast<A>(v);
  mean /= static_cast<A>(blk.size());
  A var = 0;
  for (T v : blk) var += (static_cast<A>(v) - mean) * (static_cast<A>(v) - mean);
  var /= static_cast<A>(blk.size());
  return {mean, A(1) / std::sqrt(var + static_cast<A>(eps))};
}

template <class T>
void check_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

/// a[m×k] @ b[k×n]. Summation over k runs in index order.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "matmul");
  detail::check_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::check(b.rows() == k, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      if (av == T(0)) continue;
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a[m×k] @ b[n×k]^T.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "matmul_nt");
  detail::check_matrix(b, "matmul_nt");
  detail::check(b.cols() == a.cols(), "matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " @ " + shape_str(b.shape()) + "^T");
  return matmul(a, transpose(b));
}

/// a[k×m]^T @ b[k×n].
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "matmul_tn");
  detail::check_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  detail::check(b.rows() == k, "matmul_tn: inner dimensions differ, " + shape_str(a.shape()) + "^T @ " + shape_str(b.shape()));
  Tensor<T> c({m, n});
  T* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* ar = a.data().data() + p * m;
    const T* br = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ar[i];
      if (av == T(0)) continue;
      T* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * br[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::check_matrix(a, "transpose");
  Tensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "add");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "sub");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "hadamard");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

/// Elementwise product with a constant (non-differentiated) tensor.
template <class T>
Tensor<T> mul_const(const Tensor<T>& a, const Tensor<T>& m) {
  return hadamard(a, m);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

/// Row i multiplied by factors[i].
template <class T>
Tensor<T> scale_rows(const Tensor<T>& a, std::span<const T> factors) {
  detail::check_matrix(a, "scale_rows");
  detail::check(factors.size() == a.rows(), "scale_rows: " + std::to_string(factors.size()) + " factors for " + std::to_string(a.rows()) + " rows");
  Tensor<T> c = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (auto& v : c.row_span(i)) v *= factors[i];
  return c;
}

/// Row sums as a column [rows×1].
template <class T>
Tensor<T> row_sum(const Tensor<T>& a) {
  detail::check_matrix(a, "row_sum");
  Tensor<T> c({a.rows(), 1});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s = 0;
    for (T v : a.row_span(i)) s += v;
    c[i] = s;
  }
  return c;
}

/// Column sums as a row [1×cols].
template <class T>
Tensor<T> col_sum(const Tensor<T>& a) {
  detail::check_matrix(a, "col_sum");
  Tensor<T> c({1, a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c[j] += a(i, j);
  return c;
}

/// Row n divided by max(|s_n|, 1); s is a [rows×1] column.
template <class T>
Tensor<T> clamp_rows(const Tensor<T>& x, const Tensor<T>& s) {
  detail::check_matrix(x, "clamp_rows");
  detail::check(s.size() == x.rows(), "clamp_rows: row-sum column has " + std::to_string(s.size()) + " entries for " + std::to_string(x.rows()) + " rows");
  Tensor<T> c = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T m = std::max(std::abs(s[i]), T(1));
    for (auto& v : c.row_span(i)) v /= m;
  }
  return c;
}

/// x ⊙ gain + bias with gain, bias broadcast over rows ([1×cols] each).
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  detail::check_matrix(x, "affine");
  detail::check(gain.size() == x.cols() && bias.size() == x.cols(), "affine: parameter width does not match " + shape_str(x.shape()));
  Tensor<T> c = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = c.row_span(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = r[j] * gain[j] + bias[j];
  }
  return c;
}

// ---------------------------------------------------------------------------
// Slicing and concatenation (matrices only)

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::check_matrix(a, "slice_rows");
  detail::check(begin <= end && end <= a.rows(), "slice_rows: range out of bounds");
  const std::size_t c = a.cols();
  std::vector<T> d(a.data().begin() + begin * c, a.data().begin() + end * c);
  return Tensor<T>({end - begin, c}, std::move(d));
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::check_matrix(a, "slice_cols");
  detail::check(begin <= end && end <= a.cols(), "slice_cols: range out of bounds");
  Tensor<T> out({a.rows(), end - begin});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == c, "concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<T> d;
  d.reserve(r * c);
  for (const auto& p : parts) d.insert(d.end(), p.data().begin(), p.data().end());
  return Tensor<T>({r, c}, std::move(d));
}

template <class T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == r, "concat_cols: row mismatch");
    c += p.cols();
  }
  Tensor<T> out({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotation

/// Rotation frequencies θ_k = base^(-2k/dim), k < dim/2.
template <class T>
std::vector<T> rotation_angles(std::size_t dim, double base = 10000.0) {
  detail::check(dim % 2 == 0, "rotation_angles: feature dimension " + std::to_string(dim) + " is odd");
  std::vector<T> theta(dim / 2);
  for (std::size_t k = 0; k < theta.size(); ++k)
    theta[k] = static_cast<T>(std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(dim)));
  return theta;
}

/// Rotates each consecutive feature pair (x_2k, x_2k+1) of every row of x by
/// sign·position·θ_k.
template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& x, std::span<const T> angles, long position, int sign) {
  detail::check_matrix(x, "rotate_pairs");
  detail::check(x.cols() % 2 == 0, "rotate_pairs: feature dimension " + std::to_string(x.cols()) + " is odd");
  detail::check(angles.size() == x.cols() / 2, "rotate_pairs: need one angle per feature pair");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t k = 0; k < angles.size(); ++k) {
      const double phi = static_cast<double>(sign) * static_cast<double>(position) * static_cast<double>(angles[k]);
      const T c = static_cast<T>(std::cos(phi)), s = static_cast<T>(std::sin(phi));
      const T a = r[2 * k], b = r[2 * k + 1];
      r[2 * k] = c * a - s * b;
      r[2 * k + 1] = s * a + c * b;
    }
  }
  return out;
}

/// Row n of x rotated by (first_position + n)·θ with the given sign.
template <class T>
Tensor<T> rotate_rows(const Tensor<T>& x, std::span<const T> angles, long first_position, int sign) {
  detail::check_matrix(x, "rotate_rows");
  detail::check(x.cols() % 2 == 0, "rotate_rows: feature dimension " + std::to_string(x.cols()) + " is odd");
  detail::check(angles.size() == x.cols() / 2, "rotate_rows: need one angle per feature pair");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double pos = static_cast<double>(first_position) + static_cast<double>(i);
    auto r = out.row_span(i);
    for (std::size_t k = 0; k < angles.size(); ++k) {
      const double phi = static_cast<double>(sign) * pos * static_cast<double>(angles[k]);
      const T c = static_cast<T>(std::cos(phi)), s = static_cast<T>(std::sin(phi));
      const T a = r[2 * k], b = r[2 * k + 1];
      r[2 * k] = c * a - s * b;
      r[2 * k + 1] = s * a + c * b;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Splits every row into `groups` equal blocks and standardizes each block
/// to zero mean and unit variance (no affine).
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, T eps = default_norm_eps<T>()) {
  detail::check_matrix(x, "group_norm");
  detail::check(groups > 0 && x.cols() % groups == 0,
                "group_norm: " + std::to_string(x.cols()) + " features do not split into " + std::to_string(groups) + " groups");
  const std::size_t g = x.cols() / groups;
  Tensor<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t b = 0; b < groups; ++b) {
      auto blk = r.subspan(b * g, g);
      const auto [mean, inv] = detail::group_moments<T>(blk, eps);
      for (auto& v : blk) v = static_cast<T>((v - mean) * inv);
    }
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = default_norm_eps<T>()) {
  return group_norm(x, 1, eps);
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Tensor<T> swish(const Tensor<T>& x) {
  Tensor<T> c = x;
  for (auto& v : c.data()) v = v * sigmoid(v);
  return c;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> c = x;
  for (auto& v : c.data()) v = T(0.5) * v * (T(1) + std::erf(v / std::sqrt(T(2))));
  return c;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::check_matrix(x, "softmax_rows");
  Tensor<T> c = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = c.row_span(i);
    T m = -std::numeric_limits<T>::infinity();
    for (T v : r) m = std::max(m, v);
    T s = 0;
    for (auto& v : r) s += (v = std::exp(v - m));
    for (auto& v : r) v /= s;
  }
  return c;
}

/// Softmax of each row over columns j <= i + offset; masked entries are 0.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& x, std::size_t offset = 0) {
  detail::check_matrix(x, "causal_softmax");
  Tensor<T> c({x.rows(), x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t n = std::min(x.cols(), i + offset + 1);
    auto src = x.row_span(i);
    auto dst = c.row_span(i);
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, src[j]);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (dst[j] = std::exp(src[j] - m));
    for (std::size_t j = 0; j < n; ++j) dst[j] /= s;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Embedding and loss

/// Gathers table rows [vocab×d] for each token id.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> tokens) {
  detail::check_matrix(table, "embedding");
  const std::size_t d = table.cols();
  Tensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    detail::check(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < table.rows(),
                  "embedding: token id " + std::to_string(tokens[i]) + " outside vocabulary of " + std::to_string(table.rows()));
    std::copy_n(table.row_span(tokens[i]).begin(), d, out.row_span(i).begin());
  }
  return out;
}

/// Targets equal to this value are excluded from the loss.
inline constexpr int kIgnoreTarget = -1;

/// Mean negative log-likelihood (nats) of targets under row-softmax(logits),
/// as a 1×1 tensor.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  detail::check_matrix(logits, "cross_entropy");
  detail::check(targets.size() == logits.rows(),
                "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(logits.rows()) + " rows");
  T total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    detail::check(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < logits.cols(), "cross_entropy: target out of range");
    auto r = logits.row_span(i);
    T m = -std::numeric_limits<T>::infinity();
    for (T v : r) m = std::max(m, v);
    T s = 0;
    for (T v : r) s += std::exp(v - m);
    total += (m + std::log(s)) - r[targets[i]];
    ++counted;
  }
  detail::check(counted > 0, "cross_entropy: every target is ignored");
  return Tensor<T>({1, 1}, std::vector<T>{total / static_cast<T>(counted)});
}

}  // namespace retnet
