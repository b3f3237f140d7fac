// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
// The op set is exactly what a tiny transformer / MLP classifier needs;
// reduction orders are fixed (sequential, row-major) so identical runs
// produce bit-identical results.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "shpeft/common.hpp"

namespace shpeft {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// When enabled, every primitive rejects non-finite operand values.
inline bool& strict_finite() {
  static bool flag = false;
  return flag;
}

template <typename T>
struct Tensor;

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
struct Tensor : std::enable_shared_from_this<Tensor<T>> {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // sized lazily, same length as data

  // graph bookkeeping; empty for leaves
  std::vector<TensorPtr<T>> parents;
  std::function<void()> backward_fn;
  const char* op = "leaf";
  bool graph_consumed = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  static TensorPtr<T> zeros(Shape s, bool req_grad = false) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(s);
    t->data.assign(static_cast<std::size_t>(numel_of(t->shape)), T(0));
    t->requires_grad = req_grad;
    return t;
  }

  static TensorPtr<T> from(Shape s, std::vector<T> values, bool req_grad = false) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(s);
    if (static_cast<std::int64_t>(values.size()) != numel_of(t->shape))
      throw ShapeError("tensor: data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t->shape));
    t->data = std::move(values);
    t->requires_grad = req_grad;
    return t;
  }

  static TensorPtr<T> scalar(T v) { return from({1}, {v}); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() { grad.assign(data.size(), T(0)); }
};

namespace detail {

template <typename T>
void check_finite(const char* op, const TensorPtr<T>& t) {
  if (!strict_finite()) return;
  for (const T& v : t->data)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite input value");
}

template <typename T>
TensorPtr<T> make_node(const char* op, Shape shape, std::vector<TensorPtr<T>> parents) {
  auto out = Tensor<T>::zeros(std::move(shape));
  out->op = op;
  for (auto& p : parents)
    if (p->requires_grad) out->requires_grad = true;
  out->parents = std::move(parents);
  return out;
}

// Right-aligned broadcast: each input dim must equal the output dim or 1.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` as seen from `out` (0 on broadcast dims), right-aligned.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t ri = in.size() - 1 - i;
    std::size_t ro = out.size() - 1 - i;
    if (in[ri] != 1) strides[ro] = s;
    s *= in[ri];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element, row-major.
template <typename Fn>
void broadcast_walk(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, Fn&& fn) {
  std::int64_t n = numel_of(out);
  std::vector<std::int64_t> idx(out.size(), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (std::int64_t d = static_cast<std::int64_t>(out.size()) - 1; d >= 0; --d) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---- elementwise binary ----

template <typename T, typename FwdFn, typename BwdFn>
TensorPtr<T> binary_op(const char* op, TensorPtr<T> a, TensorPtr<T> b, FwdFn fwd, BwdFn bwd) {
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  Shape os = detail::broadcast_shape(op, a->shape, b->shape);
  auto sa = detail::broadcast_strides(a->shape, os);
  auto sb = detail::broadcast_strides(b->shape, os);
  auto out = detail::make_node<T>(op, os, {a, b});
  detail::broadcast_walk(os, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
    out->data[i] = fwd(a->data[ia], b->data[ib]);
  });
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, b, os, sa, sb, bwd]() {
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      detail::broadcast_walk(os, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        T da, db;
        bwd(a->data[ia], b->data[ib], self->grad[i], da, db);
        if (a->requires_grad) a->grad[ia] += da;
        if (b->requires_grad) b->grad[ib] += db;
      });
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> add(TensorPtr<T> a, TensorPtr<T> b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <typename T>
TensorPtr<T> multiply(TensorPtr<T> a, TensorPtr<T> b) {
  return binary_op<T>(
      "multiply", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

// ---- elementwise unary ----

template <typename T, typename FwdFn, typename BwdFn>
TensorPtr<T> unary_op(const char* op, TensorPtr<T> a, FwdFn fwd, BwdFn bwd) {
  detail::check_finite(op, a);
  auto out = detail::make_node<T>(op, a->shape, {a});
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = fwd(a->data[i]);
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, bwd]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->data.size(); ++i)
        a->grad[i] += bwd(a->data[i]) * self->grad[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(TensorPtr<T> a, T c) {
  return unary_op<T>(
      "scale", a, [c](T x) { return c * x; }, [c](T) { return c; });
}

template <typename T>
TensorPtr<T> relu(TensorPtr<T> a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x) { return x > T(0) ? T(1) : T(0); });
}

// tanh approximation: 0.5 x (1 + tanh(c0 (x + c1 x^3))),
// c0 = sqrt(2/pi), c1 = 0.044715
template <typename T>
TensorPtr<T> gelu(TensorPtr<T> a) {
  const T c0 = T(0.7978845608028654);
  const T c1 = T(0.044715);
  return unary_op<T>(
      "gelu", a,
      [=](T x) {
        T u = c0 * (x + c1 * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
      },
      [=](T x) {
        T u = c0 * (x + c1 * x * x * x);
        T t = std::tanh(u);
        return T(0.5) * (T(1) + t) +
               T(0.5) * x * (T(1) - t * t) * c0 * (T(1) + T(3) * c1 * x * x);
      });
}

// ---- matmul ----
// a: (..., m, k); b: (k, n) or (..., k, n) with identical leading dims.
template <typename T>
TensorPtr<T> matmul(TensorPtr<T> a, TensorPtr<T> b) {
  detail::check_finite("matmul", a);
  detail::check_finite("matmul", b);
  if (a->shape.size() < 2 || b->shape.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a->shape) +
                     " and " + shape_str(b->shape));
  const std::int64_t m = a->shape[a->shape.size() - 2];
  const std::int64_t k = a->shape[a->shape.size() - 1];
  const std::int64_t kb = b->shape[b->shape.size() - 2];
  const std::int64_t n = b->shape[b->shape.size() - 1];
  const bool b_is_2d = b->shape.size() == 2;
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
  Shape lead(a->shape.begin(), a->shape.end() - 2);
  if (!b_is_2d) {
    Shape lead_b(b->shape.begin(), b->shape.end() - 2);
    if (lead != lead_b)
      throw ShapeError("matmul: batch dimensions disagree, " + shape_str(a->shape) + " vs " +
                       shape_str(b->shape));
  }
  Shape os = lead;
  os.push_back(m);
  os.push_back(n);
  const std::int64_t batches = numel_of(lead);
  auto out = detail::make_node<T>("matmul", os, {a, b});

  const std::int64_t sa = m * k, sb = b_is_2d ? 0 : k * n, so = m * n;
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    const T* A = a->data.data() + bi * sa;
    const T* B = b->data.data() + bi * sb;
    T* C = out->data.data() + bi * so;
    for (std::int64_t i = 0; i < m; ++i) {
      T* crow = C + i * n;
      const T* arow = A + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T aval = arow[p];
        const T* brow = B + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
      }
    }
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, b, m, n, k, batches, sa, sb, so, b_is_2d]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          const T* G = self->grad.data() + bi * so;
          const T* B = b->data.data() + bi * sb;
          T* dA = a->grad.data() + bi * sa;
          // dA = G * B^T
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
              T acc = T(0);
              const T* grow = G + i * n;
              const T* brow = B + p * n;
              for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              dA[i * k + p] += acc;
            }
        }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t bi = 0; bi < batches; ++bi) {
          const T* G = self->grad.data() + bi * so;
          const T* A = a->data.data() + bi * sa;
          T* dB = b->grad.data() + bi * sb;
          // dB += A^T * G
          for (std::int64_t i = 0; i < m; ++i) {
            const T* arow = A + i * k;
            const T* grow = G + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
              const T aval = arow[p];
              T* drow = dB + p * n;
              for (std::int64_t j = 0; j < n; ++j) drow[j] += aval * grow[j];
            }
          }
        }
      }
    };
  }
  return out;
}

// ---- softmax over the last axis (max-subtracted) ----
template <typename T>
TensorPtr<T> softmax(TensorPtr<T> a) {
  detail::check_finite("softmax", a);
  if (a->shape.empty()) throw ShapeError("softmax: rank-0 input");
  const std::int64_t c = a->shape.back();
  const std::int64_t rows = a->numel() / c;
  auto out = detail::make_node<T>("softmax", a->shape, {a});
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a->data.data() + r * c;
    T* y = out->data.data() + r * c;
    T mx = x[0];
    for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
    T sum = T(0);
    for (std::int64_t i = 0; i < c; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (std::int64_t i = 0; i < c; ++i) y[i] /= sum;
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, rows, c]() {
      a->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self->data.data() + r * c;
        const T* g = self->grad.data() + r * c;
        T dot = T(0);
        for (std::int64_t i = 0; i < c; ++i) dot += g[i] * y[i];
        T* dx = a->grad.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) dx[i] += y[i] * (g[i] - dot);
      }
    };
  }
  return out;
}

// ---- layer_norm over the last axis; gamma/beta shaped (C) ----
template <typename T>
TensorPtr<T> layer_norm(TensorPtr<T> a, TensorPtr<T> gamma, TensorPtr<T> beta,
                        T eps = T(1e-5)) {
  detail::check_finite("layer_norm", a);
  if (a->shape.empty()) throw ShapeError("layer_norm: rank-0 input");
  const std::int64_t c = a->shape.back();
  if (gamma->numel() != c || beta->numel() != c)
    throw ShapeError("layer_norm: gamma/beta length must equal last dim " + std::to_string(c) +
                     ", got " + shape_str(gamma->shape) + " and " + shape_str(beta->shape));
  const std::int64_t rows = a->numel() / c;
  auto out = detail::make_node<T>("layer_norm", a->shape, {a, gamma, beta});
  std::vector<T> inv_std(rows), mean(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a->data.data() + r * c;
    T mu = T(0);
    for (std::int64_t i = 0; i < c; ++i) mu += x[i];
    mu /= T(c);
    T var = T(0);
    for (std::int64_t i = 0; i < c; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    T* y = out->data.data() + r * c;
    for (std::int64_t i = 0; i < c; ++i)
      y[i] = (x[i] - mu) * inv * gamma->data[i] + beta->data[i];
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, gamma, beta, rows, c, mean = std::move(mean),
                        inv_std = std::move(inv_std)]() {
      if (a->requires_grad) a->ensure_grad();
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = a->data.data() + r * c;
        const T* g = self->grad.data() + r * c;
        const T mu = mean[r], inv = inv_std[r];
        if (gamma->requires_grad || beta->requires_grad) {
          for (std::int64_t i = 0; i < c; ++i) {
            const T xh = (x[i] - mu) * inv;
            if (gamma->requires_grad) gamma->grad[i] += g[i] * xh;
            if (beta->requires_grad) beta->grad[i] += g[i];
          }
        }
        if (a->requires_grad) {
          T sum_dxh = T(0), sum_dxh_xh = T(0);
          for (std::int64_t i = 0; i < c; ++i) {
            const T xh = (x[i] - mu) * inv;
            const T dxh = g[i] * gamma->data[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          T* dx = a->grad.data() + r * c;
          for (std::int64_t i = 0; i < c; ++i) {
            const T xh = (x[i] - mu) * inv;
            const T dxh = g[i] * gamma->data[i];
            dx[i] += inv * (dxh - sum_dxh / T(c) - xh * sum_dxh_xh / T(c));
          }
        }
      }
    };
  }
  return out;
}

// ---- L2 normalization over the last axis ----
template <typename T>
TensorPtr<T> l2_normalize(TensorPtr<T> a, T eps = T(1e-12)) {
  detail::check_finite("l2_normalize", a);
  if (a->shape.empty()) throw ShapeError("l2_normalize: rank-0 input");
  const std::int64_t c = a->shape.back();
  const std::int64_t rows = a->numel() / c;
  auto out = detail::make_node<T>("l2_normalize", a->shape, {a});
  std::vector<T> norms(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a->data.data() + r * c;
    T s = T(0);
    for (std::int64_t i = 0; i < c; ++i) s += x[i] * x[i];
    const T nrm = std::sqrt(s + eps);
    norms[r] = nrm;
    T* y = out->data.data() + r * c;
    for (std::int64_t i = 0; i < c; ++i) y[i] = x[i] / nrm;
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, rows, c, norms = std::move(norms)]() {
      a->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = a->data.data() + r * c;
        const T* g = self->grad.data() + r * c;
        const T nrm = norms[r];
        T dot = T(0);
        for (std::int64_t i = 0; i < c; ++i) dot += g[i] * x[i];
        T* dx = a->grad.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i)
          dx[i] += g[i] / nrm - x[i] * dot / (nrm * nrm * nrm);
      }
    };
  }
  return out;
}

// ---- cross-entropy with logits; mean over rows; returns scalar ----
template <typename T>
TensorPtr<T> cross_entropy_with_logits(TensorPtr<T> logits, const std::vector<int>& targets) {
  detail::check_finite("cross_entropy_with_logits", logits);
  Shape s = logits->shape;
  if (s.size() == 1) s = {1, s[0]};
  if (s.size() != 2)
    throw ShapeError("cross_entropy_with_logits: expected (batch, classes), got " +
                     shape_str(logits->shape));
  const std::int64_t rows = s[0], c = s[1];
  if (static_cast<std::int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw ShapeError("cross_entropy_with_logits: target " + std::to_string(t) +
                       " out of range [0," + std::to_string(c) + ")");
  auto out = detail::make_node<T>("cross_entropy_with_logits", {1}, {logits});
  T total = T(0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = logits->data.data() + r * c;
    T mx = x[0];
    for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
    T sum = T(0);
    for (std::int64_t i = 0; i < c; ++i) sum += std::exp(x[i] - mx);
    total += std::log(sum) + mx - x[targets[r]];
  }
  out->data[0] = total / T(rows);
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, logits, targets, rows, c]() {
      logits->ensure_grad();
      const T g = self->grad[0] / T(rows);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = logits->data.data() + r * c;
        T* dx = logits->grad.data() + r * c;
        T mx = x[0];
        for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
        T sum = T(0);
        for (std::int64_t i = 0; i < c; ++i) sum += std::exp(x[i] - mx);
        for (std::int64_t i = 0; i < c; ++i) {
          T p = std::exp(x[i] - mx) / sum;
          dx[i] += g * (p - (i == targets[r] ? T(1) : T(0)));
        }
      }
    };
  }
  return out;
}

// ---- shape ops ----

template <typename T>
TensorPtr<T> reshape(TensorPtr<T> a, Shape new_shape) {
  if (numel_of(new_shape) != a->numel())
    throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " +
                     shape_str(new_shape));
  auto out = detail::make_node<T>("reshape", new_shape, {a});
  out->data = a->data;
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += self->grad[i];
    };
  }
  return out;
}

namespace detail {
template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<int>& perm, const T* src, T* dst,
                  bool accumulate) {
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::int64_t i = static_cast<std::int64_t>(rank) - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<std::int64_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[perm[i]];
  const std::int64_t n = numel_of(in_shape);
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (accumulate)
      dst[off] += src[i];
    else
      dst[i] = src[off];
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
      idx[d]++;
      off += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= src_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}
}  // namespace detail

template <typename T>
TensorPtr<T> permute(TensorPtr<T> a, std::vector<int> perm) {
  const std::size_t rank = a->shape.size();
  if (perm.size() != rank)
    throw ShapeError("permute: permutation rank " + std::to_string(perm.size()) +
                     " vs tensor rank " + std::to_string(rank));
  std::vector<bool> seen(rank, false);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(rank) || seen[p])
      throw ShapeError("permute: invalid permutation for " + shape_str(a->shape));
    seen[p] = true;
  }
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = a->shape[perm[i]];
  auto out = detail::make_node<T>("permute", os, {a});
  {
    // forward gathers: out[i] = src[permuted offset of i]
    const std::size_t r = rank;
    std::vector<std::int64_t> in_strides(r, 1);
    for (std::int64_t i = static_cast<std::int64_t>(r) - 2; i >= 0; --i)
      in_strides[i] = in_strides[i + 1] * a->shape[i + 1];
    std::vector<std::int64_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) src_strides[i] = in_strides[perm[i]];
    const std::int64_t n = a->numel();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      out->data[i] = a->data[off];
      for (std::int64_t d = static_cast<std::int64_t>(r) - 1; d >= 0; --d) {
        idx[d]++;
        off += src_strides[d];
        if (idx[d] < os[d]) break;
        off -= src_strides[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, perm]() {
      a->ensure_grad();
      // scatter out-grad back through the same offset walk
      detail::permute_copy<T>(a->shape, perm, self->grad.data(), a->grad.data(), true);
    };
  }
  return out;
}

// swaps the last two axes
template <typename T>
TensorPtr<T> transpose(TensorPtr<T> a) {
  if (a->shape.size() < 2) throw ShapeError("transpose: rank < 2, " + shape_str(a->shape));
  std::vector<int> perm(a->shape.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

// ---- reductions to scalar ----

template <typename T>
TensorPtr<T> sum_all(TensorPtr<T> a) {
  detail::check_finite("sum", a);
  auto out = detail::make_node<T>("sum", {1}, {a});
  T s = T(0);
  for (const T& v : a->data) s += v;
  out->data[0] = s;
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a]() {
      a->ensure_grad();
      for (T& g : a->grad) g += self->grad[0];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> mean_all(TensorPtr<T> a) {
  detail::check_finite("mean", a);
  auto out = detail::make_node<T>("mean", {1}, {a});
  T s = T(0);
  for (const T& v : a->data) s += v;
  const T n = T(a->numel());
  out->data[0] = s / n;
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, a, n]() {
      a->ensure_grad();
      for (T& g : a->grad) g += self->grad[0] / n;
    };
  }
  return out;
}

// ---- token ops for the class-token transformer ----

// cls: (1, 1, C); x: (B, T, C) -> (B, T+1, C) with cls broadcast to row 0
template <typename T>
TensorPtr<T> prepend_token(TensorPtr<T> cls, TensorPtr<T> x) {
  if (x->shape.size() != 3 || cls->shape.size() != 3 || cls->shape[0] != 1 ||
      cls->shape[1] != 1 || cls->shape[2] != x->shape[2])
    throw ShapeError("prepend_token: expected cls (1,1,C) and x (B,T,C), got " +
                     shape_str(cls->shape) + " and " + shape_str(x->shape));
  const std::int64_t B = x->shape[0], Tn = x->shape[1], C = x->shape[2];
  auto out = detail::make_node<T>("prepend_token", {B, Tn + 1, C}, {cls, x});
  for (std::int64_t b = 0; b < B; ++b) {
    T* dst = out->data.data() + b * (Tn + 1) * C;
    std::copy(cls->data.begin(), cls->data.end(), dst);
    std::copy(x->data.begin() + b * Tn * C, x->data.begin() + (b + 1) * Tn * C, dst + C);
  }
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, cls, x, B, Tn, C]() {
      if (cls->requires_grad) cls->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        const T* g = self->grad.data() + b * (Tn + 1) * C;
        if (cls->requires_grad)
          for (std::int64_t i = 0; i < C; ++i) cls->grad[i] += g[i];
        if (x->requires_grad) {
          T* dx = x->grad.data() + b * Tn * C;
          for (std::int64_t i = 0; i < Tn * C; ++i) dx[i] += g[C + i];
        }
      }
    };
  }
  return out;
}

// x: (B, T, C) -> (B, C), row `token`
template <typename T>
TensorPtr<T> select_token(TensorPtr<T> x, std::int64_t token) {
  if (x->shape.size() != 3)
    throw ShapeError("select_token: expected (B,T,C), got " + shape_str(x->shape));
  const std::int64_t B = x->shape[0], Tn = x->shape[1], C = x->shape[2];
  if (token < 0 || token >= Tn)
    throw ShapeError("select_token: token " + std::to_string(token) + " out of range");
  auto out = detail::make_node<T>("select_token", {B, C}, {x});
  for (std::int64_t b = 0; b < B; ++b)
    std::copy(x->data.begin() + (b * Tn + token) * C, x->data.begin() + (b * Tn + token + 1) * C,
              out->data.begin() + b * C);
  if (out->requires_grad) {
    Tensor<T>* self = out.get();
    out->backward_fn = [self, x, B, Tn, C, token]() {
      x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        T* dx = x->grad.data() + (b * Tn + token) * C;
        const T* g = self->grad.data() + b * C;
        for (std::int64_t i = 0; i < C; ++i) dx[i] += g[i];
      }
    };
  }
  return out;
}

// ---- generic dispatch over the tensor-only-argument primitives ----

enum class OpKind {
  matmul,
  add,
  multiply,
  relu,
  gelu,
  softmax,
  layer_norm,
  l2_normalize,
  transpose,
  mean,
  sum
};

template <typename T>
TensorPtr<T> apply_primitive(OpKind kind, const std::vector<TensorPtr<T>>& operands) {
  auto want = [&](std::size_t n, const char* op) {
    if (operands.size() != n)
      throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + " operands, got " +
                       std::to_string(operands.size()));
  };
  switch (kind) {
    case OpKind::matmul: want(2, "matmul"); return matmul(operands[0], operands[1]);
    case OpKind::add: want(2, "add"); return add(operands[0], operands[1]);
    case OpKind::multiply: want(2, "multiply"); return multiply(operands[0], operands[1]);
    case OpKind::relu: want(1, "relu"); return relu(operands[0]);
    case OpKind::gelu: want(1, "gelu"); return gelu(operands[0]);
    case OpKind::softmax: want(1, "softmax"); return softmax(operands[0]);
    case OpKind::layer_norm:
      want(3, "layer_norm");
      return layer_norm(operands[0], operands[1], operands[2]);
    case OpKind::l2_normalize: want(1, "l2_normalize"); return l2_normalize(operands[0]);
    case OpKind::transpose: want(1, "transpose"); return transpose(operands[0]);
    case OpKind::mean: want(1, "mean"); return mean_all(operands[0]);
    case OpKind::sum: want(1, "sum"); return sum_all(operands[0]);
  }
  throw UsageError("apply_primitive: unknown op kind");
}

// ---- reverse pass ----
//
// Single-use tape: a loss node may drive exactly one backward pass.
template <typename T>
void backward_pass(TensorPtr<T> loss) {
  if (loss->numel() != 1)
    throw ShapeError("backward_pass: loss must be scalar, got " + shape_str(loss->shape));
  if (loss->graph_consumed)
    throw UsageError("backward_pass: graph already consumed; re-run forward first");
  loss->graph_consumed = true;

  std::vector<Tensor<T>*> topo;
  std::unordered_set<Tensor<T>*> visited;
  std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor<T>* p = node->parents[next++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Tensor<T>* node = *it;
    if (node->requires_grad && node->backward_fn) {
      node->ensure_grad();
      node->backward_fn();
    }
  }
}

// ---- central finite-difference oracle (test support) ----
//
// f must be deterministic and scalar-valued over the flat element vector.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T(const std::vector<T>&)>& f,
                                          std::vector<T> x, T h) {
  if (!(h > T(0))) throw UsageError("finite_difference_gradient: h must be positive");
  const T f0 = f(x);
  if (f(x) != f0)
    throw NumericError("finite_difference_gradient: oracle-invalid, f is non-deterministic");
  std::vector<T> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T xi = x[i];
    x[i] = xi + h;
    const T fp = f(x);
    x[i] = xi - h;
    const T fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

using FTensor = TensorPtr<float>;
using DTensor = TensorPtr<double>;

}  // namespace shpeft
