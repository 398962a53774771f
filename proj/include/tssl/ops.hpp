#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tssl/tensor.hpp"

// Differentiable operators. Reductions run sequentially in a fixed order, so f32
// results are bit-reproducible on one thread. Broadcasting is limited to adding a
// tensor whose shape is a suffix of the other operand's shape.
namespace tssl {

namespace detail {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T, class Fn>
void accumulate_into(const Tensor<T>& t, Fn&& fn) {
  if (t.requires_grad()) fn(t.node()->grad_buffer());
}

// C[M,N] += A[M,K] * B[K,N], contraction index ascending.
template <class T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// Splits a shape around `axis` into outer * n * inner.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    detail::accumulate_into(a, [&](std::vector<T>& ga) {
      auto bt = detail::transposed(k, n, b.data().data());
      detail::gemm(m, n, k, g, bt.data(), ga.data());
    });
    detail::accumulate_into(b, [&](std::vector<T>& gb) {
      auto at = detail::transposed(m, k, a.data().data());
      detail::gemm(k, m, n, at.data(), g, gb.data());
    });
  });
}

/// x[..., in] * w[in, out] (+ bias[out]) over all leading axes.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  const std::size_t in = w.dim(0), out_dim = w.dim(1), rows = x.size() / in;
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim))
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  std::vector<T> out(rows * out_dim, T(0));
  if (bias)
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias->data().data(), out_dim, out.data() + r * out_dim);
  detail::gemm(rows, in, out_dim, x.data().data(), w.data().data(), out.data());
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor<T>> inputs{x, w};
  Tensor<T> b = bias ? *bias : Tensor<T>();
  if (bias) inputs.push_back(b);
  return detail::make_result<T>("linear", std::move(shape), std::move(out), std::move(inputs),
                                [x, w, b, rows, in, out_dim](Node<T>& self) {
                                  const T* g = self.grad.data();
                                  detail::accumulate_into(x, [&](std::vector<T>& gx) {
                                    auto wt = detail::transposed(in, out_dim, w.data().data());
                                    detail::gemm(rows, out_dim, in, g, wt.data(), gx.data());
                                  });
                                  detail::accumulate_into(w, [&](std::vector<T>& gw) {
                                    auto xt = detail::transposed(rows, in, x.data().data());
                                    detail::gemm(in, rows, out_dim, xt.data(), g, gw.data());
                                  });
                                  if (b.defined())
                                    detail::accumulate_into(b, [&](std::vector<T>& gb) {
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                                    });
                                });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  return linear(x, w, &bias);
}

// ---- elementwise -----------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (const auto* t : {&a, &b})
      detail::accumulate_into(*t, [&](std::vector<T>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate_into(a, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    detail::accumulate_into(b, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate_into(a, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b[i];
    });
    detail::accumulate_into(b, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a[i];
    });
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a}, [a, c](Node<T>& self) {
    detail::accumulate_into(a, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
  });
}

/// x + b where b's shape equals the trailing axes of x (bias, position tables).
template <class T>
Tensor<T> add_trailing(const Tensor<T>& x, const Tensor<T>& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size())))
    throw DimensionError("add_trailing: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = b.size(), outer = x.size() / inner;
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + b[i];
  return detail::make_result<T>("add_trailing", xs, std::move(out), {x, b}, [x, b, outer, inner](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    detail::accumulate_into(b, [&](std::vector<T>& g) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    });
  });
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x}, [x, df](Node<T>& self) {
    accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
    });
  });
}

}  // namespace detail

inline constexpr double kGeluC = 0.7978845608;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

/// Tanh approximation of GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v);
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data())
    if (!(v > T(0))) throw ContractError("log: non-positive input");
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// log(exp(a) + exp(b)) elementwise.
template <class T>
Tensor<T> logaddexp(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("logaddexp", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = std::max(a[i], b[i]);
    out[i] = m + std::log(std::exp(a[i] - m) + std::exp(b[i] - m));
  }
  return detail::make_result<T>("logaddexp", a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate_into(a, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * std::exp(a[i] - self.value[i]);
    });
    detail::accumulate_into(b, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * std::exp(b[i] - self.value[i]);
    });
  });
}

// ---- reductions ------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum", {1}, {acc}, {x}, [x](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (auto& v : g) v += self.grad[0];
    });
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Mean over one axis; the axis is removed (a rank-1 input yields shape [1]).
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : out) v *= inv;
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return detail::make_result<T>("mean_axis", std::move(shape), std::move(out), {x},
                                [x, outer, n, inner, inv](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t k = 0; k < n; ++k)
                                        for (std::size_t i = 0; i < inner; ++i)
                                          g[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
                                  });
                                });
}

// ---- shape manipulation ----------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return detail::make_result<T>("reshape", std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), {x},
                                [x](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  });
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  Shape shape = s0;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    shape[axis] += s[axis];
  }
  std::size_t outer, total, inner;
  detail::split_axis(shape, axis, outer, total, inner);
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t n = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * n * inner, n * inner, out.data() + (o * total + off) * inner);
    off += n;
  }
  return detail::make_result<T>("concat", std::move(shape), std::move(out), parts,
                                [parts, offsets, axis, outer, total, inner](Node<T>& self) {
                                  for (std::size_t k = 0; k < parts.size(); ++k) {
                                    const std::size_t n = parts[k].dim(axis), off = offsets[k];
                                    detail::accumulate_into(parts[k], [&](std::vector<T>& g) {
                                      for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t i = 0; i < n * inner; ++i)
                                          g[o * n * inner + i] += self.grad[(o * total + off) * inner + i];
                                    });
                                  }
                                });
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  if (begin >= end || end > n)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(x.shape()));
  const std::size_t m = end - begin;
  Shape shape = x.shape();
  shape[axis] = m;
  std::vector<T> out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * n + begin) * inner, m * inner, out.data() + o * m * inner);
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {x},
                                [x, outer, n, inner, begin, m](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t i = 0; i < m * inner; ++i)
                                        g[(o * n + begin) * inner + i] += self.grad[o * m * inner + i];
                                  });
                                });
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1), batch = x.size() / (r * c);
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    auto t = detail::transposed(r, c, x.data().data() + b * r * c);
    std::copy(t.begin(), t.end(), out.begin() + static_cast<std::ptrdiff_t>(b * r * c));
  }
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  return detail::make_result<T>("transpose", std::move(shape), std::move(out), {x}, [x, r, c, batch](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t b = 0; b < batch; ++b) {
        auto t = detail::transposed(c, r, self.grad.data() + b * r * c);
        for (std::size_t i = 0; i < r * c; ++i) g[b * r * c + i] += t[i];
      }
    });
  });
}

/// Stacks `n` copies of x along a new leading axis.
template <class T>
Tensor<T> repeat_leading(const Tensor<T>& x, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  std::vector<T> out;
  out.reserve(n * x.size());
  for (std::size_t k = 0; k < n; ++k) out.insert(out.end(), x.data().begin(), x.data().end());
  return detail::make_result<T>("repeat_leading", std::move(shape), std::move(out), {x}, [x, n](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[k * g.size() + i];
    });
  });
}

/// Rows of table[v, d] selected by ids -> [ids.size(), d].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.empty()) throw ContractError("embedding_lookup: no ids");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v)
      throw ContractError("embedding_lookup: id " + std::to_string(ids[r]) + " >= vocabulary " + std::to_string(v));
    std::copy_n(table.data().data() + ids[r] * d, d, out.data() + r * d);
  }
  return detail::make_result<T>("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                                [table, ids, d](Node<T>& self) {
                                  detail::accumulate_into(table, [&](std::vector<T>& g) {
                                    for (std::size_t r = 0; r < ids.size(); ++r)
                                      for (std::size_t j = 0; j < d; ++j) g[ids[r] * d + j] += self.grad[r * d + j];
                                  });
                                });
}

/// Rows of x (flattened to [rows, trailing]) selected by index along axis 0.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::size_t>& ids) {
  const std::size_t rows = x.dim(0), inner = x.size() / rows;
  Shape shape = x.shape();
  shape[0] = ids.size();
  std::vector<T> out(ids.size() * inner);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) throw ContractError("index_select: index out of range");
    std::copy_n(x.data().data() + ids[r] * inner, inner, out.data() + r * inner);
  }
  return detail::make_result<T>("index_select", std::move(shape), std::move(out), {x}, [x, ids, inner](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < inner; ++j) g[ids[r] * inner + j] += self.grad[r * inner + j];
    });
  });
}

/// Elements x[rows[i], cols[i]] of a matrix -> [n].
template <class T>
Tensor<T> gather_elements(const Tensor<T>& x, const std::vector<std::size_t>& rows,
                          const std::vector<std::size_t>& cols) {
  if (x.rank() != 2 || rows.size() != cols.size() || rows.empty())
    throw DimensionError("gather_elements: bad arguments for " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0) || cols[i] >= c) throw ContractError("gather_elements: index out of range");
    out[i] = x[rows[i] * c + cols[i]];
  }
  return detail::make_result<T>("gather_elements", {rows.size()}, std::move(out), {x},
                                [x, rows, cols, c](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t i = 0; i < rows.size(); ++i)
                                      g[rows[i] * c + cols[i]] += self.grad[i];
                                  });
                                });
}

// ---- normalization and probability ---------------------------------------

/// Softmax along `axis`, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < n; ++k) z += (out[base + k * inner] = std::exp(x[base + k * inner] - mx));
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [x, outer, n, inner](Node<T>& self) {
    detail::accumulate_into(x, [&](std::vector<T>& g) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          T dot = T(0);
          for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
          for (std::size_t k = 0; k < n; ++k)
            g[base + k * inner] += self.value[base + k * inner] * (self.grad[base + k * inner] - dot);
        }
    });
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, x.rank() - 1);
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last axis, then applies gain and bias of that axis' length.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " incompatible with " + shape_str(x.shape()));
  std::vector<T> out(x.size()), xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Node<T>& self) {
        const T* gy = self.grad.data();
        detail::accumulate_into(x, [&](std::vector<T>& g) {
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = gy[r * d + j] * gain[j];
              m1 += dxh;
              m2 += dxh * xhat[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              g[r * d + j] += rstd[r] * (gy[r * d + j] * gain[j] - m1 - xhat[r * d + j] * m2);
          }
        });
        detail::accumulate_into(gain, [&](std::vector<T>& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j] * xhat[r * d + j];
        });
        detail::accumulate_into(bias, [&](std::vector<T>& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
        });
      });
}

/// Rows of the last axis scaled to unit L2 norm.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  std::vector<T> out(x.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    norms[r] = std::sqrt(s + T(1e-24));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / norms[r];
  }
  return detail::make_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                                [x, norms = std::move(norms), rows, d](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      T dot = T(0);
                                      for (std::size_t j = 0; j < d; ++j)
                                        dot += self.value[r * d + j] * self.grad[r * d + j];
                                      for (std::size_t j = 0; j < d; ++j)
                                        g[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / norms[r];
                                    }
                                  });
                                });
}

/// Per-row log-sum-exp of x[R, C] restricted to entries where mask is nonzero -> [R].
template <class T>
Tensor<T> masked_logsumexp(const Tensor<T>& x, const std::vector<unsigned char>& mask) {
  if (x.rank() != 2 || mask.size() != x.size())
    throw DimensionError("masked_logsumexp: mask does not match " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c]) mx = std::max(mx, x[r * cols + c]);
    if (mx == -std::numeric_limits<T>::infinity()) throw ContractError("masked_logsumexp: empty mask row");
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c]) z += std::exp(x[r * cols + c] - mx);
    out[r] = mx + std::log(z);
  }
  return detail::make_result<T>("masked_logsumexp", {rows}, std::move(out), {x},
                                [x, mask, rows, cols](Node<T>& self) {
                                  detail::accumulate_into(x, [&](std::vector<T>& g) {
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c)
                                        if (mask[r * cols + c])
                                          g[r * cols + c] +=
                                              self.grad[r] * std::exp(x[r * cols + c] - self.value[r]);
                                  });
                                });
}

// ---- attention ------------------------------------------------------------

/// Multi-head scaled dot-product attention over independent groups of `seq` tokens.
///
/// q, k, v are [groups * seq, d] (any leading shape whose product is groups * seq);
/// head h uses columns [h*d/heads, (h+1)*d/heads). Output has the shape of q.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t seq, std::size_t heads) {
  detail::require_same_shape("attention", q, k);
  detail::require_same_shape("attention", q, v);
  const std::size_t d = q.shape().back(), rows = q.size() / d;
  if (heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0)
    throw DimensionError("attention: shape " + shape_str(q.shape()) + " incompatible with seq=" + std::to_string(seq) +
                         " heads=" + std::to_string(heads));
  const std::size_t groups = rows / seq, dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> out(q.size(), T(0));
  std::vector<T> probs(groups * heads * seq * seq);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (g * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = q.data().data() + (g * seq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = k.data().data() + (g * seq + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * seq + j] = s * inv_sqrt;
          mx = std::max(mx, p[i * seq + j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < seq; ++j) z += (p[i * seq + j] = std::exp(p[i * seq + j] - mx));
        T* oi = out.data() + (g * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          p[i * seq + j] /= z;
          const T* vj = v.data().data() + (g * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * seq + j] * vj[c];
        }
      }
    }
  return detail::make_result<T>(
      "attention", q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), groups, heads, seq, d, dh, inv_sqrt](Node<T>& self) {
        const T* go = self.grad.data();
        std::vector<T> gq(q.size(), T(0)), gk(q.size(), T(0)), gv(q.size(), T(0)), ds(seq * seq);
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (g * heads + h) * seq * seq;
            auto at = [&](std::size_t row) { return (g * seq + row) * d + h * dh; };
            for (std::size_t i = 0; i < seq; ++i) {
              T dot = T(0);
              for (std::size_t j = 0; j < seq; ++j) {
                T dp = T(0);
                for (std::size_t c = 0; c < dh; ++c) dp += go[at(i) + c] * v[at(j) + c];
                ds[i * seq + j] = dp;
                dot += dp * p[i * seq + j];
                for (std::size_t c = 0; c < dh; ++c) gv[at(j) + c] += p[i * seq + j] * go[at(i) + c];
              }
              for (std::size_t j = 0; j < seq; ++j) ds[i * seq + j] = p[i * seq + j] * (ds[i * seq + j] - dot) * inv_sqrt;
            }
            for (std::size_t i = 0; i < seq; ++i)
              for (std::size_t j = 0; j < seq; ++j) {
                const T s = ds[i * seq + j];
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[at(i) + c] += s * k[at(j) + c];
                  gk[at(j) + c] += s * q[at(i) + c];
                }
              }
          }
        const std::pair<const Tensor<T>*, std::vector<T>*> pairs[] = {{&q, &gq}, {&k, &gk}, {&v, &gv}};
        for (auto [t, src] : pairs)
          detail::accumulate_into(*t, [&](std::vector<T>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*src)[i];
          });
      });
}

// ---- fused losses ---------------------------------------------------------

/// Mean binary cross-entropy of sigmoid(scores) against {0,1} targets, log-sum-exp form.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& scores, const std::vector<T>& targets) {
  if (targets.size() != scores.size())
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for scores " +
                         shape_str(scores.shape()));
  const std::size_t n = scores.size();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T s = scores[i];
    acc += std::max(s, T(0)) - s * targets[i] + std::log1p(std::exp(-std::abs(s)));
  }
  return detail::make_result<T>("bce_with_logits", {1}, {acc / static_cast<T>(n)}, {scores},
                                [scores, targets, n](Node<T>& self) {
                                  detail::accumulate_into(scores, [&](std::vector<T>& g) {
                                    for (std::size_t i = 0; i < n; ++i) {
                                      const T s = scores[i];
                                      const T sig = s >= T(0) ? T(1) / (T(1) + std::exp(-s))
                                                              : std::exp(s) / (T(1) + std::exp(s));
                                      g[i] += self.grad[0] * (sig - targets[i]) / static_cast<T>(n);
                                    }
                                  });
                                });
}

/// Mean softmax cross-entropy over rows of logits[..., C].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  const std::size_t c = logits.shape().back(), rows = logits.size() / c;
  if (labels.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  std::vector<T> probs(logits.size());
  T acc = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= c)
      throw ContractError("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                          std::to_string(c) + " classes");
    const T* x = logits.data().data() + r * c;
    T mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    acc += mx + std::log(z) - x[labels[r]];
  }
  return detail::make_result<T>("cross_entropy", {1}, {acc / static_cast<T>(rows)}, {logits},
                                [logits, labels, probs = std::move(probs), rows, c](Node<T>& self) {
                                  detail::accumulate_into(logits, [&](std::vector<T>& g) {
                                    const T s = self.grad[0] / static_cast<T>(rows);
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < c; ++j)
                                        g[r * c + j] += s * (probs[r * c + j] - (j == labels[r] ? T(1) : T(0)));
                                  });
                                });
}

}  // namespace tssl
