#pragma once

// Differentiable primitives. Every op returns a new tensor; gradients are
// propagated by the closure recorded in make_result().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "ubatrack/numerics/kernels.hpp"
#include "ubatrack/numerics/random.hpp"
#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b) + " at axis " + std::to_string(i));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat source index for every output element.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t lead = rank - src.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > lead;) {
    const std::size_t extent = src[i - lead];
    stride[i] = extent == 1 ? 0 : s;
    s *= extent;
  }
  std::vector<std::size_t> index(shape_numel(out));
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    index[flat] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      offset += stride[ax];
      if (++counter[ax] < out[ax]) break;
      offset -= stride[ax] * out[ax];
      counter[ax] = 0;
    }
  }
  return index;
}

// Splits a shape around one axis into (outer, extent, inner).
inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer,
                       std::size_t& extent, std::size_t& inner) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  extent = shape[axis];
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T stable_softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(src.value[i], self.value[i]);
    src.accumulate(g);
  });
}

// dfa/dfb receive (a, b, out) and return the partial derivative.
template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb,
                    const char* name) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [dfa, dfb](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      const std::size_t n = self.grad.size();
      if (na.requires_grad) {
        auto& ga = na.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * dfa(na.value[i], nb.value[i], self.value[i]);
      }
      if (nb.requires_grad) {
        auto& gb = nb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * dfb(na.value[i], nb.value[i], self.value[i]);
      }
    });
  }
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
  auto ia = detail::broadcast_index(a.shape(), out_shape);
  auto ib = detail::broadcast_index(b.shape(), out_shape);
  std::vector<T> out(ia.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[ia[i]], bv[ib[i]]);
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                        [dfa, dfb, ia = std::move(ia), ib = std::move(ib)](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const std::size_t n = self.grad.size();
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        ga[ia[i]] += self.grad[i] * dfa(na.value[ia[i]], nb.value[ib[i]], self.value[i]);
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        gb[ib[i]] += self.grad[i] * dfb(na.value[ia[i]], nb.value[ib[i]], self.value[i]);
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x + y; },
                   [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x - y; },
                   [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x * y; },
                   [](T, T y, T) { return y; }, [](T x, T, T) { return x; }, "mul");
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x / y; },
                   [](T, T y, T) { return T(1) / y; },
                   [](T, T y, T out) { return -out / y; }, "div");
}

// Ties route the gradient to the first operand.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x >= y ? x : y; },
                   [](T x, T y, T) { return x >= y ? T(1) : T(0); },
                   [](T x, T y, T) { return x >= y ? T(0) : T(1); }, "maximum");
}

template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, [](T x, T y) { return x <= y ? x : y; },
                   [](T x, T y, T) { return x <= y ? T(1) : T(0); },
                   [](T x, T y, T) { return x <= y ? T(0) : T(1); }, "minimum");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return unary_op(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> expm1(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::expm1(v); }, [](T, T y) { return y + T(1); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return detail::stable_sigmoid(v); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v * detail::stable_sigmoid(v); },
                  [](T v, T) {
                    const T s = detail::stable_sigmoid(v);
                    return s + v * s * (T(1) - s);
                  });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return detail::stable_softplus(v); },
                  [](T v, T) { return detail::stable_sigmoid(v); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return unary_op(x,
                  [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
                  [](T v, T) {
                    const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
                    const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
                    return cdf + v * pdf;
                  });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::abs(v); },
                  [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> pow_scalar(const Tensor<T>& x, T exponent) {
  return unary_op(x, [exponent](T v) { return std::pow(v, exponent); },
                  [exponent](T v, T) { return exponent * std::pow(v, exponent - T(1)); });
}

// Values outside [lo, hi] are pinned and receive zero gradient.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary_op(x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
                  [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

enum class Pointwise { kSigmoid, kSilu, kSoftplus, kRelu, kExpm1 };

template <class T>
Tensor<T> pointwise(const Tensor<T>& x, Pointwise f) {
  switch (f) {
    case Pointwise::kSigmoid: return sigmoid(x);
    case Pointwise::kSilu: return silu(x);
    case Pointwise::kSoftplus: return softplus(x);
    case Pointwise::kRelu: return relu(x);
    case Pointwise::kExpm1: return expm1(x);
  }
  throw DomainError("unknown pointwise function");
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  return make_result<T>({1}, {total}, {&x}, [](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  std::vector<T> out(outer * inner, T(0));
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[(o * extent + e) * inner + i];
  Shape shape = x.shape();
  if (keepdim || shape.size() == 1) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return make_result<T>(std::move(shape), std::move(out), {&x}, [outer, extent, inner](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t i = 0; i < inner; ++i) g[(o * extent + e) * inner + i] += self.grad[o * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.values(), {&x}, [](Node<T>& self) {
    self.inputs[0]->accumulate(self.grad);
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) throw ShapeError("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape;
  auto out = kernels::permute(x.values(), x.shape(), perm, &out_shape);
  return make_result<T>(out_shape, std::move(out), {&x}, [perm, out_shape](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    src.accumulate(kernels::permute(self.grad, out_shape, kernels::inverse_permutation(perm)));
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  if (length == 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<T> out(outer * length * inner);
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  Shape shape = x.shape();
  shape[axis] = length;
  return make_result<T>(std::move(shape), std::move(out), {&x},
                        [outer, extent, inner, start, length](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < length * inner; ++j)
        g[(o * extent + start) * inner + j] += self.grad[o * length * inner + j];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  std::size_t outer, extent0, inner;
  detail::split_axis(shape, axis, outer, extent0, inner);
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.dim(i) != shape[i]) {
        throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + ": " +
                         shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::size_t base = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& in = parts[k].values();
    const std::size_t run = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * run), run,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + base * inner));
    base += extents[k];
  }
  return make_result<T>(std::move(shape), std::move(out), parts,
                        [outer, inner, total, extents](Node<T>& self) {
    std::size_t base = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& src = *self.inputs[k];
      const std::size_t run = extents[k] * inner;
      if (src.requires_grad) {
        auto& g = src.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < run; ++j) g[o * run + j] += self.grad[o * total * inner + base * inner + j];
      }
      base += extents[k];
    }
  });
}

// out[..., i, ...] = x[..., indices[i], ...] along one axis.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  if (indices.empty()) throw ShapeError("index_select with no indices");
  for (auto idx : indices) {
    if (idx >= extent) throw ShapeError("index_select index " + std::to_string(idx) + " out of range");
  }
  const std::size_t count = indices.size();
  std::vector<T> out(outer * count * inner);
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < count; ++k)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * extent + indices[k]) * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * count + k) * inner));
  Shape shape = x.shape();
  shape[axis] = count;
  return make_result<T>(std::move(shape), std::move(out), {&x},
                        [outer, extent, inner, indices](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    const std::size_t count = indices.size();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < count; ++k)
        for (std::size_t i = 0; i < inner; ++i)
          g[(o * extent + indices[k]) * inner + i] += self.grad[(o * count + k) * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Layers

// x (..., in) * W (in, out) + b (out)
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>* b = nullptr) {
  if (W.rank() != 2 || x.shape().back() != W.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(W.shape()) +
                     " (last axis of input must equal axis 0 of weight)");
  }
  if (b && (b->rank() != 1 || b->dim(0) != W.dim(1))) {
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " vs weight " + shape_str(W.shape()));
  }
  const std::size_t in = W.dim(0), out = W.dim(1), rows = x.numel() / in;
  std::vector<T> y(rows * out);
  if (b) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(b->values().begin(), out, y.begin() + static_cast<std::ptrdiff_t>(r * out));
  }
  kernels::gemm_nn(rows, out, in, x.values().data(), W.values().data(), y.data(), b != nullptr);
  Shape shape = x.shape();
  shape.back() = out;
  auto backward_fn = [rows, in, out](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    if (nx.requires_grad)
      kernels::gemm_nt(rows, in, out, self.grad.data(), nw.value.data(), nx.ensure_grad().data(), true);
    if (nw.requires_grad)
      kernels::gemm_tn(in, out, rows, nx.value.data(), self.grad.data(), nw.ensure_grad().data(), true);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) gb[j] += self.grad[r * out + j];
    }
  };
  if (b) return make_result<T>(std::move(shape), std::move(y), {&x, &W, b}, backward_fn);
  return make_result<T>(std::move(shape), std::move(y), {&x, &W}, backward_fn);
}

// Softmax along the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
  std::vector<T> y(x.numel());
  const auto& in = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * cols;
    T* dst = y.data() + r * cols;
    const T peak = *std::max_element(row, row + cols);
    T total = T(0);
    for (std::size_t c = 0; c < cols; ++c) total += dst[c] = std::exp(row[c] - peak);
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  return make_result<T>(x.shape(), std::move(y), {&x}, [rows, cols](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * cols;
      const T* gr = self.grad.data() + r * cols;
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += yr[c] * (gr[c] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes along the last axis, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t cols = x.shape().back();
  if (gamma.numel() != cols || beta.numel() != cols) {
    throw ShapeError("layer_norm: channel extent " + std::to_string(cols) + " vs gamma " +
                     shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / cols;
  std::vector<T> y(x.numel()), xhat(x.numel()), rstd(rows);
  const auto& in = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * cols;
    T mu = T(0);
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mu) * inv;
      xhat[r * cols + c] = h;
      y[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return make_result<T>(x.shape(), std::move(y), {&x, &gamma, &beta},
                        [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& ng = *self.inputs[1];
    auto& nb = *self.inputs[2];
    if (ng.requires_grad) {
      auto& gg = ng.ensure_grad();
      for (std::size_t i = 0; i < xhat.size(); ++i) gg[i % cols] += self.grad[i] * xhat[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < xhat.size(); ++i) gb[i % cols] += self.grad[i];
    }
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      std::vector<T> dh(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
          dh[c] = self.grad[r * cols + c] * ng.value[c];
          mean_dh += dh[c];
          mean_dh_h += dh[c] * xhat[r * cols + c];
        }
        mean_dh /= static_cast<T>(cols);
        mean_dh_h /= static_cast<T>(cols);
        for (std::size_t c = 0; c < cols; ++c)
          gx[r * cols + c] += rstd[r] * (dh[c] - mean_dh - xhat[r * cols + c] * mean_dh_h);
      }
    }
  });
}

// Inverted dropout. Identity (same handle) when not training or rate == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw DomainError("dropout rate must be < 1");
  if (!rng) throw DomainError("dropout in training mode needs an rng");
  const T scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng->bernoulli(rate) ? T(0) : scale;
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.values()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(y), {&x}, [mask = std::move(mask)](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    auto& g = src.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// 3x3 neighbourhood gather with zero padding on a channels-last map:
// (B, H, W, C) -> (B, H, W, 9C), neighbour-major then channel.
template <class T>
Tensor<T> im2col3x3(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("im2col3x3 expects (B,H,W,C), got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::vector<T> out(B * H * W * 9 * C, T(0));
  const auto& in = x.values();
  auto for_each_tap = [B, H, W, C](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (std::size_t t = 0; t < 9; ++t) {
            const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(t / 3) - 1;
            const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(t % 3) - 1;
            if (hh < 0 || ww < 0 || hh >= static_cast<std::ptrdiff_t>(H) || ww >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t src = ((b * H + static_cast<std::size_t>(hh)) * W + static_cast<std::size_t>(ww)) * C;
            const std::size_t dst = (((b * H + h) * W + w) * 9 + t) * C;
            fn(src, dst);
          }
  };
  for_each_tap([&](std::size_t src, std::size_t dst) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(src), C, out.begin() + static_cast<std::ptrdiff_t>(dst));
  });
  return make_result<T>({B, H, W, 9 * C}, std::move(out), {&x}, [for_each_tap, C](Node<T>& self) {
    auto& src_node = *self.inputs[0];
    if (!src_node.requires_grad) return;
    auto& g = src_node.ensure_grad();
    for_each_tap([&](std::size_t src, std::size_t dst) {
      for (std::size_t c = 0; c < C; ++c) g[src + c] += self.grad[dst + c];
    });
  });
}

}  // namespace ubatrack
