#pragma once

// Differentiable tensor operations. Spatial tensors are laid out H x W x C
// (channels fastest), convolution kernels as k x k x C_in x C_out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "corrfield/tensor.hpp"

namespace corrfield {

namespace stats {

// Multiply-add counter fed by matmul, bmm and conv2d on the calling thread.
inline std::uint64_t& multiply_adds() {
  thread_local std::uint64_t count = 0;
  return count;
}

}  // namespace stats

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " +
                       to_string(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Element strides of `in` viewed through the broadcast shape `out`.
inline std::vector<std::size_t> broadcast_strides(const Shape& in,
                                                  const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Splits a shape around `axis` into (outer, extent, inner) counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <std::floating_point T>
using UnaryFn = T (*)(T);

// Unary map with derivative expressed through input x and output y.
template <std::floating_point T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return BasicTensor<T>::make_result(
      a.shape(), std::move(out), {a.node()}, [deriv](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          in.grad[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
        }
      });
}

// Binary broadcasting map; da/db give partial derivatives at (x, y).
template <std::floating_point T, typename Fwd, typename Da, typename Db>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      Fwd fwd, Da da, Db db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(numel(out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         out[o] = fwd(av[ia], bv[ib]);
                       });
  }
  Shape result_shape = out_shape;
  return BasicTensor<T>::make_result(
      std::move(result_shape), std::move(out), {a.node(), b.node()},
      [out_shape, sa, sb, da, db](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                             const T x = na.value[ia];
                             const T y = nb.value[ib];
                             if (na.requires_grad) na.grad[ia] += self.grad[o] * da(x, y);
                             if (nb.requires_grad) nb.grad[ib] += self.grad[o] * db(x, y);
                           });
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <std::floating_point T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <std::floating_point T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <std::floating_point T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <std::floating_point T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  return detail::unary(
      a, [factor](T x) { return x * factor; },
      [factor](T, T) { return factor; });
}

template <std::floating_point T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset) {
  return detail::unary(
      a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <std::floating_point T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return scale(a, T(-1));
}

template <std::floating_point T>
BasicTensor<T> sin(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <std::floating_point T>
BasicTensor<T> cos(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <std::floating_point T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <std::floating_point T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <std::floating_point T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <std::floating_point T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// log(sigmoid(x)) without overflow for large |x|.
template <std::floating_point T>
BasicTensor<T> log_sigmoid(const BasicTensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        return x >= T(0) ? -std::log1p(std::exp(-x))
                         : x - std::log1p(std::exp(x));
      },
      [](T x, T) {
        // d/dx log(sigmoid(x)) = 1 - sigmoid(x) = sigmoid(-x)
        if (x >= T(0)) {
          const T e = std::exp(-x);
          return e / (T(1) + e);
        }
        return T(1) / (T(1) + std::exp(x));
      });
}

template <std::floating_point T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, b);
}
template <std::floating_point T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return sub(a, b);
}
template <std::floating_point T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return mul(a, b);
}

enum class ElementwiseOp { add, sub, mul, sin, exp, relu, scale };

// Generic entry point. Binary kinds need `b`; `scale` multiplies by a
// single-element `b` treated as a constant factor.
template <std::floating_point T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a,
                           const BasicTensor<T>* b) {
  auto need_b = [&]() -> const BasicTensor<T>& {
    if (!b) throw ShapeError("binary elementwise op needs a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::add: return add(a, need_b());
    case ElementwiseOp::sub: return sub(a, need_b());
    case ElementwiseOp::mul: return mul(a, need_b());
    case ElementwiseOp::sin: return sin(a);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::scale: return scale(a, need_b().item());
  }
  throw std::logic_error("unknown elementwise op");
}

template <std::floating_point T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a) {
  return elementwise(op, a, static_cast<const BasicTensor<T>*>(nullptr));
}

template <std::floating_point T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a,
                           const BasicTensor<T>& b) {
  return elementwise(op, a, &b);
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  return BasicTensor<T>::make_result(
      Shape{}, {total}, {a.node()}, [](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        const T g = self.grad[0];
        for (auto& v : in.grad) v += g;
      });
}

template <std::floating_point T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum over one axis; the axis is removed from the result shape.
template <std::floating_point T>
BasicTensor<T> sum(const BasicTensor<T>& a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += av[(o * s.extent + k) * s.inner + i];
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {a.node()},
      [s](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < s.extent; ++k)
            for (std::size_t i = 0; i < s.inner; ++i)
              in.grad[(o * s.extent + k) * s.inner + i] +=
                  self.grad[o * s.inner + i];
      });
}

// ---------------------------------------------------------------------------
// Layout

template <std::floating_point T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " +
                     to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return BasicTensor<T>::make_result(
      std::move(shape), std::move(out), {a.node()},
      [](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          in.grad[i] += self.grad[i];
      });
}

// Axis permutation: result axis i is input axis perm[i].
template <std::floating_point T>
BasicTensor<T> permute(const BasicTensor<T>& a,
                       const std::vector<std::size_t>& perm) {
  const Shape& in_shape = a.shape();
  const std::size_t rank = in_shape.size();
  if (perm.size() != rank) {
    throw ShapeError("permutation rank mismatch for " + to_string(in_shape));
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;)
    in_strides[d - 1] = in_strides[d] * in_shape[d];
  Shape out_shape(rank);
  std::vector<std::size_t> gather_strides(rank);
  std::vector<bool> used(rank, false);
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank || used[perm[i]]) {
      throw ShapeError("invalid axis permutation");
    }
    used[perm[i]] = true;
    out_shape[i] = in_shape[perm[i]];
    gather_strides[i] = in_strides[perm[i]];
  }
  const std::size_t n = a.size();
  std::vector<std::size_t> source(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      source[o] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += gather_strides[d];
        if (idx[d] < out_shape[d]) break;
        src -= gather_strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const auto av = a.values();
  for (std::size_t o = 0; o < n; ++o) out[o] = av[source[o]];
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {a.node()},
      [source = std::move(source)](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < source.size(); ++o)
          in.grad[source[o]] += self.grad[o];
      });
}

// Half-open range [begin, end) along `axis`.
template <std::floating_point T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis,
                     std::size_t begin, std::size_t end) {
  const auto s = detail::split_at(a.shape(), axis);
  if (begin >= end || end > s.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + to_string(a.shape()));
  }
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * s.extent + begin) * s.inner),
                len * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {a.node()},
      [s, begin, len](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < len * s.inner; ++k)
            in.grad[(o * s.extent + begin) * s.inner + k] +=
                self.grad[o * len * s.inner + k];
      });
}

// Picks entries along `axis` by index (repeats allowed).
template <std::floating_point T>
BasicTensor<T> gather(const BasicTensor<T>& a, std::size_t axis,
                      const std::vector<std::size_t>& indices) {
  const auto s = detail::split_at(a.shape(), axis);
  if (indices.empty()) throw ShapeError("gather needs at least one index");
  for (std::size_t i : indices) {
    if (i >= s.extent) throw ShapeError("gather index out of range");
  }
  const std::size_t len = indices.size();
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * len + k) * s.inner + i] =
            av[(o * s.extent + indices[k]) * s.inner + i];
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {a.node()},
      [s, indices](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        const std::size_t len = indices.size();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < s.inner; ++i)
              in.grad[(o * s.extent + indices[k]) * s.inner + i] +=
                  self.grad[(o * len + k) * s.inner + i];
      });
}

// Joins tensors that agree on every axis except `axis`.
template <std::floating_point T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts,
                      std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat needs at least one tensor");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) {
      throw ShapeError("concat rank mismatch: " + to_string(p.shape()));
    }
    out_shape[axis] += probe[axis];
    probe[axis] = 0;
    Shape ref = out_shape;
    ref[axis] = 0;
    if (probe != ref) {
      throw ShapeError("concat shape mismatch: " +
                       to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
  }
  const auto s = detail::split_at(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::vector<typename BasicTensor<T>::NodePtr> nodes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const auto pv = p.values();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner),
                  ext * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
    offsets.push_back(offset);
    nodes.push_back(p.node());
    offset += ext;
  }
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), std::move(nodes),
      [s, offsets, axis](detail::Node<T>& self) {
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
          auto& in = *self.inputs[p];
          if (!in.requires_grad) continue;
          const std::size_t ext = in.shape[axis];
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < ext * s.inner; ++k)
              in.grad[o * ext * s.inner + k] +=
                  self.grad[(o * s.extent + offsets[p]) * s.inner + k];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [M,K] x [K,N] -> [M,N]
template <std::floating_point T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " do not chain");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T x = av[i * k + p];
      const T* brow = &bv[p * n];
      T* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  stats::multiply_adds() += m * k * n;
  return BasicTensor<T>::make_result(
      Shape{m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T g = self.grad[i * n + j];
              acc += g * nb.value[p * n + j];
              if (nb.requires_grad) nb.grad[p * n + j] += na.value[i * k + p] * g;
            }
            if (na.requires_grad) na.grad[i * k + p] += acc;
          }
      });
}

// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]
template <std::floating_point T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " do not chain");
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(batch * m * n, T(0));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t q = 0; q < batch; ++q)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T x = av[(q * m + i) * k + p];
        const T* brow = &bv[(q * k + p) * n];
        T* orow = &out[(q * m + i) * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
      }
  stats::multiply_adds() += batch * m * k * n;
  return BasicTensor<T>::make_result(
      Shape{batch, m, n}, std::move(out), {a.node(), b.node()},
      [batch, m, k, n](detail::Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for (std::size_t q = 0; q < batch; ++q)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              const T x = na.value[(q * m + i) * k + p];
              for (std::size_t j = 0; j < n; ++j) {
                const T g = self.grad[(q * m + i) * n + j];
                acc += g * nb.value[(q * k + p) * n + j];
                if (nb.requires_grad) nb.grad[(q * k + p) * n + j] += x * g;
              }
              if (na.requires_grad) na.grad[(q * m + i) * k + p] += acc;
            }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

// Cross-correlation with zero "same" padding. input H x W x Cin, kernel
// k x k x Cin x Cout (k odd), optional bias Cout. Output extent is
// ceil(H / stride) x ceil(W / stride).
template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const std::optional<BasicTensor<T>>& bias = {},
                      std::size_t stride = 1) {
  if (input.rank() != 3) {
    throw ShapeError("conv2d input must be H x W x C, got " +
                     to_string(input.shape()));
  }
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) ||
      kernel.dim(0) % 2 == 0) {
    throw ShapeError("conv2d kernel must be k x k x Cin x Cout with odd k, got " +
                     to_string(kernel.shape()));
  }
  if (kernel.dim(2) != input.dim(2)) {
    throw ShapeError("conv2d channel mismatch: input " +
                     to_string(input.shape()) + ", kernel " +
                     to_string(kernel.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != kernel.dim(3))) {
    throw ShapeError("conv2d bias shape " + to_string(bias->shape()) +
                     " does not match kernel " + to_string(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t k = kernel.dim(0), cout = kernel.dim(3);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t oh = (h + stride - 1) / stride;
  const std::size_t ow = (w + stride - 1) / stride;
  const auto iv = input.values();
  const auto kv = kernel.values();
  std::vector<T> out(oh * ow * cout, T(0));
  if (bias) {
    const auto bv = bias->values();
    for (std::size_t p = 0; p < oh * ow; ++p)
      std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(p * cout));
  }
  std::uint64_t macs = 0;
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* o = &out[(oy * ow + ox) * cout];
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* in = &iv[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin];
          const T* kk = &kv[(ky * k + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T x = in[ci];
            const T* krow = kk + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += x * krow[co];
          }
          macs += cin * cout;
        }
      }
    }
  stats::multiply_adds() += macs;
  std::vector<typename BasicTensor<T>::NodePtr> inputs{input.node(), kernel.node()};
  if (bias) inputs.push_back(bias->node());
  return BasicTensor<T>::make_result(
      Shape{oh, ow, cout}, std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        auto& ni = *self.inputs[0];
        auto& nk = *self.inputs[1];
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& nb = *self.inputs[2];
          for (std::size_t p = 0; p < oh * ow; ++p)
            for (std::size_t co = 0; co < cout; ++co)
              nb.grad[co] += self.grad[p * cout + co];
        }
        // Both gradients are written as axpy updates over a contiguous
        // channel axis so the inner loops vectorize; the input gradient
        // uses the kernel transposed to k x k x Cout x Cin.
        std::vector<T> kt;
        if (ni.requires_grad) {
          kt.resize(nk.value.size());
          for (std::size_t t = 0; t < k * k; ++t)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co)
                kt[(t * cout + co) * cin + ci] = nk.value[(t * cin + ci) * cout + co];
        }
        const T* xv = ni.value.data();
        T* xg = ni.requires_grad ? ni.grad.data() : nullptr;
        T* kg = nk.requires_grad ? nk.grad.data() : nullptr;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T* __restrict g = &self.grad[(oy * ow + ox) * cout];
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t ibase =
                    (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                const std::size_t tap = ky * k + kx;
                if (kg) {
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const T x = xv[ibase + ci];
                    T* __restrict row = kg + (tap * cin + ci) * cout;
                    for (std::size_t co = 0; co < cout; ++co) row[co] += x * g[co];
                  }
                }
                if (xg) {
                  T* __restrict dst = xg + ibase;
                  for (std::size_t co = 0; co < cout; ++co) {
                    const T gc = g[co];
                    const T* __restrict col = &kt[(tap * cout + co) * cin];
                    for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += gc * col[ci];
                  }
                }
              }
            }
          }
      });
}

template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride = 1) {
  return conv2d(input, kernel, std::optional<BasicTensor<T>>(bias), stride);
}

// Mean over non-overlapping factor x factor windows of an H x W x C map.
template <std::floating_point T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t factor) {
  if (input.rank() != 3 || factor == 0 || input.dim(0) % factor != 0 ||
      input.dim(1) % factor != 0) {
    throw ShapeError("avg_pool2d factor " + std::to_string(factor) +
                     " does not tile " + to_string(input.shape()));
  }
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::size_t oh = h / factor, ow = w / factor;
  const T norm = T(1) / static_cast<T>(factor * factor);
  std::vector<T> out(oh * ow * c, T(0));
  const auto iv = input.values();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[((y / factor) * ow + x / factor) * c + ch] += iv[(y * w + x) * c + ch] * norm;
  return BasicTensor<T>::make_result(
      Shape{oh, ow, c}, std::move(out), {input.node()},
      [=](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
              in.grad[(y * w + x) * c + ch] +=
                  self.grad[((y / factor) * ow + x / factor) * c + ch] * norm;
      });
}

// Nearest-neighbour upsampling: each input pixel becomes a factor x factor
// block. The backward pass sums each block.
template <std::floating_point T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& input, std::size_t factor) {
  if (input.rank() != 3 || factor == 0) {
    throw ShapeError("upsample_nearest needs H x W x C and factor >= 1, got " +
                     to_string(input.shape()));
  }
  const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<T> out(oh * ow * c);
  const auto iv = input.values();
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(y * ow + x) * c + ch] = iv[((y / factor) * w + x / factor) * c + ch];
  return BasicTensor<T>::make_result(
      Shape{oh, ow, c}, std::move(out), {input.node()},
      [=](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
              in.grad[((y / factor) * w + x / factor) * c + ch] +=
                  self.grad[(y * ow + x) * c + ch];
      });
}

// ---------------------------------------------------------------------------
// Normalization

template <std::floating_point T>
BasicTensor<T> softmax(const BasicTensor<T>& a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  const auto av = a.values();
  std::vector<T> out(a.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k)
        peak = std::max(peak, av[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(av[base + k * s.inner] - peak);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  return BasicTensor<T>::make_result(
      a.shape(), std::move(out), {a.node()}, [s](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T dot = 0;
            for (std::size_t k = 0; k < s.extent; ++k)
              dot += self.grad[base + k * s.inner] * self.value[base + k * s.inner];
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t j = base + k * s.inner;
              in.grad[j] += self.value[j] * (self.grad[j] - dot);
            }
          }
      });
}

template <std::floating_point T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a, std::size_t axis) {
  const auto s = detail::split_at(a.shape(), axis);
  const auto av = a.values();
  std::vector<T> out(a.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k)
        peak = std::max(peak, av[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k)
        total += std::exp(av[base + k * s.inner] - peak);
      const T lse = peak + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k)
        out[base + k * s.inner] = av[base + k * s.inner] - lse;
    }
  return BasicTensor<T>::make_result(
      a.shape(), std::move(out), {a.node()}, [s](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T gsum = 0;
            for (std::size_t k = 0; k < s.extent; ++k) gsum += self.grad[base + k * s.inner];
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t j = base + k * s.inner;
              in.grad[j] += self.grad[j] - std::exp(self.value[j]) * gsum;
            }
          }
      });
}

}  // namespace corrfield
