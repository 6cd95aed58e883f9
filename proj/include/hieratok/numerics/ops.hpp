#pragma once

// Differentiable operations over Tensor<T>. Each op computes its forward value
// eagerly and, when any input requires a gradient, registers a closure that
// accumulates the exact analytic gradient into its inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

// Small products would otherwise take Eigen's coefficient-wise path, whose
// rounding depends on the alignment of the destination buffer.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/tensor.hpp"

namespace hieratok {

/// Additive value marking a disallowed attention position.
inline constexpr double kMaskValue = -1e9;

namespace detail {

inline std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

inline std::size_t normalize_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Vectorized exp and erf round differently from their scalar fallbacks, and
// Eigen peels a scalar head off mapped ranges depending on pointer alignment.
// Evaluating through aligned fixed-size blocks keeps every element on the
// packet path, so results do not depend on where a buffer was allocated.
inline constexpr std::size_t kBlock = 64;

template <typename T>
inline constexpr T kInvSqrt2 = T(1) / std::numbers::sqrt2_v<T>;
template <typename T>
inline constexpr T kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2<T>;
template <typename T>
using Block = Eigen::Array<T, static_cast<int>(kBlock), 1>;

// Calls f(in_blocks..., out_block) for each block of n elements and writes
// out_block back to dst. Lanes past n are zero on input and discarded.
template <typename T, std::size_t K, typename F>
void blockwise(std::size_t n, const std::array<const T*, K>& src, T* dst, bool accumulate, F&& f) {
  std::array<Block<T>, K> in;
  Block<T> out;
  for (std::size_t off = 0; off < n; off += kBlock) {
    const std::size_t len = std::min(kBlock, n - off);
    for (std::size_t k = 0; k < K; ++k) {
      if (len < kBlock) in[k].setZero();
      std::copy_n(src[k] + off, len, in[k].data());
    }
    std::apply([&](const auto&... b) { out = f(b...); }, in);
    if (accumulate) {
      for (std::size_t i = 0; i < len; ++i) dst[off + i] += out[static_cast<Eigen::Index>(i)];
    } else {
      std::copy_n(out.data(), len, dst + off);
    }
  }
}

// C[MxN] += A[MxK] * B[KxN]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap<T>(c, ix(m), ix(n)).noalias() += CMap<T>(a, ix(m), ix(k)) * CMap<T>(b, ix(k), ix(n));
}

// C[MxN] += A[MxK] * B^T where B is [NxK]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap<T>(c, ix(m), ix(n)).noalias() += CMap<T>(a, ix(m), ix(k)) * CMap<T>(b, ix(n), ix(k)).transpose();
}

// C[KxN] += A^T * D where A is [MxK] and D is [MxN]
template <typename T>
void gemm_tn(const T* a, const T* d, T* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap<T>(c, ix(k), ix(n)).noalias() += CMap<T>(a, ix(m), ix(k)).transpose() * CMap<T>(d, ix(m), ix(n));
}

// Row-major weights mapping `in` samples onto `out` cells by fractional overlap.
inline std::vector<double> area_weights(std::size_t in, std::size_t out) {
  std::vector<double> w(out * in, 0.0);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double lo = static_cast<double>(i * in) / static_cast<double>(out);
    const double hi = static_cast<double>((i + 1) * in) / static_cast<double>(out);
    const auto first = static_cast<std::size_t>(std::floor(lo));
    const auto last = std::min(in, static_cast<std::size_t>(std::ceil(hi)));
    for (std::size_t y = first; y < last; ++y) {
      const double overlap = std::min(hi, static_cast<double>(y + 1)) - std::max(lo, static_cast<double>(y));
      if (overlap > 0) w[i * in + y] = overlap / scale;
    }
  }
  return w;
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> broadcast_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
  Shape out_shape;
  if (is_suffix(a.shape(), b.shape())) {
    out_shape = a.shape();
  } else if (is_suffix(b.shape(), a.shape())) {
    out_shape = b.shape();
  } else {
    throw DimensionError(shapes_msg(op, a.shape(), b.shape()));
  }
  const std::size_t n = numel(out_shape), na = a.numel(), nb = b.numel();
  const T* av = a.data().data();
  const T* bv = b.data().data();
  std::vector<T> out(n);
  // The smaller operand repeats every `period` elements.
  const std::size_t period = std::min(na, nb);
  for (std::size_t base = 0; base < n; base += period) {
    const T* ap = na == n ? av + base : av;
    const T* bp = nb == n ? bv + base : bv;
    T* op = out.data() + base;
    for (std::size_t j = 0; j < period; ++j) op[j] = f(ap[j], bp[j]);
  }
  return Tensor<T>::from_op(op, std::move(out_shape), std::move(out), {a, b},
                            [an = a.node(), bn = b.node(), n, na, nb, period, dfa, dfb](detail::Node<T>& self) {
                              const T* x = an->value.data();
                              const T* y = bn->value.data();
                              const T* g = self.grad.data();
                              for (std::size_t base = 0; base < n; base += period) {
                                const std::size_t oa = na == n ? base : 0, ob = nb == n ? base : 0;
                                if (an->requires_grad) {
                                  T* ga = an->grad.data() + oa;
                                  for (std::size_t j = 0; j < period; ++j)
                                    ga[j] += g[base + j] * dfa(x[oa + j], y[ob + j]);
                                }
                                if (bn->requires_grad) {
                                  T* gb = bn->grad.data() + ob;
                                  for (std::size_t j = 0; j < period; ++j)
                                    gb[j] += g[base + j] * dfb(x[oa + j], y[ob + j]);
                                }
                              }
                            });
}

// df receives (input, output).
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, DF df) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return Tensor<T>::from_op(op, a.shape(), std::move(out), {a}, [an = a.node(), df](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * df(an->value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise. The smaller operand's shape must be a suffix of the larger's;
// it is tiled across the leading dimensions.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  detail::blockwise<T, 1>(out.size(), {a.data().data()}, out.data(), false, [](const auto& x) { return x.exp(); });
  return Tensor<T>::from_op("exp", a.shape(), std::move(out), {a}, [an = a.node()](detail::Node<T>& self) {
    const auto n = detail::ix(self.grad.size());
    detail::ArrMap<T>(an->grad.data(), n) +=
        detail::CArrMap<T>(self.grad.data(), n) * detail::CArrMap<T>(self.value.data(), n);
  });
}

/// Gradient passes only where lo < x < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  detail::blockwise<T, 1>(n, {a.data().data()}, out.data(), false,
                          [](const auto& x) { return T(0.5) * x * (T(1) + (x * detail::kInvSqrt2<T>).erf()); });
  return Tensor<T>::from_op("gelu", a.shape(), std::move(out), {a}, [an = a.node(), n](detail::Node<T>& self) {
    detail::blockwise<T, 2>(n, {an->value.data(), self.grad.data()}, an->grad.data(), true,
                            [](const auto& x, const auto& g) {
                              return g * (T(0.5) * (T(1) + (x * detail::kInvSqrt2<T>).erf()) +
                                          x * detail::kInvSqrt2Pi<T> * (T(-0.5) * x.square()).exp());
                            });
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return Tensor<T>::from_op("sum", {1}, {s}, {a}, [an = a.node()](detail::Node<T>& self) {
    const T g = self.grad[0];
    for (T& v : an->grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return Tensor<T>::from_op("mean", {1}, {s * inv}, {a}, [an = a.node(), inv](detail::Node<T>& self) {
    const T g = self.grad[0] * inv;
    for (T& v : an->grad) v += g;
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) throw DimensionError(detail::shapes_msg("reshape", a.shape(), shape));
  std::vector<T> v(a.data().begin(), a.data().end());
  return Tensor<T>::from_op("reshape", std::move(shape), std::move(v), {a}, [an = a.node()](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

/// out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank differs from tensor rank " + to_string(a.shape()));
  std::vector<bool> used(r, false);
  for (std::size_t p : perm) {
    if (p >= r || used[p]) throw IndexError("permute: invalid permutation");
    used[p] = true;
  }
  Shape in_stride(r, 1), out_shape(r), src_stride(r);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // Walks the output in order; f(out_offset, src_offset, run, src_step) covers one
  // innermost run.
  auto walk = [out_shape, src_stride, r](auto&& f) {
    const std::size_t run = out_shape[r - 1], step = src_stride[r - 1];
    std::size_t rows = 1;
    for (std::size_t i = 0; i + 1 < r; ++i) rows *= out_shape[i];
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t row = 0; row < rows; ++row) {
      f(row * run, src, run, step);
      for (std::size_t i = r - 1; i-- > 0;) {
        src += src_stride[i];
        if (++idx[i] < out_shape[i]) break;
        src -= src_stride[i] * out_shape[i];
        idx[i] = 0;
      }
    }
  };
  const T* av = a.data().data();
  std::vector<T> out(a.numel());
  walk([&](std::size_t o, std::size_t src, std::size_t run, std::size_t step) {
    for (std::size_t j = 0; j < run; ++j) out[o + j] = av[src + j * step];
  });
  return Tensor<T>::from_op("permute", std::move(out_shape), std::move(out), {a},
                            [an = a.node(), walk](detail::Node<T>& self) {
                              T* ga = an->grad.data();
                              const T* g = self.grad.data();
                              walk([&](std::size_t o, std::size_t src, std::size_t run, std::size_t step) {
                                for (std::size_t j = 0; j < run; ++j) ga[src + j * step] += g[o + j];
                              });
                            });
}

template <typename T>
Tensor<T> transpose_last(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last: rank < 2 for shape " + to_string(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = detail::normalize_axis("concat", axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError(detail::shapes_msg("concat", parts[0].shape(), s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i])
        throw DimensionError(detail::shapes_msg("concat", parts[0].shape(), s));
    }
    out_shape[ax] += s[ax];
  }
  const auto sp = detail::split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[ax] * sp.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + o * len, len, out.begin() + o * sp.n * sp.inner + off * sp.inner);
    off += p.shape()[ax];
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor<T>::from_op("concat", std::move(out_shape), std::move(out), parts,
                            [nodes, offsets, sp, ax](detail::Node<T>& self) {
                              for (std::size_t k = 0; k < nodes.size(); ++k) {
                                auto& pn = *nodes[k];
                                if (!pn.requires_grad) continue;
                                const std::size_t len = pn.shape[ax] * sp.inner;
                                for (std::size_t o = 0; o < sp.outer; ++o) {
                                  const T* g = self.grad.data() + o * sp.n * sp.inner + offsets[k] * sp.inner;
                                  T* d = pn.grad.data() + o * len;
                                  for (std::size_t i = 0; i < len; ++i) d[i] += g[i];
                                }
                              }
                            });
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis("slice", axis, a.rank());
  if (begin >= end || end > a.shape()[ax]) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis of size " +
                     std::to_string(a.shape()[ax]));
  }
  const auto sp = detail::split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = (end - begin) * sp.inner;
  const auto av = a.data();
  std::vector<T> out(sp.outer * len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.begin() + o * sp.n * sp.inner + begin * sp.inner, len, out.begin() + o * len);
  return Tensor<T>::from_op("slice", std::move(out_shape), std::move(out), {a},
                            [an = a.node(), sp, len, begin](detail::Node<T>& self) {
                              for (std::size_t o = 0; o < sp.outer; ++o) {
                                T* d = an->grad.data() + o * sp.n * sp.inner + begin * sp.inner;
                                const T* g = self.grad.data() + o * len;
                                for (std::size_t i = 0; i < len; ++i) d[i] += g[i];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a: [..., M, K]. b: [K, N] shared across the leading dims of a, or
/// [..., K, N] with the same leading dims as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError(detail::shapes_msg("matmul", a.shape(), b.shape()));
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape().back();
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape().back();
  if (k != kb) throw DimensionError(detail::shapes_msg("matmul", a.shape(), b.shape()));
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw DimensionError(detail::shapes_msg("matmul", a.shape(), b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(batch * m * n, T(0));
  if (shared) {
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), batch * m, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  return Tensor<T>::from_op("matmul", std::move(out_shape), std::move(out), {a, b},
                            [an = a.node(), bn = b.node(), shared, batch, m, k, n](detail::Node<T>& self) {
                              const T* g = self.grad.data();
                              if (shared) {
                                if (an->requires_grad)
                                  detail::gemm_nt(g, bn->value.data(), an->grad.data(), batch * m, n, k);
                                if (bn->requires_grad)
                                  detail::gemm_tn(an->value.data(), g, bn->grad.data(), batch * m, k, n);
                                return;
                              }
                              for (std::size_t i = 0; i < batch; ++i) {
                                if (an->requires_grad)
                                  detail::gemm_nt(g + i * m * n, bn->value.data() + i * k * n,
                                                  an->grad.data() + i * m * k, m, n, k);
                                if (bn->requires_grad)
                                  detail::gemm_tn(an->value.data() + i * m * k, g + i * m * n,
                                                  bn->grad.data() + i * k * n, m, k, n);
                              }
                            });
}

/// x @ w (+ bias). bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  Tensor<T> y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalisation

/// Softmax along `axis`. `additive_mask`, if given, has a shape that is a
/// suffix of x's and is added before normalisation; entries at or below
/// kMaskValue / 2 are treated as masked and receive exactly zero weight.
/// A row with every entry masked yields all zeros.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis, const Tensor<T>& additive_mask = {}) {
  const std::size_t ax = detail::normalize_axis("softmax", axis, x.rank());
  const bool has_mask = additive_mask.defined();
  if (has_mask && !detail::is_suffix(x.shape(), additive_mask.shape()))
    throw DimensionError(detail::shapes_msg("softmax", x.shape(), additive_mask.shape()));
  const auto sp = detail::split_at(x.shape(), ax);
  const auto xv = x.data();
  const std::size_t nm = has_mask ? additive_mask.numel() : 1;
  const T masked_below = static_cast<T>(kMaskValue / 2);
  std::vector<T> out(x.numel(), T(0));
  std::vector<T> z(sp.n);
  std::vector<char> live(sp.n);
  const T* mv = has_mask ? additive_mask.data().data() : nullptr;
  // A mask that stops short of `axis` is constant along it.
  const std::size_t mstep = nm >= sp.n * sp.inner ? sp.inner : 0;
  if (sp.inner == 1 && (!has_mask || mstep == 1)) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = detail::ix(sp.n);
    Arr live(n), zr(n);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const auto xr = detail::CArrMap<T>(xv.data() + o * sp.n, n);
      if (has_mask) {
        const auto mr = detail::CArrMap<T>(mv + (o * sp.n) % nm, n);
        live = (mr > masked_below).template cast<T>();
        if (live.maxCoeff() == T(0)) continue;
        zr = xr + mr;
      } else {
        zr = xr;
      }
      const T mx = has_mask ? (live > T(0)).select(zr, -std::numeric_limits<T>::infinity()).maxCoeff() : zr.maxCoeff();
      zr = (zr - mx).exp();
      if (has_mask) zr *= live;
      detail::ArrMap<T>(out.data() + o * sp.n, n) = zr * (T(1) / zr.sum());
    }
    return Tensor<T>::from_op("softmax", x.shape(), std::move(out), {x}, [xn = x.node(), sp](detail::Node<T>& self) {
      const auto n = detail::ix(sp.n);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const auto y = detail::CArrMap<T>(self.value.data() + o * sp.n, n);
        const auto g = detail::CArrMap<T>(self.grad.data() + o * sp.n, n);
        T dot = 0;
        for (Eigen::Index j = 0; j < n; ++j) dot += y[j] * g[j];
        detail::ArrMap<T>(xn->grad.data() + o * sp.n, n) += y * (g - dot);
      }
    });
  }
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      const T* mrow = has_mask ? mv + (base % nm) : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t idx = base + j * sp.inner;
        const T m = has_mask ? mrow[j * mstep] : T(0);
        live[j] = m > masked_below;
        z[j] = xv[idx] + m;
        if (live[j]) {
          mx = any ? std::max(mx, z[j]) : z[j];
          any = true;
        }
      }
      if (!any) continue;
      for (std::size_t j = 0; j < sp.n; ++j) z[j] = live[j] ? z[j] - mx : T(0);
      detail::blockwise<T, 1>(sp.n, {z.data()}, z.data(), false, [](const auto& v) { return v.exp(); });
      T total = 0;
      for (std::size_t j = 0; j < sp.n; ++j)
        if (live[j]) total += z[j];
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < sp.n; ++j)
        if (live[j]) out[base + j * sp.inner] = z[j] * inv;
    }
  }
  return Tensor<T>::from_op("softmax", x.shape(), std::move(out), {x}, [xn = x.node(), sp](detail::Node<T>& self) {
    const auto& y = self.value;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += y[base + j * sp.inner] * self.grad[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          xn->grad[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// Normalises over the last axis, then applies gain and bias (each of that length).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n)
    throw DimensionError(detail::shapes_msg("layer_norm", x.shape(), gain.shape()));
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<T> xhat(x.numel()), rstd(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  return Tensor<T>::from_op(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat), rstd = std::move(rstd), n,
       rows](detail::Node<T>& self) {
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * n;
          const T* xh = xhat.data() + r * n;
          if (gn->requires_grad)
            for (std::size_t j = 0; j < n; ++j) gn->grad[j] += gr[j] * xh[j];
          if (bn->requires_grad)
            for (std::size_t j = 0; j < n; ++j) bn->grad[j] += gr[j];
          if (xn->requires_grad) {
            T s1 = 0, s2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T dyg = gr[j] * gn->value[j];
              s1 += dyg;
              s2 += dyg * xh[j];
            }
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dyg = gr[j] * gn->value[j];
              xn->grad[r * n + j] += rstd[r] * (dyg - inv_n * s1 - xh[j] * inv_n * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial

/// Valid cross-correlation. x: [B,C,H,W], kernel: [O,C,k,k]. Requires
/// (H - k) and (W - k) to be multiples of stride.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride) {
  if (x.rank() != 4 || kernel.rank() != 4 || x.shape()[1] != kernel.shape()[1] ||
      kernel.shape()[2] != kernel.shape()[3])
    throw DimensionError(detail::shapes_msg("conv2d", x.shape(), kernel.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t bsz = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t o = kernel.shape()[0], k = kernel.shape()[2];
  if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " not tiled by kernel " + std::to_string(k) +
                     " at stride " + std::to_string(stride));
  }
  const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  const std::size_t rows = bsz * ho * wo, ckk = c * k * k;
  const auto xv = x.data();
  std::vector<T> cols(rows * ckk);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T* dst = cols.data() + ((b * ho + oy) * wo + ox) * ckk;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              *dst++ = xv[((b * c + ci) * h + oy * stride + ky) * w + ox * stride + kx];
      }
  std::vector<T> res(rows * o, T(0));
  detail::gemm_nt(cols.data(), kernel.data().data(), res.data(), rows, ckk, o);
  std::vector<T> out(bsz * o * ho * wo);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t p = 0; p < ho * wo; ++p)
      for (std::size_t oc = 0; oc < o; ++oc) out[(b * o + oc) * ho * wo + p] = res[(b * ho * wo + p) * o + oc];
  return Tensor<T>::from_op(
      "conv2d", {bsz, o, ho, wo}, std::move(out), {x, kernel},
      [xn = x.node(), kn = kernel.node(), cols = std::move(cols), bsz, c, h, w, o, k, stride, ho, wo, rows,
       ckk](detail::Node<T>& self) {
        std::vector<T> g(rows * o);
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t p = 0; p < ho * wo; ++p)
            for (std::size_t oc = 0; oc < o; ++oc) g[(b * ho * wo + p) * o + oc] = self.grad[(b * o + oc) * ho * wo + p];
        if (kn->requires_grad) detail::gemm_tn(g.data(), cols.data(), kn->grad.data(), rows, o, ckk);
        if (xn->requires_grad) {
          std::vector<T> dcols(rows * ckk, T(0));
          detail::gemm_nn(g.data(), kn->value.data(), dcols.data(), rows, o, ckk);
          for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t oy = 0; oy < ho; ++oy)
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const T* src = dcols.data() + ((b * ho + oy) * wo + ox) * ckk;
                for (std::size_t ci = 0; ci < c; ++ci)
                  for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx)
                      xn->grad[((b * c + ci) * h + oy * stride + ky) * w + ox * stride + kx] += *src++;
              }
        }
      });
}

/// Area interpolation of x: [B,C,H,W] down to [B,C,out_h,out_w]. Every output
/// cell is the overlap-weighted mean of the source pixels it covers; at the
/// native size the input is returned unchanged.
template <typename T>
Tensor<T> area_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("area_pool: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t planes = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw DimensionError("area_pool: cannot pool " + to_string(x.shape()) + " to " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
  }
  if (out_h == h && out_w == w) return reshape(x, x.shape());
  const auto wh64 = detail::area_weights(h, out_h);
  const auto ww64 = detail::area_weights(w, out_w);
  std::vector<T> wh(wh64.begin(), wh64.end()), ww(ww64.begin(), ww64.end());
  const auto xv = x.data();
  std::vector<T> out(planes * out_h * out_w, T(0));
  std::vector<T> tmp(out_h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    std::fill(tmp.begin(), tmp.end(), T(0));
    detail::gemm_nn(wh.data(), xv.data() + p * h * w, tmp.data(), out_h, h, w);
    detail::gemm_nt(tmp.data(), ww.data(), out.data() + p * out_h * out_w, out_h, w, out_w);
  }
  Shape out_shape{x.shape()[0], x.shape()[1], out_h, out_w};
  return Tensor<T>::from_op("area_pool", std::move(out_shape), std::move(out), {x},
                            [xn = x.node(), wh = std::move(wh), ww = std::move(ww), planes, h, w, out_h,
                             out_w](detail::Node<T>& self) {
                              std::vector<T> tmp(h * out_w);
                              for (std::size_t p = 0; p < planes; ++p) {
                                std::fill(tmp.begin(), tmp.end(), T(0));
                                detail::gemm_tn(wh.data(), self.grad.data() + p * out_h * out_w, tmp.data(), out_h,
                                                h, out_w);
                                detail::gemm_nn(tmp.data(), ww.data(), xn->grad.data() + p * h * w, h, out_w, w);
                              }
                            });
}

// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

/// Converts between precisions; the result carries no history.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), std::vector<To>(t.data().begin(), t.data().end()));
}

}  // namespace hieratok
