#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "moe_snnl/tape.hpp"
#include "moe_snnl/tensor.hpp"

namespace moe_snnl::ops {

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major.
inline void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      if (av == 0.0) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m x n] (+)= A[m x k] * B[n x k]^T.
inline void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

/// C[k x n] (+)= A[m x k]^T * B[m x n].
inline void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      if (av == 0.0) continue;
      Real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
  Shape reduced;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1, {}};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) s.reduced.push_back(shape[i]);
  return s;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = *a.tape();
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm_nn(a.value().values().data(), b.value().values().data(), out.values().data(), m, k, n);
  return tape.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(a)) detail::gemm_nt(g.data(), b.value().values().data(), t.grad_buffer(a).data(), m, n, k);
    if (t.needs_grad(b)) detail::gemm_tn(a.value().values().data(), g.data(), t.grad_buffer(b).data(), m, k, n);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor(a.shape(), a.value().values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape()->record("add", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    for (const Var& v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      auto& dst = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor(a.shape(), a.value().values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape()->record("sub", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(a)) {
      auto& dst = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto& dst = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor(a.shape(), a.value().values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(a)) {
      auto& dst = t.grad_buffer(a);
      const auto& bv = b.value().values();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& dst = t.grad_buffer(b);
      const auto& av = a.value().values();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * av[i];
    }
  });
}

inline Var neg(const Var& a) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) v = -v;
  return a.tape()->record("neg", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
  });
}

inline Var exp(const Var& a) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape()->record("exp", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    const auto& x = a.value().values();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * std::exp(x[i]);
  });
}

inline Var log(const Var& a) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return a.tape()->record("log", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    const auto& x = a.value().values();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] / x[i];
  });
}

/// max(x, 0) with the mask taken from the input; derivative at exactly 0 is 0.
inline Var relu(const Var& a) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.tape()->record("relu", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    const auto& x = a.value().values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) dst[i] += g[i];
  });
}

inline Var scale(const Var& a, Real factor) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) v *= factor;
  return a.tape()->record("scale", std::move(out), {a}, [a, factor](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
  });
}

inline Var add_scalar(const Var& a, Real c) {
  Tensor out = Tensor(a.shape(), a.value().values());
  for (auto& v : out.values()) v += c;
  return a.tape()->record("add_scalar", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape()->record("reshape", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

/// Sum over one axis; the axis is removed from the result shape.
inline Var sum(const Var& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  Tensor out(s.reduced);
  const auto& x = a.value().values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
  return a.tape()->record("sum", std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) dst[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i];
  });
}

inline Var mean(const Var& a, std::size_t axis) {
  const std::size_t extent = detail::split_axis(a.shape(), axis).extent;
  return scale(sum(a, axis), 1.0 / static_cast<Real>(extent));
}

/// Max over one axis; the gradient goes to the first maximal entry.
inline Var max(const Var& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  Tensor out(s.reduced);
  std::vector<std::size_t> winner(out.size());
  const auto& x = a.value().values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * s.inner + i] = x[best];
      winner[o * s.inner + i] = best;
    }
  return a.tape()->record("max", std::move(out), {a}, [a, winner](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& dst = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[winner[i]] += g[i];
  });
}

/// Sum of every element, producing a scalar.
inline Var sum_all(const Var& a) {
  Real total = 0.0;
  for (Real v : a.value().values()) total += v;
  return a.tape()->record("sum_all", Tensor::scalar(total), {a}, [a](Tape& t, std::size_t self) {
    const Real g = t.grad_buffer(self)[0];
    auto& dst = t.grad_buffer(a);
    for (auto& d : dst) d += g;
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<Real>(a.size())); }

/// Index of the maximum along an axis; ties resolve to the lowest index.
inline std::vector<std::size_t> argmax(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<std::size_t> out(s.outer * s.inner, 0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t e = 1; e < s.extent; ++e)
        if (a[(o * s.extent + e) * s.inner + i] > a[(o * s.extent + best) * s.inner + i]) best = e;
      out[o * s.inner + i] = best;
    }
  return out;
}

/// Row argmax of a rank-2 tensor.
inline std::vector<std::size_t> argmax_rows(const Tensor& a) { return argmax(a, 1); }

}  // namespace moe_snnl::ops
