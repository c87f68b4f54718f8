// Copyright (c) 2026 CAR contributors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op catalog on the reverse-mode tape. Every op computes its
// forward value eagerly, rejects non-finite outputs, and records a backward
// closure when any input participates in the active tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "car/parallel.hpp"
#include "car/tensor.hpp"

namespace car {

// ---------------------------------------------------------------------------
// raw matmul kernels; all gradients funnel through these three
// ---------------------------------------------------------------------------

namespace kern {

constexpr long kParallelFlops = 8'000'000;

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
  auto body = [&](long i0, long i1) {
    for (long i = i0; i < i1; ++i) {
      const T* a = A + i * k;
      T* c = C + i * n;
      for (int p = 0; p < k; ++p) {
        const T ap = a[p];
        const T* b = B + long(p) * n;
        for (int j = 0; j < n; ++j) c[j] += ap * b[j];
      }
    }
  };
  if (2L * m * k * n >= kParallelFlops)
    parallel_for(m, body);
  else
    body(0, m);
}

// C[m,k] += G[m,n] * B^T   (B is [k,n])
template <typename T>
void mm_nt(const T* G, const T* B, T* C, int m, int n, int k) {
  auto body = [&](long i0, long i1) {
    for (long i = i0; i < i1; ++i) {
      const T* g = G + i * n;
      T* c = C + i * k;
      for (int p = 0; p < k; ++p) {
        const T* b = B + long(p) * n;
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += g[j] * b[j];
        c[p] += acc;
      }
    }
  };
  if (2L * m * k * n >= kParallelFlops)
    parallel_for(m, body);
  else
    body(0, m);
}

// C[k,n] += A^T * G   (A is [m,k], G is [m,n])
template <typename T>
void mm_tn(const T* A, const T* G, T* C, int m, int k, int n) {
  auto body = [&](long p0, long p1) {
    for (int i = 0; i < m; ++i) {
      const T* a = A + long(i) * k;
      const T* g = G + long(i) * n;
      for (long p = p0; p < p1; ++p) {
        const T ap = a[p];
        T* c = C + p * n;
        for (int j = 0; j < n; ++j) c[j] += ap * g[j];
      }
    }
  };
  if (2L * m * k * n >= kParallelFlops)
    parallel_for(k, body);
  else
    body(0, k);
}

}  // namespace kern

namespace detail {

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
inline void axpy(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (long i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  check_finite(out, "add");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb](GradTape<T>& t, const std::vector<T>& g) {
        if (pa >= 0) detail::axpy(t.grad_buf(pa), g);
        if (pb >= 0) detail::axpy(t.grad_buf(pb), g);
      });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (long i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  check_finite(out, "sub");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb](GradTape<T>& t, const std::vector<T>& g) {
        if (pa >= 0) detail::axpy(t.grad_buf(pa), g);
        if (pb >= 0) {
          auto& gb = t.grad_buf(pb);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (long i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  check_finite(out, "mul");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb, a, b](GradTape<T>& t, const std::vector<T>& g) {
        if (pa >= 0) {
          auto& ga = t.grad_buf(pa);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[long(i)];
        }
        if (pb >= 0) {
          auto& gb = t.grad_buf(pb);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[long(i)];
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (long i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  check_finite(out, "scale");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a);
    if (pa >= 0)
      tp->emit(out, [pa, s](GradTape<T>& t, const std::vector<T>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
      });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (long i = 0; i < a.size(); ++i) out[i] = a[i] + s;
  check_finite(out, "add_scalar");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a);
    if (pa >= 0)
      tp->emit(out, [pa](GradTape<T>& t, const std::vector<T>& g) {
        detail::axpy(t.grad_buf(pa), g);
      });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (long i = 0; i < x.size(); ++i)
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  check_finite(out, "gelu");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, x, inv_sqrt2](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        const T inv_sqrt2pi = T(0.3989422804014326779);
        for (size_t i = 0; i < gx.size(); ++i) {
          T v = x[long(i)];
          T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
          gx[i] += g[i] * (cdf + v * pdf);
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (long i = 0; i < x.size(); ++i) {
    T v = x[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  check_finite(out, "sigmoid");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, out](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (size_t i = 0; i < gx.size(); ++i) {
          T y = out[long(i)];
          gx[i] += g[i] * y * (T(1) - y);
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> sqrt_elem(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (long i = 0; i < x.size(); ++i) {
    if (x[i] < T(0)) throw NumericError("sqrt_elem: negative input");
    out[i] = std::sqrt(x[i]);
  }
  check_finite(out, "sqrt_elem");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, out](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (size_t i = 0; i < gx.size(); ++i)
          gx[i] += g[i] * T(0.5) / out[long(i)];
      });
  }
  return out;
}

template <typename T>
Tensor<T> recip_elem(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (long i = 0; i < x.size(); ++i) out[i] = T(1) / x[i];
  check_finite(out, "recip_elem");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, out](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (size_t i = 0; i < gx.size(); ++i) {
          T y = out[long(i)];
          gx[i] -= g[i] * y * y;
        }
      });
  }
  return out;
}

/// Values pass through; gradient stops here.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detached();
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (long i = 0; i < x.size(); ++i) acc += x[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  check_finite(out, "sum");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (auto& v : gx) v += g[0];
      });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

/// Row means of a [n, m] matrix -> [n].
template <typename T>
Tensor<T> row_mean(const Tensor<T>& x) {
  if (x.ndim() != 2) throw DimensionError("row_mean: expected 2-d, got " + shape_str(x.shape()));
  int n = x.dim(0), m = x.dim(1);
  Tensor<T> out(Shape{n});
  for (int i = 0; i < n; ++i) {
    T acc = T(0);
    for (int j = 0; j < m; ++j) acc += x[long(i) * m + j];
    out[i] = acc / T(m);
  }
  check_finite(out, "row_mean");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, n, m](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int i = 0; i < n; ++i) {
          T gi = g[size_t(i)] / T(m);
          for (int j = 0; j < m; ++j) gx[size_t(i) * m + j] += gi;
        }
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// row/column broadcasts over [n, m]
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline void require_rowvec(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw DimensionError(std::string(op) + ": want [n,m] and [m], got " +
                         shape_str(x.shape()) + " and " + shape_str(v.shape()));
}
template <typename T>
inline void require_colvec(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.dim(0))
    throw DimensionError(std::string(op) + ": want [n,m] and [n], got " +
                         shape_str(x.shape()) + " and " + shape_str(v.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_rowvec(x, v, "add_rowvec");
  int n = x.dim(0), m = x.dim(1);
  Tensor<T> out(x.shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[long(i) * m + j] = x[long(i) * m + j] + v[j];
  check_finite(out, "add_rowvec");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pv = tp->use(v);
    if (px >= 0 || pv >= 0)
      tp->emit(out, [px, pv, n, m](GradTape<T>& t, const std::vector<T>& g) {
        if (px >= 0) detail::axpy(t.grad_buf(px), g);
        if (pv >= 0) {
          auto& gv = t.grad_buf(pv);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) gv[size_t(j)] += g[size_t(i) * m + j];
        }
      });
  }
  return out;
}

namespace detail {
// shared implementation for {add,sub,mul}_colvec
template <typename T, int Kind>  // 0 add, 1 sub, 2 mul
Tensor<T> colvec_op(const Tensor<T>& x, const Tensor<T>& v, const char* name) {
  require_colvec(x, v, name);
  int n = x.dim(0), m = x.dim(1);
  Tensor<T> out(x.shape());
  for (int i = 0; i < n; ++i) {
    T vi = v[i];
    for (int j = 0; j < m; ++j) {
      T xv = x[long(i) * m + j];
      out[long(i) * m + j] = Kind == 0 ? xv + vi : Kind == 1 ? xv - vi : xv * vi;
    }
  }
  check_finite(out, name);
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pv = tp->use(v);
    if (px >= 0 || pv >= 0)
      tp->emit(out, [px, pv, n, m, x, v](GradTape<T>& t, const std::vector<T>& g) {
        if (px >= 0) {
          auto& gx = t.grad_buf(px);
          for (int i = 0; i < n; ++i) {
            T vi = v[i];
            for (int j = 0; j < m; ++j) {
              T gij = g[size_t(i) * m + j];
              gx[size_t(i) * m + j] += Kind == 2 ? gij * vi : gij;
            }
          }
        }
        if (pv >= 0) {
          auto& gv = t.grad_buf(pv);
          for (int i = 0; i < n; ++i) {
            T acc = T(0);
            for (int j = 0; j < m; ++j) {
              T gij = g[size_t(i) * m + j];
              acc += Kind == 2 ? gij * x[long(i) * m + j] : gij;
            }
            gv[size_t(i)] += Kind == 1 ? -acc : acc;
          }
        }
      });
  }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> add_colvec(const Tensor<T>& x, const Tensor<T>& v) {
  return detail::colvec_op<T, 0>(x, v, "add_colvec");
}
template <typename T>
Tensor<T> sub_colvec(const Tensor<T>& x, const Tensor<T>& v) {
  return detail::colvec_op<T, 1>(x, v, "sub_colvec");
}
template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& v) {
  return detail::colvec_op<T, 2>(x, v, "mul_colvec");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  kern::mm_nn(a.data(), b.data(), out.data(), m, k, n);
  check_finite(out, "matmul");
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb, a, b, m, k, n](GradTape<T>& t, const std::vector<T>& g) {
        if (pa >= 0) kern::mm_nt(g.data(), b.data(), t.grad_buf(pa).data(), m, n, k);
        if (pb >= 0) kern::mm_tn(a.data(), g.data(), t.grad_buf(pb).data(), m, k, n);
      });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError("transpose2d: expected 2-d, got " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  Tensor<T> out(Shape{n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[long(j) * m + i] = a[long(i) * n + j];
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a);
    if (pa >= 0)
      tp->emit(out, [pa, m, n](GradTape<T>& t, const std::vector<T>& g) {
        auto& ga = t.grad_buf(pa);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) ga[size_t(i) * n + j] += g[size_t(j) * m + i];
      });
  }
  return out;
}

/// x[n,d] * W[d,m] + b[m]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.vec());
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px](GradTape<T>& t, const std::vector<T>& g) {
        detail::axpy(t.grad_buf(px), g);
      });
  }
  return out;
}

/// Concatenates along axis 0 (for [c,h,w] inputs this is the channel axis).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 1)
    throw DimensionError("concat_channels: rank mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  for (int i = 1; i < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i))
      throw DimensionError("concat_channels: trailing extents differ " +
                           shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor<T> out(s);
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb, na = a.size()](GradTape<T>& t, const std::vector<T>& g) {
        if (pa >= 0) {
          auto& ga = t.grad_buf(pa);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
          auto& gb = t.grad_buf(pb);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[size_t(na) + i];
        }
      });
  }
  return out;
}

/// Concatenates [n,da] and [n,db] along the feature axis -> [n, da+db].
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: want matching row counts, got " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor<T> out(Shape{n, da + db});
  for (int i = 0; i < n; ++i) {
    std::copy(a.data() + long(i) * da, a.data() + long(i + 1) * da,
              out.data() + long(i) * (da + db));
    std::copy(b.data() + long(i) * db, b.data() + long(i + 1) * db,
              out.data() + long(i) * (da + db) + da);
  }
  if (auto* tp = GradTape<T>::active()) {
    int pa = tp->use(a), pb = tp->use(b);
    if (pa >= 0 || pb >= 0)
      tp->emit(out, [pa, pb, n, da, db](GradTape<T>& t, const std::vector<T>& g) {
        for (int i = 0; i < n; ++i) {
          if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (int j = 0; j < da; ++j)
              ga[size_t(i) * da + j] += g[size_t(i) * (da + db) + j];
          }
          if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (int j = 0; j < db; ++j)
              gb[size_t(i) * db + j] += g[size_t(i) * (da + db) + da + j];
          }
        }
      });
  }
  return out;
}

/// Stacks k matrices with equal column counts along axis 0 in one node.
template <typename T>
Tensor<T> concat_rows_many(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows_many: no inputs");
  int d = parts[0].dim(1);
  long rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != d)
      throw DimensionError("concat_rows_many: column mismatch at " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  Tensor<T> out(Shape{int(rows), d});
  long off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + off);
    off += p.size();
  }
  if (auto* tp = GradTape<T>::active()) {
    std::vector<int> ids(parts.size());
    std::vector<long> offs(parts.size()), lens(parts.size());
    bool any = false;
    long o = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      ids[i] = tp->use(parts[i]);
      offs[i] = o;
      lens[i] = parts[i].size();
      o += lens[i];
      any = any || ids[i] >= 0;
    }
    if (any)
      tp->emit(out, [ids, offs, lens](GradTape<T>& t, const std::vector<T>& g) {
        for (size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] < 0) continue;
          auto& gp = t.grad_buf(ids[i]);
          for (long j = 0; j < lens[i]; ++j) gp[size_t(j)] += g[size_t(offs[i] + j)];
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
  if (x.ndim() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(x.shape()));
  int d = x.dim(1);
  Tensor<T> out(Shape{r1 - r0, d});
  std::copy(x.data() + long(r0) * d, x.data() + long(r1) * d, out.data());
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, r0, d](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (size_t i = 0; i < g.size(); ++i) gx[size_t(r0) * d + i] += g[i];
      });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(x.shape()));
  int n = x.dim(0), d = x.dim(1), w = c1 - c0;
  Tensor<T> out(Shape{n, w});
  for (int i = 0; i < n; ++i)
    std::copy(x.data() + long(i) * d + c0, x.data() + long(i) * d + c1,
              out.data() + long(i) * w);
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, n, d, c0, w](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < w; ++j)
            gx[size_t(i) * d + c0 + j] += g[size_t(i) * w + j];
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

/// Gathers rows of table[V,d] at idx -> [n,d]; gradients accumulate into the
/// source rows (duplicate indices sum).
template <typename T>
Tensor<T> embed_lookup(const Tensor<T>& table, const std::vector<int>& idx) {
  if (table.ndim() != 2) throw DimensionError("embed_lookup: table must be 2-d");
  int V = table.dim(0), d = table.dim(1);
  int n = int(idx.size());
  Tensor<T> out(Shape{n, d});
  for (int i = 0; i < n; ++i) {
    if (idx[size_t(i)] < 0 || idx[size_t(i)] >= V)
      throw IndexError("embed_lookup: index " + std::to_string(idx[size_t(i)]) +
                       " out of range [0," + std::to_string(V) + ")");
    std::copy(table.data() + long(idx[size_t(i)]) * d,
              table.data() + long(idx[size_t(i)] + 1) * d, out.data() + long(i) * d);
  }
  if (auto* tp = GradTape<T>::active()) {
    int pt = tp->use(table);
    if (pt >= 0)
      tp->emit(out, [pt, idx, d](GradTape<T>& t, const std::vector<T>& g) {
        auto& gt = t.grad_buf(pt);
        for (size_t i = 0; i < idx.size(); ++i)
          for (int j = 0; j < d; ++j)
            gt[size_t(idx[i]) * d + j] += g[i * size_t(d) + size_t(j)];
      });
  }
  return out;
}

/// out = x; out[offsets[b], :] += rows[b, :]. Duplicate offsets accumulate.
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, const std::vector<int>& offsets,
                           const Tensor<T>& rows) {
  if (x.ndim() != 2 || rows.ndim() != 2 || rows.dim(1) != x.dim(1) ||
      rows.dim(0) != int(offsets.size()))
    throw DimensionError("scatter_add_rows: want x[n,d], rows[B,d], |offsets|=B; got " +
                         shape_str(x.shape()) + ", " + shape_str(rows.shape()));
  int d = x.dim(1);
  for (int o : offsets)
    if (o < 0 || o >= x.dim(0)) throw IndexError("scatter_add_rows: offset out of range");
  Tensor<T> out = x.clone();
  for (size_t b = 0; b < offsets.size(); ++b)
    for (int j = 0; j < d; ++j)
      out[long(offsets[b]) * d + j] += rows[long(b) * d + j];
  check_finite(out, "scatter_add_rows");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pr = tp->use(rows);
    if (px >= 0 || pr >= 0)
      tp->emit(out, [px, pr, offsets, d](GradTape<T>& t, const std::vector<T>& g) {
        if (px >= 0) detail::axpy(t.grad_buf(px), g);
        if (pr >= 0) {
          auto& gr = t.grad_buf(pr);
          for (size_t b = 0; b < offsets.size(); ++b)
            for (int j = 0; j < d; ++j)
              gr[b * size_t(d) + size_t(j)] += g[size_t(offsets[b]) * d + size_t(j)];
        }
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial ops on [c,h,w]
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline void require_chw(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 3)
    throw DimensionError(std::string(op) + ": expected [c,h,w], got " + shape_str(x.shape()));
}

// align-corners source coordinate and lerp weights
struct Lerp {
  int lo, hi;
  double t;
};
inline Lerp lerp_coord(int i, int out_n, int in_n) {
  if (out_n == 1 || in_n == 1) return {0, 0, 0.0};
  double f = double(i) * double(in_n - 1) / double(out_n - 1);
  int lo = int(f);
  if (lo > in_n - 2) lo = in_n - 2;
  return {lo, lo + 1, f - lo};
}
}  // namespace detail

/// Align-corners bilinear resample. Same-shape calls return a bitwise copy.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int h2, int w2) {
  detail::require_chw(x, "bilinear_resize");
  if (h2 < 1 || w2 < 1) throw DimensionError("bilinear_resize: target extents must be >= 1");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h2 == h && w2 == w) {
    Tensor<T> out = x.clone();
    if (auto* tp = GradTape<T>::active()) {
      int px = tp->use(x);
      if (px >= 0)
        tp->emit(out, [px](GradTape<T>& t, const std::vector<T>& g) {
          detail::axpy(t.grad_buf(px), g);
        });
    }
    return out;
  }
  Tensor<T> out(Shape{c, h2, w2});
  for (int i = 0; i < h2; ++i) {
    auto ly = detail::lerp_coord(i, h2, h);
    for (int j = 0; j < w2; ++j) {
      auto lx = detail::lerp_coord(j, w2, w);
      T w00 = T((1 - ly.t) * (1 - lx.t)), w01 = T((1 - ly.t) * lx.t);
      T w10 = T(ly.t * (1 - lx.t)), w11 = T(ly.t * lx.t);
      for (int ch = 0; ch < c; ++ch) {
        const T* p = x.data() + (long(ch) * h) * w;
        out[(long(ch) * h2 + i) * w2 + j] =
            w00 * p[long(ly.lo) * w + lx.lo] + w01 * p[long(ly.lo) * w + lx.hi] +
            w10 * p[long(ly.hi) * w + lx.lo] + w11 * p[long(ly.hi) * w + lx.hi];
      }
    }
  }
  check_finite(out, "bilinear_resize");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, c, h, w, h2, w2](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int i = 0; i < h2; ++i) {
          auto ly = detail::lerp_coord(i, h2, h);
          for (int j = 0; j < w2; ++j) {
            auto lx = detail::lerp_coord(j, w2, w);
            T w00 = T((1 - ly.t) * (1 - lx.t)), w01 = T((1 - ly.t) * lx.t);
            T w10 = T(ly.t * (1 - lx.t)), w11 = T(ly.t * lx.t);
            for (int ch = 0; ch < c; ++ch) {
              T gv = g[(size_t(ch) * h2 + size_t(i)) * w2 + size_t(j)];
              T* q = gx.data() + (long(ch) * h) * w;
              q[long(ly.lo) * w + lx.lo] += w00 * gv;
              q[long(ly.lo) * w + lx.hi] += w01 * gv;
              q[long(ly.hi) * w + lx.lo] += w10 * gv;
              q[long(ly.hi) * w + lx.hi] += w11 * gv;
            }
          }
        }
      });
  }
  return out;
}

/// Box-average pooling to (h2, w2); output pixel (i,j) averages input rows
/// [i*h/h2, (i+1)*h/h2) x cols [j*w/w2, (j+1)*w/w2).
template <typename T>
Tensor<T> area_downsample(const Tensor<T>& x, int h2, int w2) {
  detail::require_chw(x, "area_downsample");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h2 < 1 || h2 > h || w2 < 1 || w2 > w)
    throw DimensionError("area_downsample: target must not exceed source");
  Tensor<T> out(Shape{c, h2, w2});
  for (int i = 0; i < h2; ++i) {
    int r0 = i * h / h2, r1 = (i + 1) * h / h2;
    for (int j = 0; j < w2; ++j) {
      int c0 = j * w / w2, c1 = (j + 1) * w / w2;
      T inv = T(1) / T((r1 - r0) * (c1 - c0));
      for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        for (int y = r0; y < r1; ++y)
          for (int z = c0; z < c1; ++z) acc += x[(long(ch) * h + y) * w + z];
        out[(long(ch) * h2 + i) * w2 + j] = acc * inv;
      }
    }
  }
  check_finite(out, "area_downsample");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, c, h, w, h2, w2](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int i = 0; i < h2; ++i) {
          int r0 = i * h / h2, r1 = (i + 1) * h / h2;
          for (int j = 0; j < w2; ++j) {
            int c0 = j * w / w2, c1 = (j + 1) * w / w2;
            T inv = T(1) / T((r1 - r0) * (c1 - c0));
            for (int ch = 0; ch < c; ++ch) {
              T gv = g[(size_t(ch) * h2 + size_t(i)) * w2 + size_t(j)] * inv;
              for (int y = r0; y < r1; ++y)
                for (int z = c0; z < c1; ++z) gx[(size_t(ch) * h + size_t(y)) * w + size_t(z)] += gv;
            }
          }
        }
      });
  }
  return out;
}

/// Block-replicate upsample, the exact inverse mapping of area_downsample's
/// regions: out(y,z) = in(y*hc/h2, z*wc/w2).
template <typename T>
Tensor<T> replicate_upsample(const Tensor<T>& x, int h2, int w2) {
  detail::require_chw(x, "replicate_upsample");
  int c = x.dim(0), hc = x.dim(1), wc = x.dim(2);
  if (h2 < hc || w2 < wc) throw DimensionError("replicate_upsample: target must not shrink");
  Tensor<T> out(Shape{c, h2, w2});
  for (int y = 0; y < h2; ++y) {
    int sy = y * hc / h2;
    for (int z = 0; z < w2; ++z) {
      int sz = z * wc / w2;
      for (int ch = 0; ch < c; ++ch)
        out[(long(ch) * h2 + y) * w2 + z] = x[(long(ch) * hc + sy) * wc + sz];
    }
  }
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, c, hc, wc, h2, w2](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int y = 0; y < h2; ++y) {
          int sy = y * hc / h2;
          for (int z = 0; z < w2; ++z) {
            int sz = z * wc / w2;
            for (int ch = 0; ch < c; ++ch)
              gx[(size_t(ch) * hc + size_t(sy)) * wc + size_t(sz)] +=
                  g[(size_t(ch) * h2 + size_t(y)) * w2 + size_t(z)];
          }
        }
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation; no kernel flip)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* cols) {
  // cols layout: [cin*kh*kw, oh*ow]
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = cols + ((long(ci) * kh + ky) * kw + kx) * (long(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[long(oy) * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(long(ci) * h + iy) * w + ix]
                                                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int cin, int h, int w, int kh, int kw, int stride,
                int pad, int oh, int ow, T* x) {
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = cols + ((long(ci) * kh + ky) * kw + kx) * (long(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) x[(long(ci) * h + iy) * w + ix] += src[long(oy) * ow + ox];
          }
        }
      }
    }
  }
}
}  // namespace detail

/// 2-d cross-correlation of x[cin,h,w] with k[cout,cin,kh,kw]. pad < 0 selects
/// "same" padding (odd kernels only), which preserves h,w at stride 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride = 1, int pad = -1) {
  detail::require_chw(x, "conv2d");
  if (k.ndim() != 4) throw DimensionError("conv2d: kernel must be [cout,cin,kh,kw]");
  int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  int cout = k.dim(0), kcin = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (kcin != cin)
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(k.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (pad < 0) pad = kh / 2;  // same
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw DimensionError("conv2d: output would be empty");

  std::vector<T> cols(size_t(cin) * kh * kw * oh * ow);
  detail::im2col(x.data(), cin, h, w, kh, kw, stride, pad, oh, ow, cols.data());
  Tensor<T> out(Shape{cout, oh, ow});
  kern::mm_nn(k.data(), cols.data(), out.data(), cout, cin * kh * kw, oh * ow);
  check_finite(out, "conv2d");

  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pk = tp->use(k);
    if (px >= 0 || pk >= 0)
      // cols are rebuilt in backward instead of captured; x is cheap to keep
      tp->emit(out, [px, pk, x, k, cin, h, w, cout, kh, kw, stride, pad, oh,
                     ow](GradTape<T>& t, const std::vector<T>& g) {
        if (pk >= 0) {
          std::vector<T> cols2(size_t(cin) * kh * kw * oh * ow);
          detail::im2col(x.data(), cin, h, w, kh, kw, stride, pad, oh, ow, cols2.data());
          kern::mm_nt(g.data(), cols2.data(), t.grad_buf(pk).data(), cout, oh * ow,
                      cin * kh * kw);
        }
        if (px >= 0) {
          std::vector<T> dcols(size_t(cin) * kh * kw * oh * ow, T(0));
          kern::mm_tn(k.data(), g.data(), dcols.data(), cout, cin * kh * kw, oh * ow);
          detail::col2im_add(dcols.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                             t.grad_buf(px).data());
        }
      });
  }
  return out;
}

template <typename T>
Tensor<T> add_chan_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_chw(x, "add_chan_bias");
  if (b.ndim() != 1 || b.dim(0) != x.dim(0))
    throw DimensionError("add_chan_bias: want bias [c], got " + shape_str(b.shape()) +
                         " for " + shape_str(x.shape()));
  int c = x.dim(0);
  long hw = long(x.dim(1)) * x.dim(2);
  Tensor<T> out(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (long i = 0; i < hw; ++i) out[ch * hw + i] = x[ch * hw + i] + b[ch];
  check_finite(out, "add_chan_bias");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pb = tp->use(b);
    if (px >= 0 || pb >= 0)
      tp->emit(out, [px, pb, c, hw](GradTape<T>& t, const std::vector<T>& g) {
        if (px >= 0) detail::axpy(t.grad_buf(px), g);
        if (pb >= 0) {
          auto& gb = t.grad_buf(pb);
          for (int ch = 0; ch < c; ++ch) {
            T acc = T(0);
            for (long i = 0; i < hw; ++i) acc += g[size_t(ch * hw + i)];
            gb[size_t(ch)] += acc;
          }
        }
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax / loss
// ---------------------------------------------------------------------------

/// LayerNorm over the last axis with affine gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.ndim() < 1) throw DimensionError("layer_norm: scalar input");
  int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must be [d] with d=" + std::to_string(d));
  if (!(eps > T(0))) throw NumericError("layer_norm: eps must be positive");
  long rows = x.size() / d;
  Tensor<T> out(x.shape());
  std::vector<T> inv_sigma(size_t(rows)), xhat(size_t(x.size()));
  for (long r = 0; r < rows; ++r) {
    const T* p = x.data() + r * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += p[j];
    mu /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[size_t(r)] = is;
    for (int j = 0; j < d; ++j) {
      T xh = (p[j] - mu) * is;
      xhat[size_t(r * d + j)] = xh;
      out[r * d + j] = gain[j] * xh + bias[j];
    }
  }
  check_finite(out, "layer_norm");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x), pg = tp->use(gain), pb = tp->use(bias);
    if (px >= 0 || pg >= 0 || pb >= 0)
      tp->emit(out, [px, pg, pb, gain, rows, d, inv_sigma = std::move(inv_sigma),
                     xhat = std::move(xhat)](GradTape<T>& t, const std::vector<T>& g) {
        for (long r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (pg >= 0) {
            auto& gg = t.grad_buf(pg);
            for (int j = 0; j < d; ++j) gg[size_t(j)] += gr[j] * xh[j];
          }
          if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (int j = 0; j < d; ++j) gb[size_t(j)] += gr[j];
          }
          if (px >= 0) {
            auto& gx = t.grad_buf(px);
            T sum_gy = T(0), sum_gy_xh = T(0);
            for (int j = 0; j < d; ++j) {
              T gy = gr[j] * gain[j];
              sum_gy += gy;
              sum_gy_xh += gy * xh[j];
            }
            T inv_d = T(1) / T(d);
            for (int j = 0; j < d; ++j) {
              T gy = gr[j] * gain[j];
              gx[size_t(r * d + j)] +=
                  inv_sigma[size_t(r)] * (gy - inv_d * sum_gy - xh[j] * inv_d * sum_gy_xh);
            }
          }
        }
      });
  }
  return out;
}

/// Row-wise softmax over allowed entries only; disallowed entries get
/// probability 0. allow is a row-major byte mask with the given stride.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, const std::vector<uint8_t>& allow,
                              int allow_stride) {
  if (x.ndim() != 2) throw DimensionError("masked_softmax_rows: expected 2-d");
  int n = x.dim(0), m = x.dim(1);
  if (allow_stride < m || long(allow.size()) < long(n - 1) * allow_stride + m)
    throw DimensionError("masked_softmax_rows: mask too small");
  Tensor<T> out(x.shape());
  for (int i = 0; i < n; ++i) {
    const uint8_t* am = allow.data() + long(i) * allow_stride;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < m; ++j)
      if (am[j]) mx = std::max(mx, x[long(i) * m + j]);
    if (!std::isfinite(mx))
      throw NumericError("masked_softmax_rows: row " + std::to_string(i) + " allows nothing");
    T z = T(0);
    for (int j = 0; j < m; ++j) {
      T e = am[j] ? std::exp(x[long(i) * m + j] - mx) : T(0);
      out[long(i) * m + j] = e;
      z += e;
    }
    T inv = T(1) / z;
    for (int j = 0; j < m; ++j) out[long(i) * m + j] *= inv;
  }
  check_finite(out, "masked_softmax_rows");
  if (auto* tp = GradTape<T>::active()) {
    int px = tp->use(x);
    if (px >= 0)
      tp->emit(out, [px, out, n, m](GradTape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(px);
        for (int i = 0; i < n; ++i) {
          T dot = T(0);
          for (int j = 0; j < m; ++j)
            dot += g[size_t(i) * m + j] * out[long(i) * m + j];
          for (int j = 0; j < m; ++j) {
            T p = out[long(i) * m + j];
            gx[size_t(i) * m + j] += p * (g[size_t(i) * m + j] - dot);
          }
        }
      });
  }
  return out;
}

/// Mean negative log-likelihood in nats over rows of logits[n,V].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2) throw DimensionError("softmax_cross_entropy: expected [n,V]");
  int n = logits.dim(0), V = logits.dim(1);
  if (int(targets.size()) != n)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  T acc = T(0);
  for (int i = 0; i < n; ++i) {
    int tgt = targets[size_t(i)];
    if (tgt < 0 || tgt >= V)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(tgt) +
                       " out of range [0," + std::to_string(V) + ")");
    const T* row = logits.data() + long(i) * V;
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    acc += (mx + std::log(z)) - row[tgt];
  }
  Tensor<T> out = Tensor<T>::scalar(acc / T(n));
  check_finite(out, "softmax_cross_entropy");
  if (auto* tp = GradTape<T>::active()) {
    int pl = tp->use(logits);
    if (pl >= 0)
      tp->emit(out, [pl, logits, targets, n, V](GradTape<T>& t, const std::vector<T>& g) {
        auto& gl = t.grad_buf(pl);
        T go = g[0] / T(n);
        for (int i = 0; i < n; ++i) {
          const T* row = logits.data() + long(i) * V;
          T mx = row[0];
          for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
          T z = T(0);
          for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
          T inv = T(1) / z;
          for (int j = 0; j < V; ++j) {
            T p = std::exp(row[j] - mx) * inv;
            gl[size_t(i) * V + j] += go * (p - (j == targets[size_t(i)] ? T(1) : T(0)));
          }
        }
      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// non-differentiable helpers
// ---------------------------------------------------------------------------

template <typename T>
int argmax_row(const T* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

/// Mean squared error as a plain number (no tape).
template <typename T>
double mse_value(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse_value");
  double acc = 0;
  for (long i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc / double(a.size());
}

inline double psnr_from_mse(double mse) {
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace car
