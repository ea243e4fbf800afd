// SPDX-License-Identifier: Apache-2.0

#include "jvit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace jvit::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

}  // namespace

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#if defined(_OPENMP)
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

namespace {

// C rows [i0, i0 + R) += A rows * B for one batch entry. a_at(r, p) reads
// A[i0 + r][p]. Each output element still accumulates p in ascending order,
// so the tiling does not change results; it only keeps a 4 x 32 block of C
// in registers while streaming B.
template <typename T, std::size_t R, typename AAt>
inline void gemm_rows(std::size_t n, std::size_t k, AAt a_at, const T* bmat, T* cblk) {
  constexpr std::size_t kCols = 32;
  std::size_t j0 = 0;
  for (; j0 + kCols <= n; j0 += kCols) {
    T acc[R][kCols];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = cblk[r * n + j0 + j];
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = bmat + p * n + j0;
      for (std::size_t r = 0; r < R; ++r) {
        const T av = a_at(r, p);
#pragma omp simd
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * brow[j];
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < kCols; ++j) cblk[r * n + j0 + j] = acc[r][j];
  }
  if (j0 == n) return;
  for (std::size_t r = 0; r < R; ++r) {
    T* crow = cblk + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_at(r, p);
      const T* brow = bmat + p * n;
#pragma omp simd
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

constexpr std::size_t kRowBlock = 4;

// Shared driver of gemm_nn / gemm_tn: parallel over blocks of output rows.
template <typename T, typename AAt>
void gemm_blocked(const GemmShape& s, const T* b, T* c, AAt a_at) {
  const std::size_t blocks_per_batch = (s.m + kRowBlock - 1) / kRowBlock;
  const auto blocks = static_cast<std::ptrdiff_t>(s.batch * blocks_per_batch);
  const bool par = s.batch * s.m * s.n * s.k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t bi = static_cast<std::size_t>(blk) / blocks_per_batch;
    const std::size_t i0 = (static_cast<std::size_t>(blk) % blocks_per_batch) * kRowBlock;
    const T* bmat = b + bi * s.stride_b;
    T* cblk = c + bi * s.stride_c + i0 * s.n;
    auto at = [&](std::size_t r, std::size_t p) { return a_at(bi, i0 + r, p); };
    if (i0 + kRowBlock <= s.m) {
      gemm_rows<T, kRowBlock>(s.n, s.k, at, bmat, cblk);
    } else {
      for (std::size_t r = 0; i0 + r < s.m; ++r) {
        auto one = [&](std::size_t, std::size_t p) { return a_at(bi, i0 + r, p); };
        gemm_rows<T, 1>(s.n, s.k, one, bmat, cblk + r * s.n);
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(const GemmShape& s, const T* a, const T* b, T* c) {
  gemm_blocked<T>(s, b, c, [&](std::size_t bi, std::size_t i, std::size_t p) {
    return a[bi * s.stride_a + i * s.k + p];
  });
}

template <typename T>
void gemm_nt(const GemmShape& s, const T* a, const T* b, T* c) {
  // B^T is materialized once so the row-streaming micro-kernel applies.
  const std::size_t mats = s.stride_b ? s.batch : 1;
  std::vector<T> bt(mats * s.k * s.n);
  for (std::size_t q = 0; q < mats; ++q) {
    const T* src = b + q * s.stride_b;
    T* dst = bt.data() + q * s.k * s.n;
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t p = 0; p < s.k; ++p) dst[p * s.n + j] = src[j * s.k + p];
  }
  GemmShape t = s;
  t.stride_b = s.stride_b ? s.k * s.n : 0;
  gemm_blocked<T>(t, bt.data(), c, [&](std::size_t bi, std::size_t i, std::size_t p) {
    return a[bi * s.stride_a + i * s.k + p];
  });
}

template <typename T>
void gemm_tn(const GemmShape& s, const T* a, const T* b, T* c) {
  gemm_blocked<T>(s, b, c, [&](std::size_t bi, std::size_t i, std::size_t p) {
    return a[bi * s.stride_a + p * s.m + i];
  });
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y) {
  const bool par = rows * n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const T* xr = x + r * n;
    T* yr = y + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
}

template <typename T>
void softmax_rows_backward(std::size_t rows, std::size_t n, const T* y,
                           const T* dy, T* dx) {
  const bool par = rows * n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const T* yr = y + r * n;
    const T* dyr = dy + r * n;
    T* dxr = dx + r * n;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * dyr[j];
    for (std::size_t j = 0; j < n; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

template <typename T>
void layernorm_rows(std::size_t rows, std::size_t n, const T* x, T eps,
                    T* xhat, T* rstd) {
  const bool par = rows * n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const T* xr = x + r * n;
    T* hr = xhat + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < n; ++j) hr[j] = (xr[j] - mean) * rs;
  }
}

template <typename T>
void layernorm_rows_backward(std::size_t rows, std::size_t n, const T* xhat,
                             const T* rstd, const T* dxhat, T* dx) {
  const bool par = rows * n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const T* hr = xhat + r * n;
    const T* gr = dxhat + r * n;
    T* dr = dx + r * n;
    T mean_g = 0;
    T mean_gh = 0;
    for (std::size_t j = 0; j < n; ++j) {
      mean_g += gr[j];
      mean_gh += gr[j] * hr[j];
    }
    mean_g /= static_cast<T>(n);
    mean_gh /= static_cast<T>(n);
    for (std::size_t j = 0; j < n; ++j)
      dr[j] += rstd[r] * (gr[j] - mean_g - hr[j] * mean_gh);
  }
}

// 1 - 2 / (exp(2u) + 1); saturates cleanly for large |u|.
template <typename T>
inline T fast_tanh(T u) {
  const T c = std::min(std::max(u, T(-20)), T(20));
  return T(1) - T(2) / (std::exp(T(2) * c) + T(1));
}

template <typename T>
void gelu(std::size_t n, const T* x, T* y) {
  const bool par = n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const T v = x[i];
    const T t = fast_tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    y[i] = T(0.5) * v * (T(1) + t);
  }
}

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  const bool par = n >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const T v = x[i];
    const T t = fast_tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
    const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
    dx[i] += dy[i] * d;
  }
}

namespace reference {

template <typename T>
void gemm_nn(const GemmShape& s, const T* a, const T* b, T* c) {
  for (std::size_t bi = 0; bi < s.batch; ++bi)
    for (std::size_t i = 0; i < s.m; ++i)
      for (std::size_t j = 0; j < s.n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < s.k; ++p)
          acc += a[bi * s.stride_a + i * s.k + p] *
                 b[bi * s.stride_b + p * s.n + j];
        c[bi * s.stride_c + i * s.n + j] += acc;
      }
}

template <typename T>
void gemm_nt(const GemmShape& s, const T* a, const T* b, T* c) {
  for (std::size_t bi = 0; bi < s.batch; ++bi)
    for (std::size_t i = 0; i < s.m; ++i)
      for (std::size_t j = 0; j < s.n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < s.k; ++p)
          acc += a[bi * s.stride_a + i * s.k + p] *
                 b[bi * s.stride_b + j * s.k + p];
        c[bi * s.stride_c + i * s.n + j] += acc;
      }
}

template <typename T>
void gemm_tn(const GemmShape& s, const T* a, const T* b, T* c) {
  for (std::size_t bi = 0; bi < s.batch; ++bi)
    for (std::size_t i = 0; i < s.m; ++i)
      for (std::size_t j = 0; j < s.n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < s.k; ++p)
          acc += a[bi * s.stride_a + p * s.m + i] *
                 b[bi * s.stride_b + p * s.n + j];
        c[bi * s.stride_c + i * s.n + j] += acc;
      }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = x[r * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[r * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j)
      y[r * n + j] = std::exp(x[r * n + j] - mx) / sum;
  }
}

template <typename T>
void softmax_rows_backward(std::size_t rows, std::size_t n, const T* y,
                           const T* dy, T* dx) {
  // Full Jacobian product: J_jk = y_j (delta_jk - y_k).
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T jac = y[r * n + j] * ((j == k ? T(1) : T(0)) - y[r * n + k]);
        acc += jac * dy[r * n + k];
      }
      dx[r * n + j] += acc;
    }
}

template <typename T>
void layernorm_rows(std::size_t rows, std::size_t n, const T* x, T eps,
                    T* xhat, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[r * n + j] / static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j)
      var += (x[r * n + j] - mean) * (x[r * n + j] - mean) / static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[r * n + j] = (x[r * n + j] - mean) * rstd[r];
  }
}

template <typename T>
void layernorm_rows_backward(std::size_t rows, std::size_t n, const T* xhat,
                             const T* rstd, const T* dxhat, T* dx) {
  // Explicit Jacobian of xhat_j = (x_j - mean) * rstd:
  //   d xhat_k / d x_j = rstd/n * (n delta_jk - 1 - xhat_j xhat_k)
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T jac = rstd[r] / static_cast<T>(n) *
                      (static_cast<T>(j == k ? n : 0) - T(1) -
                       xhat[r * n + j] * xhat[r * n + k]);
        acc += jac * dxhat[r * n + k];
      }
      dx[r * n + j] += acc;
    }
}

template <typename T>
void gelu(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v)));
  }
}

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T u = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    const T sech2 = T(1) / (std::cosh(u) * std::cosh(u));
    const T d = T(0.5) * (T(1) + std::tanh(u)) +
                T(0.5) * v * sech2 * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
    dx[i] += dy[i] * d;
  }
}

}  // namespace reference

#define JVIT_INSTANTIATE_KERNELS(NS, T)                                         \
  template void NS::gemm_nn<T>(const GemmShape&, const T*, const T*, T*);       \
  template void NS::gemm_nt<T>(const GemmShape&, const T*, const T*, T*);       \
  template void NS::gemm_tn<T>(const GemmShape&, const T*, const T*, T*);       \
  template void NS::softmax_rows<T>(std::size_t, std::size_t, const T*, T*);    \
  template void NS::softmax_rows_backward<T>(std::size_t, std::size_t,          \
                                             const T*, const T*, T*);           \
  template void NS::layernorm_rows<T>(std::size_t, std::size_t, const T*, T,    \
                                      T*, T*);                                  \
  template void NS::layernorm_rows_backward<T>(std::size_t, std::size_t,        \
                                               const T*, const T*, const T*,    \
                                               T*);                             \
  template void NS::gelu<T>(std::size_t, const T*, T*);                         \
  template void NS::gelu_backward<T>(std::size_t, const T*, const T*, T*);

JVIT_INSTANTIATE_KERNELS(kernels, float)
JVIT_INSTANTIATE_KERNELS(kernels, double)
JVIT_INSTANTIATE_KERNELS(reference, float)
JVIT_INSTANTIATE_KERNELS(reference, double)

#undef JVIT_INSTANTIATE_KERNELS

}  // namespace jvit::kernels
