// SPDX-License-Identifier: Apache-2.0
//
// Dense numeric kernels behind the autodiff primitives.
//
// Every kernel exists twice: a straightforward serial version in
// `jvit::kernels::reference` and an OpenMP version in `jvit::kernels`.
// The OpenMP kernels only split work across independent output rows, so
// their results are bit-identical for any thread count. The reference
// kernels use a different summation order and agree only up to rounding;
// they exist for tests and for the benchmark.

#pragma once

#include <cstddef>

namespace jvit::kernels {

/// Batched GEMM geometry. Matrix b of batch entry i starts at b + i*stride_b;
/// stride_b == 0 shares one right-hand matrix across the batch.
struct GemmShape {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t stride_a = 0;
  std::size_t stride_b = 0;
  std::size_t stride_c = 0;
};

// C += A * B     (A: m x k, B: k x n)
template <typename T>
void gemm_nn(const GemmShape& s, const T* a, const T* b, T* c);
// C += A * B^T   (A: m x k, B: n x k)
template <typename T>
void gemm_nt(const GemmShape& s, const T* a, const T* b, T* c);
// C += A^T * B   (A: k x m, B: k x n)
template <typename T>
void gemm_tn(const GemmShape& s, const T* a, const T* b, T* c);

/// Softmax over contiguous rows of length n, max-subtracted.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y);

/// dx = y * (dy - sum(dy * y)) per row.
template <typename T>
void softmax_rows_backward(std::size_t rows, std::size_t n, const T* y,
                           const T* dy, T* dx);

/// Row-wise normalization to zero mean / unit variance; writes the
/// normalized rows to xhat and 1/sqrt(var + eps) to rstd.
template <typename T>
void layernorm_rows(std::size_t rows, std::size_t n, const T* x, T eps,
                    T* xhat, T* rstd);

/// Gradient of the pre-affine normalization: dx from d(xhat).
template <typename T>
void layernorm_rows_backward(std::size_t rows, std::size_t n, const T* xhat,
                             const T* rstd, const T* dxhat, T* dx);

// GELU, tanh approximation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
void gelu(std::size_t n, const T* x, T* y);
template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

namespace reference {

template <typename T>
void gemm_nn(const GemmShape& s, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(const GemmShape& s, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(const GemmShape& s, const T* a, const T* b, T* c);
template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y);
template <typename T>
void softmax_rows_backward(std::size_t rows, std::size_t n, const T* y,
                           const T* dy, T* dx);
template <typename T>
void layernorm_rows(std::size_t rows, std::size_t n, const T* x, T eps,
                    T* xhat, T* rstd);
template <typename T>
void layernorm_rows_backward(std::size_t rows, std::size_t n, const T* xhat,
                             const T* rstd, const T* dxhat, T* dx);
template <typename T>
void gelu(std::size_t n, const T* x, T* y);
template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

}  // namespace reference

/// Number of threads the OpenMP kernels may use (1 when built without
/// OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace jvit::kernels
