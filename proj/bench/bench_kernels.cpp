// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels vs the OpenMP kernels on model-sized shapes.
// Usage: bench_kernels [threads]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <vector>

#include "jvit/kernels.hpp"

namespace k = jvit::kernels;

namespace {

double seconds_per_call(const std::function<void()>& f) {
  using clock = std::chrono::steady_clock;
  f();  // warm-up
  int reps = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (int i = 0; i < reps; ++i) f();
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    if (s > 0.2) return s / reps;
    reps *= 2;
  }
}

std::vector<float> random_vec(std::size_t n, std::mt19937& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

void gemm_row(const char* name, k::GemmShape s) {
  std::mt19937 rng(1);
  auto a = random_vec(s.batch * s.m * s.k, rng);
  auto b = random_vec((s.stride_b ? s.batch : 1) * s.k * s.n, rng);
  std::vector<float> c(s.batch * s.m * s.n);
  const double flops = 2.0 * s.batch * s.m * s.n * s.k;
  const double ref = seconds_per_call([&] { k::reference::gemm_nn(s, a.data(), b.data(), c.data()); });
  const double fast = seconds_per_call([&] { k::gemm_nn(s, a.data(), b.data(), c.data()); });
  std::printf("%-28s ref %8.2f GF/s  omp %8.2f GF/s  speedup %5.2fx\n", name, flops / ref * 1e-9,
              flops / fast * 1e-9, ref / fast);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) k::set_threads(std::atoi(argv[1]));
  std::printf("threads: %d\n", k::max_threads());
  // tokens x D times D x D, tokens x D times D x 4D, per-head scores.
  gemm_row("qkv 520x64 * 64x64", {1, 520, 64, 64, 0, 0, 0});
  gemm_row("mlp 520x64 * 64x256", {1, 520, 256, 64, 0, 0, 0});
  gemm_row("mlp 520x256 * 256x64", {1, 520, 64, 256, 0, 0, 0});
  gemm_row("attn 32x(65x16 * 16x65)", {32, 65, 65, 16, 65 * 16, 16 * 65, 65 * 65});
  gemm_row("deit 197x384 * 384x1536", {1, 197, 1536, 384, 0, 0, 0});

  std::mt19937 rng(2);
  const std::size_t rows = 2048, n = 256;
  auto x = random_vec(rows * n, rng);
  std::vector<float> y(rows * n), xhat(rows * n), rstd(rows);
  const double sm_ref = seconds_per_call([&] { k::reference::softmax_rows(rows, n, x.data(), y.data()); });
  const double sm = seconds_per_call([&] { k::softmax_rows(rows, n, x.data(), y.data()); });
  std::printf("%-28s ref %8.3f ms     omp %8.3f ms     speedup %5.2fx\n", "softmax 2048x256",
              sm_ref * 1e3, sm * 1e3, sm_ref / sm);
  const double ln_ref = seconds_per_call(
      [&] { k::reference::layernorm_rows(rows, n, x.data(), 1e-6f, xhat.data(), rstd.data()); });
  const double ln = seconds_per_call(
      [&] { k::layernorm_rows(rows, n, x.data(), 1e-6f, xhat.data(), rstd.data()); });
  std::printf("%-28s ref %8.3f ms     omp %8.3f ms     speedup %5.2fx\n", "layernorm 2048x256",
              ln_ref * 1e3, ln * 1e3, ln_ref / ln);
  const double ge_ref = seconds_per_call([&] { k::reference::gelu(rows * n, x.data(), y.data()); });
  const double ge = seconds_per_call([&] { k::gelu(rows * n, x.data(), y.data()); });
  std::printf("%-28s ref %8.3f ms     omp %8.3f ms     speedup %5.2fx\n", "gelu 524288", ge_ref * 1e3,
              ge * 1e3, ge_ref / ge);
  return 0;
}
