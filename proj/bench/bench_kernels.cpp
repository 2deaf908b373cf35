// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <vector>

#include "ssmfuse/kernels.hpp"
#include "ssmfuse/rng.hpp"
#include "ssmfuse/trainer.hpp"

using namespace ssmfuse;

namespace {

std::vector<double> random_values(std::size_t n, double lo, double hi, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

struct ScanCase {
  kernels::SelectiveScanDims dims;
  std::vector<double> a, b, c, delta, x, y;

  explicit ScanCase(std::size_t length, std::size_t batch = 4, std::size_t channels = 64, std::size_t state = 16)
      : dims{batch, length, channels, state},
        a(random_values(channels * state, -2.0, -0.1, 1)),
        b(random_values(batch * length * state, -1.0, 1.0, 2)),
        c(random_values(batch * length * state, -1.0, 1.0, 3)),
        delta(random_values(batch * length * channels, 0.01, 0.1, 4)),
        x(random_values(batch * length * channels, -1.0, 1.0, 5)),
        y(batch * length * channels) {}

  kernels::SelectiveScanInputs inputs() const { return {a, b, c, delta, x, false}; }
};

template <auto Kernel>
void BM_selective_scan_forward(benchmark::State& st) {
  trainer::retain_freed_memory();
  ScanCase s(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) {
    Kernel(s.inputs(), s.y, s.dims);
    benchmark::DoNotOptimize(s.y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.dims.batch * s.dims.length * s.dims.channels));
}

template <auto Kernel>
void BM_selective_scan_backward(benchmark::State& st) {
  ScanCase s(static_cast<std::size_t>(st.range(0)));
  const auto gy = random_values(s.y.size(), -1.0, 1.0, 6);
  std::vector<double> ga(s.a.size()), gb(s.b.size()), gc(s.c.size()), gd(s.delta.size()), gx(s.x.size());
  for (auto _ : st) {
    Kernel(s.inputs(), gy, {ga, gb, gc, gd, gx}, s.dims);
    benchmark::DoNotOptimize(ga.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(s.dims.batch * s.dims.length * s.dims.channels));
}

template <auto Kernel>
void BM_matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const kernels::MatDims dims{n, n, n};
  const auto x = random_values(n * n, -1.0, 1.0, 7), w = random_values(n * n, -1.0, 1.0, 8);
  std::vector<double> y(n * n);
  for (auto _ : st) {
    Kernel(x, w, y, dims);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <auto Kernel>
void BM_linear_scan(benchmark::State& st) {
  const auto length = static_cast<std::size_t>(st.range(0));
  const kernels::ScanDims dims{4, length, 256};
  const auto a = random_values(4 * length * 256, 0.5, 0.99, 9), u = random_values(4 * length * 256, -1.0, 1.0, 10);
  std::vector<double> h(a.size());
  for (auto _ : st) {
    Kernel(a, u, h, dims);
    benchmark::DoNotOptimize(h.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(a.size()));
}

void BM_linear_scan_chunked(benchmark::State& st) {
  const auto length = static_cast<std::size_t>(st.range(0));
  const kernels::ScanDims dims{4, length, 256};
  const auto a = random_values(4 * length * 256, 0.5, 0.99, 9), u = random_values(4 * length * 256, -1.0, 1.0, 10);
  std::vector<double> h(a.size());
  for (auto _ : st) {
    kernels::parallel::linear_scan_chunked(a, u, h, dims, static_cast<std::size_t>(st.range(1)));
    benchmark::DoNotOptimize(h.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(a.size()));
}

}  // namespace

BENCHMARK(BM_selective_scan_forward<kernels::serial::selective_scan_forward>)->Name("selective_scan_forward/serial")->RangeMultiplier(2)->Range(256, 2048);
BENCHMARK(BM_selective_scan_forward<kernels::parallel::selective_scan_forward>)->Name("selective_scan_forward/parallel")->RangeMultiplier(2)->Range(256, 2048);
BENCHMARK(BM_selective_scan_backward<kernels::serial::selective_scan_backward>)->Name("selective_scan_backward/serial")->RangeMultiplier(2)->Range(256, 2048);
BENCHMARK(BM_selective_scan_backward<kernels::parallel::selective_scan_backward>)->Name("selective_scan_backward/parallel")->RangeMultiplier(2)->Range(256, 2048);
BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_linear_scan<kernels::serial::linear_scan>)->Name("linear_scan/serial")->Arg(1024)->Arg(4096);
BENCHMARK(BM_linear_scan<kernels::parallel::linear_scan>)->Name("linear_scan/parallel")->Arg(1024)->Arg(4096);
BENCHMARK(BM_linear_scan_chunked)->Name("linear_scan_chunked")->Args({4096, 64})->Args({4096, 1024});

BENCHMARK_MAIN();
