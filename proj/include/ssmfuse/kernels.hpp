// SPDX-License-Identifier: Apache-2.0
#pragma once

// Numeric inner loops. Every kernel exists twice: `serial::` is the plain
// reference kept for tests and benchmarks, `parallel::` is the OpenMP version
// used by the tensor ops. Parallel kernels partition work so that every
// output element is produced by exactly one thread in a fixed order, so the
// results do not depend on the thread count.

#include <cmath>
#include <cstddef>
#include <span>

namespace ssmfuse::kernels {

/// |z| below which (e^z - 1)/z switches to its Taylor expansion.
inline constexpr double kZohSeriesThreshold = 1e-8;

/// (e^z - 1)/z, the ZOH input gain per unit step; em1 is expm1(z).
/// Written with selects only so that loops calling it vectorize.
inline double zoh_gain(double z, double em1) {
  const bool small = std::abs(z) < kZohSeriesThreshold;
  const double series = 1.0 + z / 2.0 + z * z / 6.0;
  return small ? series : em1 / (small ? 1.0 : z);
}
inline double zoh_gain(double z) { return zoh_gain(z, std::expm1(z)); }

/// d/dz of zoh_gain.
inline double zoh_gain_derivative(double z, double em1) {
  const bool small = std::abs(z) < 1e-3;
  const double series = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  const double safe = small ? 1.0 : z;
  return small ? series : (z * em1 + z - em1) / (safe * safe);
}
inline double zoh_gain_derivative(double z) { return zoh_gain_derivative(z, std::expm1(z)); }

struct MatDims {
  std::size_t rows;
  std::size_t inner;
  std::size_t cols;
};

struct ScanDims {
  std::size_t batch;
  std::size_t length;
  std::size_t width;  // independent lanes per step
};

struct SelectiveScanDims {
  std::size_t batch;
  std::size_t length;
  std::size_t channels;  // D
  std::size_t state;     // N
};

struct SelectiveScanInputs {
  std::span<const double> a;      // [D, N], continuous-time transition (negative)
  std::span<const double> b;      // [B, L, N]
  std::span<const double> c;      // [B, L, N]
  std::span<const double> delta;  // [B, L, D]
  std::span<const double> x;      // [B, L, D]
  bool euler = false;             // B_bar = delta * B instead of exact ZOH
};

struct SelectiveScanGrads {
  std::span<double> a;      // accumulated
  std::span<double> b;      // accumulated
  std::span<double> c;      // accumulated
  std::span<double> delta;  // accumulated
  std::span<double> x;      // accumulated
};

namespace serial {

/// y[rows, cols] = x[rows, inner] * w[inner, cols] (overwrites y).
void matmul(std::span<const double> x, std::span<const double> w, std::span<double> y, MatDims dims);
/// dx[rows, inner] += g[rows, cols] * w^T.
void matmul_grad_input(std::span<const double> g, std::span<const double> w, std::span<double> dx,
                       MatDims dims);
/// dw[inner, cols] += x^T * g.
void matmul_grad_weight(std::span<const double> x, std::span<const double> g, std::span<double> dw,
                        MatDims dims);

/// h[b,t,:] = a[b,t,:] * h[b,t-1,:] + u[b,t,:], with h[b,-1,:] = 0.
void linear_scan(std::span<const double> a, std::span<const double> u, std::span<double> h, ScanDims dims);
/// Adjoint of linear_scan: out[b,t] = g[b,t] + a[b,t+1] * out[b,t+1].
void linear_scan_adjoint(std::span<const double> a, std::span<const double> g, std::span<double> out,
                         ScanDims dims);

/// Fused discretize + recurrence + readout. Nothing is stored for the
/// backward pass: it recomputes each lane's states into an [L, N] buffer
/// before sweeping in reverse.
void selective_scan_forward(const SelectiveScanInputs& in, std::span<double> y, SelectiveScanDims dims);
void selective_scan_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                             const SelectiveScanGrads& grads, SelectiveScanDims dims);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> x, std::span<const double> w, std::span<double> y, MatDims dims);
void matmul_grad_input(std::span<const double> g, std::span<const double> w, std::span<double> dx,
                       MatDims dims);
void matmul_grad_weight(std::span<const double> x, std::span<const double> g, std::span<double> dw,
                        MatDims dims);

void linear_scan(std::span<const double> a, std::span<const double> u, std::span<double> h, ScanDims dims);
void linear_scan_adjoint(std::span<const double> a, std::span<const double> g, std::span<double> out,
                         ScanDims dims);

/// Same recurrence as linear_scan, evaluated chunk by chunk. Each chunk is
/// first reduced from the identity element with (a1,b1)o(a2,b2) =
/// (a1*a2, a2*b1 + b2); chunk interiors run in parallel, then the carried
/// state is threaded through the chunks in order. chunk == length
/// reproduces serial::linear_scan bit for bit.
void linear_scan_chunked(std::span<const double> a, std::span<const double> u, std::span<double> h,
                         ScanDims dims, std::size_t chunk);

void selective_scan_forward(const SelectiveScanInputs& in, std::span<double> y, SelectiveScanDims dims);
void selective_scan_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                             const SelectiveScanGrads& grads, SelectiveScanDims dims);

}  // namespace parallel

}  // namespace ssmfuse::kernels
