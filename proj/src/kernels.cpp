// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <vector>

#include "ssmfuse/kernels.hpp"

namespace ssmfuse::kernels {

namespace serial {

void matmul(std::span<const double> x, std::span<const double> w, std::span<double> y, MatDims dims) {
  const auto [rows, inner, cols] = dims;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += x[i * inner + k] * w[k * cols + j];
      y[i * cols + j] = acc;
    }
  }
}

void matmul_grad_input(std::span<const double> g, std::span<const double> w, std::span<double> dx,
                       MatDims dims) {
  const auto [rows, inner, cols] = dims;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += g[i * cols + j] * w[k * cols + j];
      dx[i * inner + k] += acc;
    }
  }
}

void matmul_grad_weight(std::span<const double> x, std::span<const double> g, std::span<double> dw,
                        MatDims dims) {
  const auto [rows, inner, cols] = dims;
  for (std::size_t k = 0; k < inner; ++k) {
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rows; ++i) acc += x[i * inner + k] * g[i * cols + j];
      dw[k * cols + j] += acc;
    }
  }
}

void linear_scan(std::span<const double> a, std::span<const double> u, std::span<double> h, ScanDims dims) {
  const auto [batch, length, width] = dims;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t w = 0; w < width; ++w) {
      double state = 0.0;
      for (std::size_t t = 0; t < length; ++t) {
        const auto i = (b * length + t) * width + w;
        state = a[i] * state + u[i];
        h[i] = state;
      }
    }
  }
}

void linear_scan_adjoint(std::span<const double> a, std::span<const double> g, std::span<double> out,
                         ScanDims dims) {
  const auto [batch, length, width] = dims;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t w = 0; w < width; ++w) {
      double carry = 0.0;
      for (std::size_t t = length; t-- > 0;) {
        const auto i = (b * length + t) * width + w;
        carry = g[i] + carry;
        out[i] = carry;
        carry *= a[i];
      }
    }
  }
}

}  // namespace serial

namespace parallel {

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;

struct GemmOperands {
  const double* a;    // a(i, r) = a[i * a_row + r * a_red]
  std::size_t a_row;
  std::size_t a_red;
  const double* b;    // b(r, j) = b[r * ldb + j]
  std::size_t ldb;
  double* out;        // out(i, j) = out[i * cols + j]
  std::size_t rows;
  std::size_t reduce;
  std::size_t cols;
  bool accumulate;
};

// One output tile; every element sums its products in ascending r before
// touching `out`, the same order as the serial reference.
template <std::size_t R, std::size_t C>
void gemm_tile(const GemmOperands& g, std::size_t i0, std::size_t j0) {
  double acc[R][C] = {};
  const double* a = g.a + i0 * g.a_row;
  const double* b = g.b + j0;
  const std::size_t a_row = g.a_row, a_red = g.a_red, ldb = g.ldb;
  for (std::size_t r = 0; r < g.reduce; ++r) {
    const double* br = b + r * ldb;
#pragma GCC unroll 8
    for (std::size_t ii = 0; ii < R; ++ii) {
      const double av = a[ii * a_row + r * a_red];
#pragma omp simd
      for (std::size_t jj = 0; jj < C; ++jj) acc[ii][jj] += av * br[jj];
    }
  }
  for (std::size_t ii = 0; ii < R; ++ii) {
    double* o = g.out + (i0 + ii) * g.cols + j0;
    for (std::size_t jj = 0; jj < C; ++jj) o[jj] = g.accumulate ? o[jj] + acc[ii][jj] : acc[ii][jj];
  }
}

void gemm_edge(const GemmOperands& g, std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1) {
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < g.reduce; ++r) acc += g.a[i * g.a_row + r * g.a_red] * g.b[r * g.ldb + j];
      double& o = g.out[i * g.cols + j];
      o = g.accumulate ? o + acc : acc;
    }
  }
}

void gemm(const GemmOperands& g) {
  const std::size_t full_rows = g.rows / kTileRows * kTileRows;
  const std::size_t full_cols = g.cols / kTileCols * kTileCols;
  const auto tiles = static_cast<long>(g.rows / kTileRows);
#pragma omp parallel for schedule(static)
  for (long t = 0; t < tiles; ++t) {
    const std::size_t i0 = static_cast<std::size_t>(t) * kTileRows;
    for (std::size_t j0 = 0; j0 < full_cols; j0 += kTileCols) gemm_tile<kTileRows, kTileCols>(g, i0, j0);
    gemm_edge(g, i0, i0 + kTileRows, full_cols, g.cols);
  }
  gemm_edge(g, full_rows, g.rows, 0, g.cols);
}

}  // namespace

void matmul(std::span<const double> x, std::span<const double> w, std::span<double> y, MatDims dims) {
  const auto [rows, inner, cols] = dims;
  gemm({x.data(), inner, 1, w.data(), cols, y.data(), rows, inner, cols, false});
}

void matmul_grad_input(std::span<const double> g, std::span<const double> w, std::span<double> dx,
                       MatDims dims) {
  const auto [rows, inner, cols] = dims;
  std::vector<double> wt(inner * cols);
  for (std::size_t k = 0; k < inner; ++k) {
    for (std::size_t j = 0; j < cols; ++j) wt[j * inner + k] = w[k * cols + j];
  }
  gemm({g.data(), cols, 1, wt.data(), inner, dx.data(), rows, cols, inner, true});
}

void matmul_grad_weight(std::span<const double> x, std::span<const double> g, std::span<double> dw,
                        MatDims dims) {
  const auto [rows, inner, cols] = dims;
  gemm({x.data(), 1, inner, g.data(), cols, dw.data(), inner, rows, cols, true});
}

void linear_scan(std::span<const double> a, std::span<const double> u, std::span<double> h, ScanDims dims) {
  const auto [batch, length, width] = dims;
  const auto n = static_cast<long>(batch);
#pragma omp parallel for schedule(static)
  for (long bb = 0; bb < n; ++bb) {
    const auto b = static_cast<std::size_t>(bb);
    const std::size_t base = b * length * width;
    for (std::size_t w = 0; w < width; ++w) h[base + w] = u[base + w];
    for (std::size_t t = 1; t < length; ++t) {
      const std::size_t cur = base + t * width;
      const std::size_t prev = cur - width;
      for (std::size_t w = 0; w < width; ++w) h[cur + w] = a[cur + w] * h[prev + w] + u[cur + w];
    }
  }
}

void linear_scan_adjoint(std::span<const double> a, std::span<const double> g, std::span<double> out,
                         ScanDims dims) {
  const auto [batch, length, width] = dims;
  const auto n = static_cast<long>(batch);
#pragma omp parallel for schedule(static)
  for (long bb = 0; bb < n; ++bb) {
    const std::size_t base = static_cast<std::size_t>(bb) * length * width;
    const std::size_t last = base + (length - 1) * width;
    for (std::size_t w = 0; w < width; ++w) out[last + w] = g[last + w];
    for (std::size_t t = length - 1; t-- > 0;) {
      const std::size_t cur = base + t * width;
      const std::size_t next = cur + width;
      for (std::size_t w = 0; w < width; ++w) out[cur + w] = g[cur + w] + a[next + w] * out[next + w];
    }
  }
}

void linear_scan_chunked(std::span<const double> a, std::span<const double> u, std::span<double> h,
                         ScanDims dims, std::size_t chunk) {
  const auto [batch, length, width] = dims;
  const std::size_t chunks = (length + chunk - 1) / chunk;
  // decay[i]: product of a over the chunk prefix ending at i
  std::vector<double> decay(a.size());
  const auto jobs = static_cast<long>(batch * chunks);

  // 1. local prefix compositions, every chunk starting from the identity (1, 0)
#pragma omp parallel for schedule(static)
  for (long job = 0; job < jobs; ++job) {
    const auto b = static_cast<std::size_t>(job) / chunks;
    const auto c = static_cast<std::size_t>(job) % chunks;
    const std::size_t t0 = c * chunk;
    const std::size_t t1 = std::min(length, t0 + chunk);
    const std::size_t base = b * length * width;
    for (std::size_t w = 0; w < width; ++w) {
      const auto i = base + t0 * width + w;
      decay[i] = a[i];
      h[i] = 0.0 * a[i] + u[i];
    }
    for (std::size_t t = t0 + 1; t < t1; ++t) {
      const std::size_t cur = base + t * width;
      const std::size_t prev = cur - width;
      for (std::size_t w = 0; w < width; ++w) {
        decay[cur + w] = decay[prev + w] * a[cur + w];
        h[cur + w] = a[cur + w] * h[prev + w] + u[cur + w];
      }
    }
  }

  // 2. thread the carried state through the chunks in fixed order
  std::vector<double> carry(batch * chunks * width, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * length * width;
    for (std::size_t c = 1; c < chunks; ++c) {
      const std::size_t last = base + (c * chunk - 1) * width;
      const double* prev = carry.data() + (b * chunks + c - 1) * width;
      double* cur = carry.data() + (b * chunks + c) * width;
      for (std::size_t w = 0; w < width; ++w) cur[w] = decay[last + w] * prev[w] + h[last + w];
    }
  }

  // 3. fold each chunk's incoming state into its interior
#pragma omp parallel for schedule(static)
  for (long job = 0; job < jobs; ++job) {
    const auto b = static_cast<std::size_t>(job) / chunks;
    const auto c = static_cast<std::size_t>(job) % chunks;
    if (c == 0) continue;
    const std::size_t t0 = c * chunk;
    const std::size_t t1 = std::min(length, t0 + chunk);
    const std::size_t base = b * length * width;
    const double* in = carry.data() + (b * chunks + c) * width;
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t cur = base + t * width;
      for (std::size_t w = 0; w < width; ++w) h[cur + w] = decay[cur + w] * in[w] + h[cur + w];
    }
  }
}

}  // namespace parallel

}  // namespace ssmfuse::kernels
