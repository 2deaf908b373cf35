// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <vector>

#include "ssmfuse/kernels.hpp"

#ifdef SSMFUSE_HAVE_LIBMVEC
// Exposes the vector variants in glibc's libmvec to the vectorizer.
extern "C" {
#pragma omp declare simd notinbranch
double expm1(double) noexcept;
}
#endif

namespace ssmfuse::kernels {

namespace {

void expm1_inplace(double* z, std::size_t count) {
#pragma omp simd
  for (std::size_t i = 0; i < count; ++i) z[i] = std::expm1(z[i]);
}

// B_bar / B for one state: (e^z - 1) / A under ZOH with z = delta * A, written
// with the per-lane reciprocal of A so the hot loops never divide. The
// Taylor branch covers tiny |z|, including A = 0.
inline double input_coef(double dl, double z, double em1, double inv_a) {
  const bool small = std::abs(z) < kZohSeriesThreshold;
  return small ? dl * (1.0 + z / 2.0 + z * z / 6.0) : em1 * inv_a;
}

// d(input_coef)/dA = delta^2 * G'(z) with G(z) = (e^z - 1) / z.
inline double input_coef_da(double dl, double z, double em1, double coef, double inv_a) {
  const bool small = std::abs(z) < 1e-3;
  const double series = dl * dl * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0);
  return small ? series : (dl * (1.0 + em1) - coef) * inv_a;
}

// Per-lane work buffers. The state and expm1 histories hold one lane's
// [L, N] values; the backward pass refills them instead of keeping a tape.
struct LaneScratch {
  LaneScratch(std::size_t length, std::size_t state)
      : gh(state), zeros(state), inv_a(state), h_hist(length * state), e_hist(length * state) {}
  std::vector<double> gh;
  std::vector<double> zeros;
  std::vector<double> inv_a;
  std::vector<double> h_hist;
  std::vector<double> e_hist;

  const double* reciprocal(const double* a) {
    for (std::size_t n = 0; n < inv_a.size(); ++n) inv_a[n] = 1.0 / a[n];
    return inv_a.data();
  }
};

// Forward recurrence for one (batch, channel) lane into the scratch
// histories. Writes y when it is non-empty.
template <bool kEuler>
void scan_lane_forward(const SelectiveScanInputs& in, std::span<double> y, LaneScratch& scratch,
                       const SelectiveScanDims& dims, std::size_t b, std::size_t d) {
  const auto [batch, length, channels, state] = dims;
  const double* a = in.a.data() + d * state;
  const double* inv_a = scratch.reciprocal(a);
  for (std::size_t t = 0; t < length; ++t) {
    const double dl = in.delta[(b * length + t) * channels + d];
    double* z = scratch.e_hist.data() + t * state;
    for (std::size_t n = 0; n < state; ++n) z[n] = dl * a[n];
  }
  expm1_inplace(scratch.e_hist.data(), length * state);
  const double* h_prev = scratch.zeros.data();
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t bt = b * length + t;
    const double dl = in.delta[bt * channels + d];
    const double xv = in.x[bt * channels + d];
    const double* bm = in.b.data() + bt * state;
    const double* cm = in.c.data() + bt * state;
    double* h = scratch.h_hist.data() + t * state;
    const double* e = scratch.e_hist.data() + t * state;
    double acc = 0.0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t n = 0; n < state; ++n) {
      const double coef = kEuler ? dl : input_coef(dl, dl * a[n], e[n], inv_a[n]);
      h[n] = (1.0 + e[n]) * h_prev[n] + coef * bm[n] * xv;
      acc += cm[n] * h[n];
    }
    if (!y.empty()) y[bt * channels + d] = acc;
    h_prev = h;
  }
}

// Recomputes the lane's histories, then sweeps in reverse. gA goes to a
// caller-owned accumulator so the caller controls the reduction order.
template <bool kEuler>
void scan_lane_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                        const SelectiveScanGrads& grads, double* grad_a, LaneScratch& scratch,
                        const SelectiveScanDims& dims, std::size_t b, std::size_t d) {
  scan_lane_forward<kEuler>(in, {}, scratch, dims, b, d);
  const auto [batch, length, channels, state] = dims;
  const double* a = in.a.data() + d * state;
  const double* inv_a = scratch.inv_a.data();
  double* ga = grad_a + d * state;
  double* gh = scratch.gh.data();
  std::fill(gh, gh + state, 0.0);
  for (std::size_t t = length; t-- > 0;) {
    const std::size_t bt = b * length + t;
    const double dl = in.delta[bt * channels + d];
    const double xv = in.x[bt * channels + d];
    const double g_out = gy[bt * channels + d];
    const double* bm = in.b.data() + bt * state;
    const double* cm = in.c.data() + bt * state;
    const double* h = scratch.h_hist.data() + t * state;
    const double* e = scratch.e_hist.data() + t * state;
    const double* h_prev = t > 0 ? h - state : scratch.zeros.data();
    double* gb = grads.b.data() + bt * state;
    double* gc = grads.c.data() + bt * state;
    double g_x = 0.0;
    double g_dl = 0.0;
#pragma omp simd reduction(+ : g_x, g_dl)
    for (std::size_t n = 0; n < state; ++n) {
      gh[n] += g_out * cm[n];
      gc[n] += g_out * h[n];
      const double z = dl * a[n];
      const double decay = 1.0 + e[n];
      const double coef = kEuler ? dl : input_coef(dl, z, e[n], inv_a[n]);
      const double coef_ddl = kEuler ? 1.0 : decay;
      const double coef_da = kEuler ? 0.0 : input_coef_da(dl, z, e[n], coef, inv_a[n]);
      const double g_coef = gh[n] * bm[n] * xv;
      const double g_decay = gh[n] * h_prev[n];
      g_x += gh[n] * coef * bm[n];
      g_dl += g_decay * a[n] * decay + g_coef * coef_ddl;
      gb[n] += gh[n] * coef * xv;
      ga[n] += g_decay * dl * decay + g_coef * coef_da;
      gh[n] *= decay;
    }
    grads.x[bt * channels + d] += g_x;
    grads.delta[bt * channels + d] += g_dl;
  }
}

void scan_lane_forward(const SelectiveScanInputs& in, std::span<double> y, LaneScratch& scratch,
                       const SelectiveScanDims& dims, std::size_t b, std::size_t d) {
  if (in.euler) {
    scan_lane_forward<true>(in, y, scratch, dims, b, d);
  } else {
    scan_lane_forward<false>(in, y, scratch, dims, b, d);
  }
}

void scan_lane_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                        const SelectiveScanGrads& grads, double* grad_a, LaneScratch& scratch,
                        const SelectiveScanDims& dims, std::size_t b, std::size_t d) {
  if (in.euler) {
    scan_lane_backward<true>(in, gy, grads, grad_a, scratch, dims, b, d);
  } else {
    scan_lane_backward<false>(in, gy, grads, grad_a, scratch, dims, b, d);
  }
}

}  // namespace

namespace serial {

void selective_scan_forward(const SelectiveScanInputs& in, std::span<double> y, SelectiveScanDims dims) {
  LaneScratch scratch(dims.length, dims.state);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t d = 0; d < dims.channels; ++d) scan_lane_forward(in, y, scratch, dims, b, d);
  }
}

void selective_scan_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                             const SelectiveScanGrads& grads, SelectiveScanDims dims) {
  LaneScratch scratch(dims.length, dims.state);
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t d = 0; d < dims.channels; ++d) {
      scan_lane_backward(in, gy, grads, grads.a.data(), scratch, dims, b, d);
    }
  }
}

}  // namespace serial

namespace parallel {

void selective_scan_forward(const SelectiveScanInputs& in, std::span<double> y, SelectiveScanDims dims) {
  const auto lanes = static_cast<long>(dims.batch * dims.channels);
#pragma omp parallel
  {
    LaneScratch scratch(dims.length, dims.state);
#pragma omp for schedule(static)
    for (long lane = 0; lane < lanes; ++lane) {
      const auto b = static_cast<std::size_t>(lane) / dims.channels;
      const auto d = static_cast<std::size_t>(lane) % dims.channels;
      scan_lane_forward(in, y, scratch, dims, b, d);
    }
  }
}

void selective_scan_backward(const SelectiveScanInputs& in, std::span<const double> gy,
                             const SelectiveScanGrads& grads, SelectiveScanDims dims) {
  // One partial dA per batch row, reduced afterwards in batch order.
  const std::size_t a_size = dims.channels * dims.state;
  std::vector<double> partial(dims.batch * a_size, 0.0);
  const auto batches = static_cast<long>(dims.batch);
#pragma omp parallel
  {
    LaneScratch scratch(dims.length, dims.state);
#pragma omp for schedule(static)
    for (long bb = 0; bb < batches; ++bb) {
      const auto b = static_cast<std::size_t>(bb);
      double* grad_a = partial.data() + b * a_size;
      for (std::size_t d = 0; d < dims.channels; ++d) {
        scan_lane_backward(in, gy, grads, grad_a, scratch, dims, b, d);
      }
    }
  }
  for (std::size_t b = 0; b < dims.batch; ++b) {
    const double* p = partial.data() + b * a_size;
    for (std::size_t i = 0; i < a_size; ++i) grads.a[i] += p[i];
  }
}

}  // namespace parallel

}  // namespace ssmfuse::kernels
