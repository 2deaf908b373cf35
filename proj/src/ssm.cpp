// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/ssm.hpp"

#include <cmath>
#include <iostream>
#include <memory>
#include <string>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/kernels.hpp"
#include "ssmfuse/ops.hpp"

namespace ssmfuse::ssm {

namespace {

using detail::Node;

struct ScanShape {
  std::size_t batch, length, channels, state;
};

void expect_shape(const char* op, const char* what, const Tensor& t, const Shape& want) {
  if (t.shape() != want) {
    throw DimensionError(std::string(op) + ": " + what + " has shape " + shape_str(t.shape()) + ", expected " +
                         shape_str(want));
  }
}

void expect_rank(const char* op, const char* what, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void expect_positive(const char* op, const Tensor& delta) {
  for (double v : delta.data()) {
    if (!(v > 0.0)) throw ContractError(std::string(op) + ": delta must be strictly positive, got " + std::to_string(v));
  }
}

ScanShape scan_shape(const DiscretizedPair& pair, const Tensor& c, const Tensor& x) {
  expect_rank("scan", "A_bar", pair.a_bar, 4);
  const auto& s = pair.a_bar.shape();
  const ScanShape shape{s[0], s[1], s[2], s[3]};
  expect_shape("scan", "B_bar", pair.b_bar, s);
  expect_shape("scan", "C", c, {shape.batch, shape.length, shape.state});
  expect_shape("scan", "x", x, {shape.batch, shape.length, shape.channels});
  return shape;
}

enum class ScanMode { Sequential, Chunked };

Tensor scan_impl(const DiscretizedPair& pair, const Tensor& c, const Tensor& x, ScanMode mode, std::size_t chunk) {
  const auto sh = scan_shape(pair, c, x);
  const std::size_t width = sh.channels * sh.state;
  const kernels::ScanDims dims{sh.batch, sh.length, width};
  const auto bbar = pair.b_bar.data();
  const auto xd = x.data();
  const auto cd = c.data();

  std::vector<double> u(bbar.size());
  for (std::size_t bt = 0; bt < sh.batch * sh.length; ++bt) {
    for (std::size_t d = 0; d < sh.channels; ++d) {
      const double xv = xd[bt * sh.channels + d];
      const std::size_t base = (bt * sh.channels + d) * sh.state;
      for (std::size_t n = 0; n < sh.state; ++n) u[base + n] = bbar[base + n] * xv;
    }
  }
  auto states = std::make_shared<std::vector<double>>(u.size());
  if (mode == ScanMode::Sequential) {
    kernels::parallel::linear_scan(pair.a_bar.data(), u, *states, dims);
  } else {
    kernels::parallel::linear_scan_chunked(pair.a_bar.data(), u, *states, dims, chunk);
  }

  std::vector<double> y(sh.batch * sh.length * sh.channels);
  for (std::size_t bt = 0; bt < sh.batch * sh.length; ++bt) {
    const double* cm = cd.data() + bt * sh.state;
    for (std::size_t d = 0; d < sh.channels; ++d) {
      const double* h = states->data() + (bt * sh.channels + d) * sh.state;
      double acc = 0.0;
      for (std::size_t n = 0; n < sh.state; ++n) acc += cm[n] * h[n];
      y[bt * sh.channels + d] = acc;
    }
  }

  const char* name = mode == ScanMode::Sequential ? "scan_sequential" : "scan_chunked";
  return Tensor::make_result(
      {sh.batch, sh.length, sh.channels}, std::move(y), name, {pair.a_bar, pair.b_bar, c, x},
      [sh, dims, states](Node& o) {
        Node& pa = *o.parents[0];
        Node& pb = *o.parents[1];
        Node& pc = *o.parents[2];
        Node& px = *o.parents[3];
        const std::size_t rows = sh.batch * sh.length;
        // direct contribution of y_t to h_t
        std::vector<double> gh(states->size());
        for (std::size_t bt = 0; bt < rows; ++bt) {
          const double* cm = pc.data.data() + bt * sh.state;
          for (std::size_t d = 0; d < sh.channels; ++d) {
            const double g = o.grad[bt * sh.channels + d];
            double* dst = gh.data() + (bt * sh.channels + d) * sh.state;
            for (std::size_t n = 0; n < sh.state; ++n) dst[n] = g * cm[n];
          }
        }
        if (pc.requires_grad) {
          auto gc = pc.grad_buffer();
          for (std::size_t bt = 0; bt < rows; ++bt) {
            for (std::size_t d = 0; d < sh.channels; ++d) {
              const double g = o.grad[bt * sh.channels + d];
              const double* h = states->data() + (bt * sh.channels + d) * sh.state;
              for (std::size_t n = 0; n < sh.state; ++n) gc[bt * sh.state + n] += g * h[n];
            }
          }
        }
        std::vector<double> total(gh.size());
        kernels::parallel::linear_scan_adjoint(pa.data, gh, total, dims);
        std::span<double> ga, gb, gx;
        if (pa.requires_grad) ga = pa.grad_buffer();
        if (pb.requires_grad) gb = pb.grad_buffer();
        if (px.requires_grad) gx = px.grad_buffer();
        const std::size_t width = sh.channels * sh.state;
        for (std::size_t bt = 0; bt < rows; ++bt) {
          const bool first = bt % sh.length == 0;
          for (std::size_t d = 0; d < sh.channels; ++d) {
            const std::size_t base = (bt * sh.channels + d) * sh.state;
            const double xv = px.data[bt * sh.channels + d];
            double gxv = 0.0;
            for (std::size_t n = 0; n < sh.state; ++n) {
              const double g = total[base + n];
              if (!ga.empty() && !first) ga[base + n] += g * (*states)[base + n - width];
              if (!gb.empty()) gb[base + n] += g * xv;
              gxv += g * pb.data[base + n];
            }
            if (!gx.empty()) gx[bt * sh.channels + d] += gxv;
          }
        }
      });
}

}  // namespace

DiscretizedPair zoh_discretize(const Tensor& a, const Tensor& b, const Tensor& delta, Discretization mode) {
  expect_rank("zoh_discretize", "A", a, 2);
  expect_rank("zoh_discretize", "B", b, 3);
  expect_rank("zoh_discretize", "delta", delta, 3);
  const std::size_t channels = a.dim(0), state = a.dim(1);
  const std::size_t batch = delta.dim(0), length = delta.dim(1);
  expect_shape("zoh_discretize", "delta", delta, {batch, length, channels});
  expect_shape("zoh_discretize", "B", b, {batch, length, state});
  expect_positive("zoh_discretize", delta);

  const Shape out_shape{batch, length, channels, state};
  const std::size_t rows = batch * length;
  const auto ad = a.data(), bd = b.data(), dd = delta.data();
  std::vector<double> a_bar(shape_numel(out_shape));
  std::vector<double> b_bar(a_bar.size());
  const bool euler = mode == Discretization::Euler;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < channels; ++d) {
      const double dl = dd[r * channels + d];
      for (std::size_t n = 0; n < state; ++n) {
        const double z = dl * ad[d * state + n];
        const std::size_t i = (r * channels + d) * state + n;
        a_bar[i] = std::exp(z);
        b_bar[i] = (euler ? 1.0 : kernels::zoh_gain(z)) * dl * bd[r * state + n];
      }
    }
  }

  DiscretizedPair pair;
  pair.a_bar = Tensor::make_result(out_shape, std::move(a_bar), "discretize_a", {a, delta},
                                   [rows, channels, state](Node& o) {
                                     Node& pa = *o.parents[0];
                                     Node& pd = *o.parents[1];
                                     std::span<double> ga, gd;
                                     if (pa.requires_grad) ga = pa.grad_buffer();
                                     if (pd.requires_grad) gd = pd.grad_buffer();
                                     for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t d = 0; d < channels; ++d) {
                                         const double dl = pd.data[r * channels + d];
                                         double acc = 0.0;
                                         for (std::size_t n = 0; n < state; ++n) {
                                           const std::size_t i = (r * channels + d) * state + n;
                                           const double g = o.grad[i] * o.data[i];
                                           if (!ga.empty()) ga[d * state + n] += g * dl;
                                           acc += g * pa.data[d * state + n];
                                         }
                                         if (!gd.empty()) gd[r * channels + d] += acc;
                                       }
                                     }
                                   });
  pair.b_bar = Tensor::make_result(
      out_shape, std::move(b_bar), "discretize_b", {a, b, delta}, [rows, channels, state, euler](Node& o) {
        Node& pa = *o.parents[0];
        Node& pb = *o.parents[1];
        Node& pd = *o.parents[2];
        std::span<double> ga, gb, gd;
        if (pa.requires_grad) ga = pa.grad_buffer();
        if (pb.requires_grad) gb = pb.grad_buffer();
        if (pd.requires_grad) gd = pd.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t d = 0; d < channels; ++d) {
            const double dl = pd.data[r * channels + d];
            double g_dl = 0.0;
            for (std::size_t n = 0; n < state; ++n) {
              const std::size_t i = (r * channels + d) * state + n;
              const double g = o.grad[i];
              const double bv = pb.data[r * state + n];
              const double av = pa.data[d * state + n];
              if (euler) {
                if (!gb.empty()) gb[r * state + n] += g * dl;
                g_dl += g * bv;
                continue;
              }
              const double z = dl * av;
              const double gain = kernels::zoh_gain(z);
              const double g_z = g * kernels::zoh_gain_derivative(z) * dl * bv;
              if (!ga.empty()) ga[d * state + n] += g_z * dl;
              if (!gb.empty()) gb[r * state + n] += g * gain * dl;
              g_dl += g * gain * bv + g_z * av;
            }
            if (!gd.empty()) gd[r * channels + d] += g_dl;
          }
        }
      });
  return pair;
}

Tensor scan_sequential(const DiscretizedPair& pair, const Tensor& c, const Tensor& x) {
  return scan_impl(pair, c, x, ScanMode::Sequential, 0);
}

Tensor scan_chunked(const DiscretizedPair& pair, const Tensor& c, const Tensor& x, std::size_t chunk) {
  if (chunk < 1) throw ConfigError("scan_chunked: chunk must be >= 1");
  return scan_impl(pair, c, x, ScanMode::Chunked, chunk);
}

Tensor lti_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t k) {
  if (k < 1) throw ConfigError("lti_kernel: kernel length must be >= 1");
  expect_rank("lti_kernel", "A_bar", a_bar, 2);
  const std::size_t channels = a_bar.dim(0), state = a_bar.dim(1);
  expect_shape("lti_kernel", "B_bar", b_bar, a_bar.shape());
  expect_shape("lti_kernel", "C", c, {state});
  std::vector<double> out(channels * k);
  const auto ad = a_bar.data(), bd = b_bar.data(), cd = c.data();
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state; ++n) {
      double power = 1.0;
      const double w = cd[n] * bd[d * state + n];
      for (std::size_t j = 0; j < k; ++j) {
        out[d * k + j] += w * power;
        power *= ad[d * state + n];
      }
    }
  }
  return Tensor({channels, k}, std::move(out));
}

Tensor lti_conv_apply(const Tensor& x, const Tensor& kernel) {
  expect_rank("lti_conv_apply", "x", x, 3);
  expect_rank("lti_conv_apply", "kernel", kernel, 2);
  const std::size_t batch = x.dim(0), length = x.dim(1), channels = x.dim(2);
  if (kernel.dim(0) != channels) {
    throw DimensionError("lti_conv_apply: kernel " + shape_str(kernel.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  std::size_t taps = kernel.dim(1);
  if (taps > length) {
    std::cerr << "warning: lti_conv_apply: kernel of length " << taps << " truncated to sequence length "
              << length << '\n';
    taps = length;
  }
  const std::size_t stride = kernel.dim(1);
  const auto xd = x.data(), kd = kernel.data();
  std::vector<double> y(x.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < length; ++t) {
      double* dst = y.data() + (b * length + t) * channels;
      const std::size_t reach = std::min(taps, t + 1);
      for (std::size_t j = 0; j < reach; ++j) {
        const double* src = xd.data() + (b * length + t - j) * channels;
        for (std::size_t d = 0; d < channels; ++d) dst[d] += kd[d * stride + j] * src[d];
      }
    }
  }
  return Tensor(x.shape(), std::move(y));
}

Tensor selective_scan(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& delta, const Tensor& x,
                      Discretization mode) {
  expect_rank("selective_scan", "A", a, 2);
  expect_rank("selective_scan", "x", x, 3);
  const std::size_t channels = a.dim(0), state = a.dim(1);
  const std::size_t batch = x.dim(0), length = x.dim(1);
  expect_shape("selective_scan", "x", x, {batch, length, channels});
  expect_shape("selective_scan", "delta", delta, {batch, length, channels});
  expect_shape("selective_scan", "B", b, {batch, length, state});
  expect_shape("selective_scan", "C", c, {batch, length, state});
  expect_positive("selective_scan", delta);

  const kernels::SelectiveScanDims dims{batch, length, channels, state};
  const bool euler = mode == Discretization::Euler;
  const kernels::SelectiveScanInputs in{a.data(), b.data(), c.data(), delta.data(), x.data(), euler};
  std::vector<double> y(x.numel());
  kernels::parallel::selective_scan_forward(in, y, dims);

  return Tensor::make_result(x.shape(), std::move(y), "selective_scan", {a, b, c, delta, x},
                             [dims, euler](Node& o) {
                               auto& p = o.parents;
                               const kernels::SelectiveScanInputs in{p[0]->data, p[1]->data, p[2]->data,
                                                                     p[3]->data, p[4]->data, euler};
                               // scratch for inputs that do not need a gradient
                               std::vector<std::vector<double>> scratch(5);
                               auto sink = [&](std::size_t k) -> std::span<double> {
                                 if (p[k]->requires_grad) return p[k]->grad_buffer();
                                 scratch[k].assign(p[k]->data.size(), 0.0);
                                 return scratch[k];
                               };
                               const kernels::SelectiveScanGrads grads{sink(0), sink(1), sink(2), sink(3), sink(4)};
                               kernels::parallel::selective_scan_backward(in, o.grad, grads, dims);
                             });
}

Tensor transition_from_log(const Tensor& a_log) { return ops::neg(ops::exp(a_log)); }

Tensor init_transition_log(std::size_t channels, std::size_t state) {
  std::vector<double> values(channels * state);
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state; ++n) values[d * state + n] = std::log(static_cast<double>(n + 1));
  }
  return Tensor({channels, state}, std::move(values));
}

}  // namespace ssmfuse::ssm
