// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/kernels.hpp"

namespace ssmfuse::ops {

namespace {

using detail::Node;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::vector<double> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Elementwise unary op whose derivative is a function of (input, output).
template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), name, {a}, [df](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(p.data[i], o.data[i]);
  });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = o.parents[k];
      if (!p->requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        // logistic(x), split by sign to avoid overflow
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a, [](double x) { return x * normal_cdf(x); },
      [](double x, double) {
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return normal_cdf(x) + x * pdf;
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result(Shape{}, {s}, "sum", {a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto& shape = a.shape();
  if (axis >= shape.size()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  std::vector<double> out(outer * inner, 0.0);
  const auto in = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* row = in.data() + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out) v *= inv;
  return Tensor::make_result(std::move(out_shape), std::move(out), "mean_axis", {a},
                             [outer, inner, n, inv](Node& o) {
                               Node& p = *o.parents[0];
                               if (!p.requires_grad) return;
                               auto g = p.grad_buffer();
                               for (std::size_t oo = 0; oo < outer; ++oo) {
                                 for (std::size_t k = 0; k < n; ++k) {
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     g[(oo * n + k) * inner + i] += o.grad[oo * inner + i] * inv;
                                   }
                                 }
                               }
                             });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_last: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t ca = a.shape().back();
  const std::size_t cb = b.shape().back();
  const std::size_t rows = a.numel() / ca;
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  std::vector<double> out(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * ca, ca, out.begin() + r * (ca + cb));
    std::copy_n(b.data().begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), "concat_last", {a, b},
                             [rows, ca, cb](Node& o) {
                               const std::size_t width = ca + cb;
                               if (o.parents[0]->requires_grad) {
                                 auto g = o.parents[0]->grad_buffer();
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t i = 0; i < ca; ++i) g[r * ca + i] += o.grad[r * width + i];
                                 }
                               }
                               if (o.parents[1]->requires_grad) {
                                 auto g = o.parents[1]->grad_buffer();
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t i = 0; i < cb; ++i) {
                                     g[r * cb + i] += o.grad[r * width + ca + i];
                                   }
                                 }
                               }
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), copy_data(a), "reshape", {a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.rank() == 0) throw DimensionError("log_softmax: needs at least one axis");
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.numel() / classes;
  const auto in = logits.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * classes;
    const double mx = *std::max_element(x, x + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(x[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) out[r * classes + c] = x[c] - lse;
  }
  return Tensor::make_result(logits.shape(), std::move(out), "log_softmax", {logits},
                             [rows, classes](Node& o) {
                               Node& p = *o.parents[0];
                               if (!p.requires_grad) return;
                               auto g = p.grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < classes; ++c) gs += o.grad[r * classes + c];
                                 for (std::size_t c = 0; c < classes; ++c) {
                                   const auto i = r * classes + c;
                                   g[i] += o.grad[i] - std::exp(o.data[i]) * gs;
                                 }
                               }
                             });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [rows, classes], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<int> labels(targets.begin(), targets.end());
  for (int t : labels) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                           std::to_string(classes) + ")");
    }
  }
  const auto in = logits.data();
  // keep the softmax for the backward pass
  std::vector<double> probs(in.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * classes;
    const double mx = *std::max_element(x, x + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(x[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(x[c] - lse);
    loss -= x[static_cast<std::size_t>(labels[r])] - lse;
  }
  loss /= static_cast<double>(rows);
  return Tensor::make_result(Shape{}, {loss}, "cross_entropy", {logits},
                             [rows, classes, labels = std::move(labels), probs = std::move(probs)](Node& o) {
                               Node& p = *o.parents[0];
                               if (!p.requires_grad) return;
                               auto g = p.grad_buffer();
                               const double scale = o.grad[0] / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < classes; ++c) {
                                   const auto i = r * classes + c;
                                   const double onehot = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
                                   g[i] += scale * (probs[i] - onehot);
                                 }
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t din = weight.dim(0);
  const std::size_t dout = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const kernels::MatDims dims{x.numel() / din, din, dout};
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<double> out(dims.rows * dout);
  kernels::parallel::matmul(x.data(), weight.data(), out, dims);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < dims.rows; ++r) {
      for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bd[j];
    }
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(std::move(out_shape), std::move(out), "linear", std::move(parents),
                             [dims](Node& o) {
                               Node& px = *o.parents[0];
                               Node& pw = *o.parents[1];
                               if (px.requires_grad) kernels::parallel::matmul_grad_input(o.grad, pw.data, px.grad_buffer(), dims);
                               if (pw.requires_grad) kernels::parallel::matmul_grad_weight(px.data, o.grad, pw.grad_buffer(), dims);
                               if (o.parents.size() > 2 && o.parents[2]->requires_grad) {
                                 auto gb = o.parents[2]->grad_buffer();
                                 for (std::size_t r = 0; r < dims.rows; ++r) {
                                   for (std::size_t j = 0; j < dims.cols; ++j) gb[j] += o.grad[r * dims.cols + j];
                                 }
                               }
                             });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  const std::size_t width = bias.dim(0);
  const std::size_t rows = x.numel() / width;
  auto out = copy_data(x);
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] += bd[j];
  }
  return Tensor::make_result(x.shape(), std::move(out), "add_bias", {x, bias}, [rows, width](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto g = o.parents[1]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) g[j] += o.grad[r * width + j];
      }
    }
  });
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel) {
  if (kernel.rank() != 2) throw DimensionError("conv1d_depthwise: kernel must be [D, K], got " + shape_str(kernel.shape()));
  const std::size_t width = kernel.dim(1);
  if (width % 2 == 0) throw ConfigError("conv1d_depthwise: kernel width must be odd, got " + std::to_string(width));
  if (x.rank() != 3 || x.dim(2) != kernel.dim(0)) {
    throw DimensionError("conv1d_depthwise: input " + shape_str(x.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t batch = x.dim(0), length = x.dim(1), channels = x.dim(2);
  const auto pad = static_cast<long>(width / 2);
  const auto len = static_cast<long>(length);
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (long t = 0; t < len; ++t) {
      double* dst = out.data() + (b * length + static_cast<std::size_t>(t)) * channels;
      for (std::size_t j = 0; j < width; ++j) {
        const long src_t = t + static_cast<long>(j) - pad;
        if (src_t < 0 || src_t >= len) continue;
        const double* src = xd.data() + (b * length + static_cast<std::size_t>(src_t)) * channels;
        for (std::size_t d = 0; d < channels; ++d) dst[d] += kd[d * width + j] * src[d];
      }
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), "conv1d_depthwise", {x, kernel},
                             [batch, len, length, channels, width, pad](Node& o) {
                               Node& px = *o.parents[0];
                               Node& pk = *o.parents[1];
                               std::span<double> gx, gk;
                               if (px.requires_grad) gx = px.grad_buffer();
                               if (pk.requires_grad) gk = pk.grad_buffer();
                               for (std::size_t b = 0; b < batch; ++b) {
                                 for (long t = 0; t < len; ++t) {
                                   const double* g = o.grad.data() + (b * length + static_cast<std::size_t>(t)) * channels;
                                   for (std::size_t j = 0; j < width; ++j) {
                                     const long src_t = t + static_cast<long>(j) - pad;
                                     if (src_t < 0 || src_t >= len) continue;
                                     const std::size_t src = (b * length + static_cast<std::size_t>(src_t)) * channels;
                                     for (std::size_t d = 0; d < channels; ++d) {
                                       if (!gx.empty()) gx[src + d] += pk.data[d * width + j] * g[d];
                                       if (!gk.empty()) gk[d * width + j] += px.data[src + d] * g[d];
                                     }
                                   }
                                 }
                               }
                             });
}

}  // namespace ssmfuse::ops
