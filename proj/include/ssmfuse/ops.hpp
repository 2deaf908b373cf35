// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "ssmfuse/tensor.hpp"

// Differentiable primitives. Shapes must match exactly; the only broadcast
// is the bias in linear()/add_bias().
namespace ssmfuse::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);

/// ln(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|).
Tensor softplus(const Tensor& a);
/// x * Phi(x) with the exact normal CDF.
Tensor gelu(const Tensor& a);

/// Sum of all elements as a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over one axis; the axis is removed from the shape.
Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);

/// Row-wise log-softmax over the last axis.
Tensor log_softmax(const Tensor& logits);
/// Mean negative log-likelihood of integer targets; logits are [rows, classes].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// y[..., j] = sum_i x[..., i] W[i, j] (+ bias[j]). Pass an undefined tensor
/// for no bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());
/// x[..., j] + bias[j].
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// Per-channel convolution along the sequence axis of x [B, L, D] with
/// kernel [D, K], K odd, zero padded to keep length L.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel);

}  // namespace ssmfuse::ops
