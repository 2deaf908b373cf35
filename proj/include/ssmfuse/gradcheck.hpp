// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ssmfuse/tensor.hpp"

namespace ssmfuse {

/// Central finite differences of `loss` with respect to every element of the
/// leaf `param`. `loss` is re-evaluated from scratch for each perturbation,
/// so it never touches the reverse-mode machinery under test.
std::vector<double> numeric_gradient(Tensor& param, const std::function<double()>& loss, double step = 1e-5);

/// max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, floor).
/// Scaling by the largest entry keeps near-zero components from dominating.
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                               double floor = 1e-12);

struct GradcheckRow {
  std::string config;  // block variant
  std::string param;
  std::size_t size = 0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double max_rel_error = 0.0;

  bool ok(double tolerance = 1e-4) const { return max_rel_error <= tolerance; }
  std::string to_text() const;
};

/// Checks every parameter of a fusion block (B=2, F=8, L=6, D=8, N=4) against
/// central differences, over the shared, separate-A, Euler, low-rank delta and
/// chunked-scan variants. The loss is a fixed random weighting of both
/// branch outputs, so no gradient entry is structurally zero.
GradcheckReport fusion_gradcheck_suite(std::uint64_t seed, double step = 1e-5);

}  // namespace ssmfuse
