// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/fusion.hpp"
#include "ssmfuse/ops.hpp"
#include "ssmfuse/rng.hpp"

namespace ssmfuse {

std::vector<double> numeric_gradient(Tensor& param, const std::function<double()>& loss, double step) {
  NoGradGuard no_grad;
  auto values = param.mutable_data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = loss();
    values[i] = saved - step;
    const double down = loss();
    values[i] = saved;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("gradient_relative_error: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " entries");
  }
  double worst = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return worst / scale;
}

namespace {

Tensor random_input(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

}  // namespace

std::string GradcheckReport::to_text() const {
  std::ostringstream out;
  out << std::left << std::setw(12) << "config" << std::setw(28) << "parameter" << std::right << std::setw(8) << "size"
      << std::setw(14) << "max_rel_err" << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(12) << r.config << std::setw(28) << r.param << std::right << std::setw(8) << r.size
        << std::setw(14) << std::scientific << std::setprecision(3) << r.rel_error << std::defaultfloat << '\n';
  }
  out << "worst " << std::scientific << std::setprecision(3) << max_rel_error << '\n';
  return out.str();
}

GradcheckReport fusion_gradcheck_suite(std::uint64_t seed, double step) {
  constexpr std::size_t kBatch = 2, kFrames = 8, kTokens = 6, kRaw = 5;
  fusion::BlockConfig base;
  base.raw_v = kRaw;
  base.raw_t = kRaw;
  base.model = 8;
  base.state = 4;

  std::vector<std::pair<std::string, fusion::BlockConfig>> variants;
  auto shared = base;
  shared.depth = 2;
  variants.emplace_back("shared", shared);
  auto separate = base;
  separate.separate_a = true;
  variants.emplace_back("separate-A", separate);
  auto euler = base;
  euler.discretization = ssm::Discretization::Euler;
  variants.emplace_back("euler", euler);
  auto low_rank = base;
  low_rank.delta_rank = 2;
  variants.emplace_back("low-rank", low_rank);
  auto chunked = base;
  chunked.chunk = 4;
  variants.emplace_back("chunked", chunked);

  GradcheckReport report;
  Rng rng(seed);
  for (const auto& [label, config] : variants) {
    const auto block = fusion::init_block(config, rng);
    const auto raw_v = random_input(rng, {kBatch, kFrames, kRaw});
    const auto raw_t = random_input(rng, {kBatch, kTokens, kRaw});
    const auto w_v = random_input(rng, {kBatch, kFrames, config.model});
    const auto w_t = random_input(rng, {kBatch, kTokens, config.model});
    auto loss = [&] {
      const auto out = fusion::block_forward(raw_v, raw_t, block);
      return ops::add(weighted_sum(out.y_v, w_v), weighted_sum(out.y_t, w_t));
    };
    auto params = fusion::block_parameters(block);
    for (auto& p : params) p.tensor.zero_grad();
    backward(loss());
    for (auto& p : params) {
      std::vector<double> analytic(p.tensor.numel(), 0.0);
      if (p.tensor.has_grad()) analytic.assign(p.tensor.grad().begin(), p.tensor.grad().end());
      const auto numeric = numeric_gradient(p.tensor, [&] { return loss().item(); }, step);
      const double err = gradient_relative_error(analytic, numeric);
      report.rows.push_back({label, p.name, p.tensor.numel(), err});
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  return report;
}

}  // namespace ssmfuse
