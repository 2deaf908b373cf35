// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/fusion.hpp"

#include <cmath>
#include <string>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/ops.hpp"

namespace ssmfuse {

Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

std::size_t count_scalars(const ParamList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

}  // namespace ssmfuse

namespace ssmfuse::fusion {

namespace {

constexpr double kDeltaMin = 1e-3;
constexpr double kDeltaMax = 1e-1;

// x such that softplus(x) = y
double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

void add_projection(ParamList& out, const std::string& prefix, const SsmProjection& p) {
  out.push_back({prefix + ".w_b", p.w_b, kGroupFusion, true});
  out.push_back({prefix + ".w_c", p.w_c, kGroupFusion, true});
  if (p.w_delta.defined()) {
    out.push_back({prefix + ".w_delta", p.w_delta, kGroupFusion, true});
  } else {
    out.push_back({prefix + ".delta_down", p.delta_down, kGroupFusion, true});
    out.push_back({prefix + ".delta_up", p.delta_up, kGroupFusion, true});
  }
  out.push_back({prefix + ".b_delta", p.b_delta, kGroupFusion, false});
  out.push_back({prefix + ".delta_base", p.delta_base, kGroupFusion, false});
}

void add_encoder(ParamList& out, const std::string& prefix, const Encoder& e) {
  out.push_back({prefix + ".w1", e.w1, kGroupDefault, true});
  out.push_back({prefix + ".b1", e.b1, kGroupDefault, false});
  out.push_back({prefix + ".w2", e.w2, kGroupDefault, true});
  out.push_back({prefix + ".b2", e.b2, kGroupDefault, false});
  out.push_back({prefix + ".conv", e.conv, kGroupDefault, true});
}

double frobenius(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

const Tensor& FusionLayer::transition_log(Modality m) const {
  if (m == Modality::Text && a_log_t.defined()) return a_log_t;
  return a_log;
}

Encoder init_encoder(Rng& rng, std::size_t raw, std::size_t model, std::size_t conv_width) {
  if (conv_width % 2 == 0) throw ConfigError("encoder conv width must be odd, got " + std::to_string(conv_width));
  Encoder e;
  e.w1 = init_uniform(rng, {raw, model}, raw);
  e.b1 = Tensor::zeros({model}, true);
  e.w2 = init_uniform(rng, {model, model}, model);
  e.b2 = Tensor::zeros({model}, true);
  // start near the identity tap so the conv does not scramble the MLP output
  std::vector<double> k(model * conv_width);
  for (std::size_t d = 0; d < model; ++d) {
    for (std::size_t j = 0; j < conv_width; ++j) {
      k[d * conv_width + j] = (j == conv_width / 2 ? 1.0 : 0.0) + rng.uniform(-0.1, 0.1);
    }
  }
  e.conv = Tensor({model, conv_width}, std::move(k), true);
  return e;
}

SsmProjection init_projection(Rng& rng, std::size_t model, std::size_t state, std::size_t delta_rank) {
  SsmProjection p;
  p.w_b = init_uniform(rng, {model, state}, model);
  p.w_c = init_uniform(rng, {model, state}, model);
  if (delta_rank == 0) {
    p.w_delta = init_uniform(rng, {model, model}, model);
  } else {
    p.delta_down = init_uniform(rng, {model, delta_rank}, model);
    p.delta_up = init_uniform(rng, {delta_rank, model}, delta_rank);
  }
  p.b_delta = Tensor::zeros({model}, true);
  std::vector<double> base(model);
  const double lo = std::log(kDeltaMin), hi = std::log(kDeltaMax);
  for (auto& b : base) b = inverse_softplus(std::exp(rng.uniform(lo, hi)));
  p.delta_base = Tensor({model}, std::move(base), true);
  return p;
}

FusionBlock init_block(const BlockConfig& config, Rng& rng) {
  if (!config.use_video && !config.use_text) throw ConfigError("fusion block needs at least one modality");
  if (config.model < 1 || config.state < 1) throw ConfigError("model and state dimensions must be positive");
  if (config.delta_rank > config.model) throw ConfigError("delta rank exceeds the model dimension");
  FusionBlock block;
  block.config = config;
  if (config.use_video) block.enc_v = init_encoder(rng, config.raw_v, config.model, config.conv_width);
  if (config.use_text) block.enc_t = init_encoder(rng, config.raw_t, config.model, config.conv_width);
  for (std::size_t i = 0; i < config.depth; ++i) {
    FusionLayer layer;
    layer.a_log = ssm::init_transition_log(config.model, config.state);
    layer.a_log.set_requires_grad(true);
    if (config.separate_a && config.use_video && config.use_text) {
      layer.a_log_t = ssm::init_transition_log(config.model, config.state);
      layer.a_log_t.set_requires_grad(true);
    }
    if (config.use_video) layer.video = init_projection(rng, config.model, config.state, config.delta_rank);
    if (config.use_text) layer.text = init_projection(rng, config.model, config.state, config.delta_rank);
    block.layers.push_back(std::move(layer));
  }
  return block;
}

Tensor encode_modality(const Tensor& x_raw, const Encoder& encoder) {
  if (x_raw.rank() != 3) throw DimensionError("encode_modality: input must be [B, S, Draw], got " + shape_str(x_raw.shape()));
  const auto hidden = ops::gelu(ops::linear(x_raw, encoder.w1, encoder.b1));
  return ops::conv1d_depthwise(ops::linear(hidden, encoder.w2, encoder.b2), encoder.conv);
}

Selective project_selective(const Tensor& x, const SsmProjection& proj) {
  Tensor pre;
  if (proj.w_delta.defined()) {
    pre = ops::linear(x, proj.w_delta, proj.b_delta);
  } else {
    pre = ops::linear(ops::linear(x, proj.delta_down), proj.delta_up, proj.b_delta);
  }
  return {ops::linear(x, proj.w_b), ops::linear(x, proj.w_c), ops::softplus(ops::add_bias(pre, proj.delta_base))};
}

Tensor branch_forward(const Tensor& x, const SsmProjection& proj, const Tensor& a_log, const BlockConfig& config) {
  const auto sel = project_selective(x, proj);
  const auto a = ssm::transition_from_log(a_log);
  if (config.chunk == 0) return ssm::selective_scan(a, sel.b, sel.c, sel.delta, x, config.discretization);
  const auto pair = ssm::zoh_discretize(a, sel.b, sel.delta, config.discretization);
  return ssm::scan_chunked(pair, sel.c, x, config.chunk);
}

FusionOutput fusion_forward(const Tensor& x_v, const Tensor& x_t, const FusionBlock& block,
                            const ForwardOptions& options) {
  const auto& cfg = block.config;
  const auto check = [&](const Tensor& x, const char* name) {
    if (x.rank() != 3 || x.dim(2) != cfg.model) {
      throw ConfigError(std::string("fusion_forward: ") + name + " has shape " + shape_str(x.shape()) +
                        ", model dimension is " + std::to_string(cfg.model));
    }
  };
  FusionOutput out{x_v, x_t};
  if (cfg.use_video) check(x_v, "x_V");
  if (cfg.use_text) check(x_t, "x_T");
  for (const auto& layer : block.layers) {
    if (layer.video) {
      const auto& a = layer.transition_log(Modality::Video);
      out.y_v = branch_forward(out.y_v, *layer.video, options.block_a_video ? a.detach() : a, cfg);
    }
    if (layer.text) {
      const auto& a = layer.transition_log(Modality::Text);
      out.y_t = branch_forward(out.y_t, *layer.text, options.block_a_text ? a.detach() : a, cfg);
    }
  }
  return out;
}

FusionOutput block_forward(const Tensor& raw_v, const Tensor& raw_t, const FusionBlock& block,
                           const ForwardOptions& options) {
  const Tensor x_v = block.enc_v ? encode_modality(raw_v, *block.enc_v) : Tensor();
  const Tensor x_t = block.enc_t ? encode_modality(raw_t, *block.enc_t) : Tensor();
  return fusion_forward(x_v, x_t, block, options);
}

Tensor pool_and_sum(const Tensor& y_v, const Tensor& y_t) {
  if (!y_v.defined()) return ops::mean_axis(y_t, 1);
  if (!y_t.defined()) return ops::mean_axis(y_v, 1);
  return ops::add(ops::mean_axis(y_v, 1), ops::mean_axis(y_t, 1));
}

ParamList block_parameters(const FusionBlock& block) {
  ParamList out;
  if (block.enc_v) add_encoder(out, "enc_v", *block.enc_v);
  if (block.enc_t) add_encoder(out, "enc_t", *block.enc_t);
  for (std::size_t i = 0; i < block.layers.size(); ++i) {
    const auto& layer = block.layers[i];
    const std::string prefix = "fusion." + std::to_string(i);
    out.push_back({prefix + ".a_log", layer.a_log, kGroupFusion, false});
    if (layer.a_log_t.defined()) out.push_back({prefix + ".a_log_t", layer.a_log_t, kGroupFusion, false});
    if (layer.video) add_projection(out, prefix + ".video", *layer.video);
    if (layer.text) add_projection(out, prefix + ".text", *layer.text);
  }
  return out;
}

DecompositionReport shared_grad_decomposition_check(const FusionBlock& block, const Tensor& raw_v, const Tensor& raw_t,
                                                    const BranchLoss& loss, double tolerance) {
  if (block.config.separate_a) throw ContractError("shared_grad_decomposition_check: block uses separate transitions");
  if (!block.config.use_video || !block.config.use_text) {
    throw ContractError("shared_grad_decomposition_check: both modalities are required");
  }
  auto params = block_parameters(block);
  Tensor a_log = block.layers.front().a_log;
  const auto grad_a = [&](ForwardOptions options) {
    for (auto& p : params) p.tensor.zero_grad();
    backward(loss(block_forward(raw_v, raw_t, block, options)));
    std::vector<double> g(a_log.numel(), 0.0);
    if (a_log.has_grad()) g.assign(a_log.grad().begin(), a_log.grad().end());
    return g;
  };
  const auto both = grad_a({});
  const auto video_only = grad_a({.block_a_video = false, .block_a_text = true});
  const auto text_only = grad_a({.block_a_video = true, .block_a_text = false});
  for (auto& p : params) p.tensor.zero_grad();

  DecompositionReport r;
  for (std::size_t i = 0; i < both.size(); ++i) {
    r.max_deviation = std::max(r.max_deviation, std::abs(both[i] - (video_only[i] + text_only[i])));
  }
  r.grad_norm_both = frobenius(both);
  r.grad_norm_video = frobenius(video_only);
  r.grad_norm_text = frobenius(text_only);
  r.ok = r.max_deviation <= tolerance;
  return r;
}

}  // namespace ssmfuse::fusion
