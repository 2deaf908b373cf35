// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/model.hpp"

#include <sstream>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/ops.hpp"

namespace ssmfuse::model {

namespace {

struct AblationName {
  Ablation value;
  const char* name;
};

constexpr AblationName kAblations[] = {
    {Ablation::None, "none"},
    {Ablation::SeparateA, "separate-A"},
    {Ablation::MlpFusion, "mlp-fusion"},
    {Ablation::UnimodalV, "unimodal-V"},
    {Ablation::UnimodalT, "unimodal-T"},
};

bool is_encoder(const std::string& name) { return name.starts_with("enc_"); }
bool is_head(const std::string& name) { return name.starts_with("head."); }

std::size_t encoder_params(std::size_t raw, std::size_t d, std::size_t k) { return raw * d + d + d * d + d + d * k; }
std::size_t encoder_macs(std::size_t raw, std::size_t d, std::size_t k) { return raw * d + d * d + d * k; }

std::size_t branch_params(const fusion::BlockConfig& b) {
  const std::size_t d = b.model, n = b.state;
  const std::size_t delta = b.delta_rank == 0 ? d * d : 2 * d * b.delta_rank;
  return d * n + d * n + delta + d + d;
}

std::size_t branch_macs(const fusion::BlockConfig& b) {
  const std::size_t d = b.model, n = b.state;
  const std::size_t delta = b.delta_rank == 0 ? d * d : 2 * d * b.delta_rank;
  return 2 * d * n + delta + 3 * d * n + d * n;
}

}  // namespace

std::string ablation_name(Ablation a) {
  for (const auto& e : kAblations) {
    if (e.value == a) return e.name;
  }
  return "none";
}

Ablation parse_ablation(const std::string& name) {
  for (const auto& e : kAblations) {
    if (name == e.name) return e.value;
  }
  throw ConfigError("unknown ablation '" + name + "' (expected none, separate-A, mlp-fusion, unimodal-V, unimodal-T)");
}

fusion::BlockConfig ModelConfig::effective_block() const {
  auto b = block;
  switch (ablation) {
    case Ablation::None: b.separate_a = false; break;
    case Ablation::SeparateA: b.separate_a = true; break;
    case Ablation::MlpFusion: b.depth = 0; break;
    case Ablation::UnimodalV: b.use_text = false; break;
    case Ablation::UnimodalT: b.use_video = false; break;
  }
  return b;
}

Model init_model(const ModelConfig& config, Rng& rng) {
  if (config.verbs < 1 || config.nouns < 1) throw ConfigError("vocabulary sizes must be positive");
  if (config.ablation != Ablation::MlpFusion && config.block.depth < 1) {
    throw ConfigError("fusion depth must be at least 1");
  }
  Model m;
  m.config = config;
  m.block = fusion::init_block(config.effective_block(), rng);
  const std::size_t d = config.block.model;
  if (config.ablation == Ablation::MlpFusion) {
    const std::size_t h = config.hidden();
    m.mlp = MlpFusion{init_uniform(rng, {2 * d, h}, 2 * d), Tensor::zeros({h}, true), init_uniform(rng, {h, d}, h),
                      Tensor::zeros({d}, true)};
  }
  m.heads.w_verb = init_uniform(rng, {d, config.verbs}, d);
  m.heads.b_verb = Tensor::zeros({config.verbs}, true);
  m.heads.w_noun = init_uniform(rng, {d, config.nouns}, d);
  m.heads.b_noun = Tensor::zeros({config.nouns}, true);
  return m;
}

ActionScores classify(const Tensor& fused, const Heads& heads) {
  return {ops::linear(fused, heads.w_verb, heads.b_verb), ops::linear(fused, heads.w_noun, heads.b_noun)};
}

std::vector<std::pair<int, int>> predict_action(const ActionScores& scores) {
  const auto argmax_rows = [](const Tensor& t) {
    const std::size_t cols = t.shape().back();
    const std::size_t rows = t.numel() / cols;
    const auto d = t.data();
    std::vector<int> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < cols; ++c) {
        if (d[r * cols + c] > d[r * cols + best]) best = c;
      }
      out[r] = static_cast<int>(best);
    }
    return out;
  };
  const auto v = argmax_rows(scores.verb_logits);
  const auto n = argmax_rows(scores.noun_logits);
  if (v.size() != n.size()) throw DimensionError("predict_action: verb and noun batches differ");
  std::vector<std::pair<int, int>> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = {v[i], n[i]};
  return out;
}

Tensor mlp_fusion_baseline(const Tensor& x_v, const Tensor& x_t, const MlpFusion& params) {
  const auto pooled = ops::concat_last(ops::mean_axis(x_v, 1), ops::mean_axis(x_t, 1));
  return ops::linear(ops::gelu(ops::linear(pooled, params.w1, params.b1)), params.w2, params.b2);
}

Tensor fused_features(const Model& model, const Tensor& raw_v, const Tensor& raw_t,
                      const fusion::ForwardOptions& options) {
  const auto out = fusion::block_forward(raw_v, raw_t, model.block, options);
  if (model.mlp) return mlp_fusion_baseline(out.y_v, out.y_t, *model.mlp);
  return fusion::pool_and_sum(out.y_v, out.y_t);
}

ActionScores forward(const Model& model, const Tensor& raw_v, const Tensor& raw_t,
                     const fusion::ForwardOptions& options) {
  return classify(fused_features(model, raw_v, raw_t, options), model.heads);
}

Tensor action_loss(const ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns) {
  return ops::add(ops::cross_entropy(scores.verb_logits, verbs), ops::cross_entropy(scores.noun_logits, nouns));
}

ParamList model_parameters(const Model& model) {
  auto out = fusion::block_parameters(model.block);
  if (model.mlp) {
    out.push_back({"mlp.w1", model.mlp->w1, kGroupDefault, true});
    out.push_back({"mlp.b1", model.mlp->b1, kGroupDefault, false});
    out.push_back({"mlp.w2", model.mlp->w2, kGroupDefault, true});
    out.push_back({"mlp.b2", model.mlp->b2, kGroupDefault, false});
  }
  out.push_back({"head.w_verb", model.heads.w_verb, kGroupDefault, true});
  out.push_back({"head.b_verb", model.heads.b_verb, kGroupDefault, false});
  out.push_back({"head.w_noun", model.heads.w_noun, kGroupDefault, true});
  out.push_back({"head.b_noun", model.heads.b_noun, kGroupDefault, false});
  return out;
}

ParamList scoped_parameters(const Model& model, CountScope scope) {
  ParamList out;
  for (auto& p : model_parameters(model)) {
    if (is_encoder(p.name) && !scope.encoders) continue;
    if (is_head(p.name) && !scope.heads) continue;
    out.push_back(std::move(p));
  }
  return out;
}

CountReport count_params_flops(const ModelConfig& config, CountScope scope) {
  const auto b = config.effective_block();
  const std::size_t d = b.model, n = b.state, k = b.conv_width;
  const std::size_t branches = (b.use_video ? 1 : 0) + (b.use_text ? 1 : 0);
  CountReport r;
  const auto add = [&](std::string name, std::size_t params, std::size_t macs) {
    r.rows.push_back({std::move(name), params, 2 * macs});
  };
  if (scope.encoders) {
    if (b.use_video) add("encoder.video", encoder_params(b.raw_v, d, k), encoder_macs(b.raw_v, d, k));
    if (b.use_text) add("encoder.text", encoder_params(b.raw_t, d, k), encoder_macs(b.raw_t, d, k));
  }
  for (std::size_t layer = 0; layer < b.depth; ++layer) {
    const std::string prefix = "fusion." + std::to_string(layer);
    const std::size_t transitions = (b.separate_a && branches == 2) ? 2 : 1;
    add(prefix + ".A", transitions * d * n, 0);
    if (b.use_video) add(prefix + ".video", branch_params(b), branch_macs(b));
    if (b.use_text) add(prefix + ".text", branch_params(b), branch_macs(b));
  }
  if (config.ablation == Ablation::MlpFusion) {
    const std::size_t h = config.hidden();
    add("mlp", 2 * d * h + h + h * d + d, 2 * d * h + h * d);
  }
  if (scope.heads) add("heads", d * config.verbs + config.verbs + d * config.nouns + config.nouns,
                       d * (config.verbs + config.nouns));
  for (const auto& row : r.rows) {
    r.params += row.params;
    r.flops_per_token += row.flops_per_token;
  }
  return r;
}

std::size_t transformer_fusion_params(std::size_t model, std::size_t layers) {
  return layers * (4 * model * model + 8 * model * model);
}

std::size_t transformer_fusion_flops_per_token(std::size_t model, std::size_t layers) {
  return 2 * transformer_fusion_params(model, layers);
}

CountReport comparison_report(const ModelConfig& config) {
  CountReport r;
  auto fused = config;
  fused.ablation = Ablation::None;
  const auto f = count_params_flops(fused);
  r.rows.push_back({"ssm-fusion", f.params, f.flops_per_token});
  auto mlp = config;
  mlp.ablation = Ablation::MlpFusion;
  const auto m = count_params_flops(mlp);
  r.rows.push_back({"mlp-fusion", m.params, m.flops_per_token});
  const std::size_t d = config.block.model;
  r.rows.push_back({"transformer-fusion-6", transformer_fusion_params(d), transformer_fusion_flops_per_token(d)});
  return r;
}

std::string CountReport::to_text() const {
  std::ostringstream os;
  std::size_t width = 9;
  for (const auto& row : rows) width = std::max(width, row.component.size());
  const auto pad = [&](const std::string& s) { return s + std::string(width - s.size() + 2, ' '); };
  os << pad("component") << "params  flops_per_token\n";
  for (const auto& row : rows) os << pad(row.component) << row.params << "  " << row.flops_per_token << "\n";
  if (rows.size() > 1 && (params > 0 || flops_per_token > 0)) {
    os << pad("total") << params << "  " << flops_per_token << "\n";
  }
  return os.str();
}

std::string CountReport::to_csv() const {
  std::ostringstream os;
  os << "component,params,flops_per_token\n";
  for (const auto& row : rows) os << row.component << "," << row.params << "," << row.flops_per_token << "\n";
  if (params > 0 || flops_per_token > 0) os << "total," << params << "," << flops_per_token << "\n";
  return os.str();
}

}  // namespace ssmfuse::model
