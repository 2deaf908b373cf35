// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssmfuse/fusion.hpp"
#include "ssmfuse/params.hpp"
#include "ssmfuse/tensor.hpp"

// Classification heads, ablation baselines and closed-form parameter/FLOP
// accounting around the fusion block.
namespace ssmfuse::model {

enum class Ablation { None, SeparateA, MlpFusion, UnimodalV, UnimodalT };

std::string ablation_name(Ablation a);
/// Accepts none, separate-A, mlp-fusion, unimodal-V, unimodal-T.
Ablation parse_ablation(const std::string& name);

struct ModelConfig {
  fusion::BlockConfig block;
  std::size_t verbs = 8;       // Vv
  std::size_t nouns = 12;      // Vn
  std::size_t mlp_hidden = 0;  // hidden width of the MLP-fusion baseline; 0 = 4D
  Ablation ablation = Ablation::None;

  /// Block configuration with the ablation applied.
  fusion::BlockConfig effective_block() const;
  std::size_t hidden() const { return mlp_hidden == 0 ? 4 * block.model : mlp_hidden; }

  bool operator==(const ModelConfig&) const = default;
};

struct Heads {
  Tensor w_verb, b_verb;  // [D, Vv], [Vv]
  Tensor w_noun, b_noun;  // [D, Vn], [Vn]
};

/// Two-layer MLP over the concatenated pooled modalities: 2D -> H -> D.
struct MlpFusion {
  Tensor w1, b1;  // [2D, H], [H]
  Tensor w2, b2;  // [H, D], [D]
};

struct Model {
  ModelConfig config;
  fusion::FusionBlock block;
  std::optional<MlpFusion> mlp;
  Heads heads;
};

struct ActionScores {
  Tensor verb_logits;  // [B, Vv]
  Tensor noun_logits;  // [B, Vn]
};

Model init_model(const ModelConfig& config, Rng& rng);

/// Two independent linear maps from the fused vector [B, D].
ActionScores classify(const Tensor& fused, const Heads& heads);

/// Independent argmax per head; ties go to the lowest index.
std::vector<std::pair<int, int>> predict_action(const ActionScores& scores);

/// Mean-pools each encoded modality, concatenates to [B, 2D] and applies
/// the two-layer MLP (GELU between layers) to get [B, D].
Tensor mlp_fusion_baseline(const Tensor& x_v, const Tensor& x_t, const MlpFusion& params);

/// The fused [B, D] vector for any ablation, from raw features.
Tensor fused_features(const Model& model, const Tensor& raw_v, const Tensor& raw_t,
                      const fusion::ForwardOptions& options = {});

ActionScores forward(const Model& model, const Tensor& raw_v, const Tensor& raw_t,
                     const fusion::ForwardOptions& options = {});

/// CE(verb) + CE(noun), each averaged over the batch.
Tensor action_loss(const ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns);

ParamList model_parameters(const Model& model);

struct CountScope {
  bool encoders = false;
  bool heads = false;
};

struct CountRow {
  std::string component;
  std::size_t params = 0;
  std::size_t flops_per_token = 0;
};

struct CountReport {
  std::vector<CountRow> rows;
  std::size_t params = 0;
  std::size_t flops_per_token = 0;

  std::string to_text() const;
  std::string to_csv() const;
};

/// Closed-form counts from the configuration. 1 MAC = 2 FLOPs; the scan costs
/// 3 MACs per (token, d, n) plus N MACs per output element. Pooled stages
/// (MLP fusion, heads) run once per sample and are charged to one token.
CountReport count_params_flops(const ModelConfig& config, CountScope scope = {});

/// Parameters of an L-layer transformer fusion at width D: L * (4D^2 + 8D^2).
std::size_t transformer_fusion_params(std::size_t model, std::size_t layers = 6);
std::size_t transformer_fusion_flops_per_token(std::size_t model, std::size_t layers = 6);

/// Shared-A fusion, MLP fusion and 6-layer transformer fusion at the same D,
/// excluding encoders and heads.
CountReport comparison_report(const ModelConfig& config);

/// Parameters that count_params_flops would count for `scope`, found by
/// walking the instantiated model.
ParamList scoped_parameters(const Model& model, CountScope scope);

}  // namespace ssmfuse::model
