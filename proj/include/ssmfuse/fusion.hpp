// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssmfuse/params.hpp"
#include "ssmfuse/rng.hpp"
#include "ssmfuse/ssm.hpp"
#include "ssmfuse/tensor.hpp"

// Two modality branches that discretize against one shared transition A.
// Each branch has its own pre-encoder (MLP then depthwise conv) and its own
// selective projections for B, C and delta.
namespace ssmfuse::fusion {

enum class Modality { Video, Text };

/// MLP (Draw -> D, GELU, D -> D) followed by a depthwise conv of width K.
struct Encoder {
  Tensor w1, b1;  // [Draw, D], [D]
  Tensor w2, b2;  // [D, D], [D]
  Tensor conv;    // [D, K]
};

/// Input-dependent projections of one branch. B and C are bias-free.
/// delta = softplus(delta_base + x W_delta + b_delta); with a low-rank
/// setting W_delta is the product delta_down [D, r] * delta_up [r, D].
struct SsmProjection {
  Tensor w_b;         // [D, N]
  Tensor w_c;         // [D, N]
  Tensor w_delta;     // [D, D], undefined when low rank
  Tensor delta_down;  // [D, r], low rank only
  Tensor delta_up;    // [r, D], low rank only
  Tensor b_delta;     // [D]
  Tensor delta_base;  // [D]
};

struct Selective {
  Tensor b;      // [B, S, N]
  Tensor c;      // [B, S, N]
  Tensor delta;  // [B, S, D]
};

struct FusionLayer {
  Tensor a_log;    // [D, N]; A = -exp(a_log)
  Tensor a_log_t;  // separate-A ablation only: the text branch's own transition
  std::optional<SsmProjection> video;
  std::optional<SsmProjection> text;

  /// The transition parameter a branch discretizes against.
  const Tensor& transition_log(Modality m) const;
};

struct BlockConfig {
  std::size_t raw_v = 32;   // Draw of the video features
  std::size_t raw_t = 32;   // Draw of the text features
  std::size_t model = 64;   // D
  std::size_t state = 16;   // N
  std::size_t conv_width = 3;
  std::size_t depth = 1;  // 0 keeps only the encoders
  std::size_t delta_rank = 0;  // 0 = full D x D
  bool separate_a = false;
  bool use_video = true;
  bool use_text = true;
  ssm::Discretization discretization = ssm::Discretization::Zoh;
  std::size_t chunk = 0;  // 0 = fused selective scan, else chunked scan of this size

  bool operator==(const BlockConfig&) const = default;
};

struct FusionBlock {
  BlockConfig config;
  std::optional<Encoder> enc_v;
  std::optional<Encoder> enc_t;
  std::vector<FusionLayer> layers;
};

/// Blocks the gradient path from one branch into A (the branch sees a
/// detached copy of the transition).
struct ForwardOptions {
  bool block_a_video = false;
  bool block_a_text = false;
};

Encoder init_encoder(Rng& rng, std::size_t raw, std::size_t model, std::size_t conv_width);
SsmProjection init_projection(Rng& rng, std::size_t model, std::size_t state, std::size_t delta_rank);
FusionBlock init_block(const BlockConfig& config, Rng& rng);

/// Conv1d(MLP(x_raw)); x_raw [B, S, Draw] -> [B, S, D].
Tensor encode_modality(const Tensor& x_raw, const Encoder& encoder);

/// x [B, S, D] -> B [B, S, N], C [B, S, N], delta [B, S, D] (strictly positive).
Selective project_selective(const Tensor& x, const SsmProjection& proj);

/// Selective projections, discretization against a_log and scan for one
/// branch: x [B, S, D] -> y [B, S, D].
Tensor branch_forward(const Tensor& x, const SsmProjection& proj, const Tensor& a_log, const BlockConfig& config);

struct FusionOutput {
  Tensor y_v;  // [B, F, D]
  Tensor y_t;  // [B, L, D]
};

/// Runs both branches through every layer on already encoded inputs.
FusionOutput fusion_forward(const Tensor& x_v, const Tensor& x_t, const FusionBlock& block,
                            const ForwardOptions& options = {});

/// Encoders then fusion_forward on raw features. Missing modalities (unimodal
/// configurations) give an undefined output tensor.
FusionOutput block_forward(const Tensor& raw_v, const Tensor& raw_t, const FusionBlock& block,
                           const ForwardOptions& options = {});

/// mean over the sequence axis of each modality, then their sum: [B, D].
Tensor pool_and_sum(const Tensor& y_v, const Tensor& y_t);

/// Trainable tensors of the block with names, groups and decay flags.
ParamList block_parameters(const FusionBlock& block);

struct DecompositionReport {
  double max_deviation = 0.0;   // |both - (video only + text only)|, max over A entries
  double grad_norm_both = 0.0;  // Frobenius norm of the combined A gradient
  double grad_norm_video = 0.0;
  double grad_norm_text = 0.0;
  bool ok = false;
};

/// Loss as a function of the two branch outputs.
using BranchLoss = std::function<Tensor(const FusionOutput&)>;

/// Computes dL/dA three times: with both branches live, with the text
/// branch's path into A blocked, and with the video branch's blocked, and
/// checks that the first equals the sum of the other two within `tolerance`.
/// Works on the first layer's A. Throws ContractError in separate-A mode.
DecompositionReport shared_grad_decomposition_check(const FusionBlock& block, const Tensor& raw_v, const Tensor& raw_t,
                                                    const BranchLoss& loss, double tolerance = 1e-10);

}  // namespace ssmfuse::fusion
