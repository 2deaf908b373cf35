// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ssmfuse/rng.hpp"
#include "ssmfuse/tensor.hpp"

namespace ssmfuse {

/// Optimizer groups; the fusion group has its own peak learning rate.
inline constexpr const char* kGroupDefault = "default";
inline constexpr const char* kGroupFusion = "fusion";

struct NamedParam {
  std::string name;
  Tensor tensor;
  std::string group = kGroupDefault;
  bool decay = true;  // decoupled weight decay applies
};

using ParamList = std::vector<NamedParam>;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) trainable weight.
Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in);

std::size_t count_scalars(const ParamList& params);

}  // namespace ssmfuse
