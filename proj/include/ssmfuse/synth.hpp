// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ssmfuse/qa.hpp"
#include "ssmfuse/tensor.hpp"

// Desk-scale multimodal classification tasks with controlled cross-modal
// structure. A latent verb v lives only in the video features and a latent
// noun n only in the text tokens.
namespace ssmfuse::synth {

enum class Mode {
  Factored,  // verb label = v, noun label = n
  Composed,  // verb label = (v + n) mod Vv, noun label = n
};

std::string mode_name(Mode m);
/// Accepts factored or composed; throws ConfigError otherwise.
Mode parse_mode(const std::string& name);

struct SynthConfig {
  std::size_t frames = 32;    // F
  std::size_t text_len = 24;  // L
  std::size_t raw = 32;       // Draw for both modalities
  std::size_t verbs = 8;      // Vv
  std::size_t nouns = 12;     // Vn
  std::size_t k_v = 4;        // prototype copies per clip
  double noise = 0.5;         // std of the background frames
  Mode mode = Mode::Factored;
  std::uint64_t world_seed = 20240601;  // codebook and text embedding table

  bool operator==(const SynthConfig&) const = default;
};

/// Throws ConfigError for zero sizes, k_v > F, negative noise.
void validate(const SynthConfig& config);

struct SynthSample {
  std::uint64_t seed = 0;
  std::vector<double> x_v;  // [F, Draw]
  std::vector<int> tokens;  // [L]
  int verb = 0;
  int noun = 0;
  int latent_verb = 0;  // v, carried by the video

  bool operator==(const SynthSample&) const = default;
};

/// Everything shared by all samples of a config: verb/noun words, the
/// vocabulary of the stub questions, the video codebook and the frozen text
/// embedding table.
struct World {
  std::vector<std::string> verb_words;
  std::vector<std::string> noun_words;
  qa::Vocab vocab;
  std::vector<double> codebook;   // [Vv, Draw]
  std::vector<double> embedding;  // [vocab, Draw], PAD row zero
};

World make_world(const SynthConfig& config);

/// The question carrying the noun: the stub verb question with the verb masked.
std::string text_for(const World& world, int latent_noun);

/// Deterministic in (seed, config).
SynthSample gen_sample(std::uint64_t seed, const SynthConfig& config, const World& world);

struct Dataset {
  SynthConfig config;
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
};

/// n samples with distinct per-sample seeds, val = max(1, n / 10) of them.
/// Throws ConfigError when n < 2.
Dataset gen_split(std::uint64_t seed, std::size_t n, const SynthConfig& config);

struct Batch {
  Tensor raw_v;  // [B, F, Draw]
  Tensor raw_t;  // [B, L, Draw]
  std::vector<int> verbs;
  std::vector<int> nouns;
  std::vector<std::uint64_t> seeds;
};

Batch make_batch(std::span<const SynthSample> samples, std::span<const std::size_t> index, const SynthConfig& config,
                 const World& world);

/// Canonical JSON (sorted keys) and its 64-bit FNV-1a hash.
std::string config_json(const SynthConfig& config);
SynthConfig config_from_json(const std::string& text);
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t config_hash(const SynthConfig& config);

/// Binary cache: "SSMF", u32 version, u64 config hash, config JSON, then
/// the samples. Little-endian throughout.
void save_dataset(std::ostream& out, const Dataset& data);
/// Throws ValidationError on a bad magic, version or hash.
Dataset load_dataset(std::istream& in);

}  // namespace ssmfuse::synth
