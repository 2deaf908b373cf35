// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssmfuse/model.hpp"
#include "ssmfuse/params.hpp"
#include "ssmfuse/synth.hpp"

// Optimization loop, learning-rate schedule with per-group peaks, metrics and
// checkpoints.
namespace ssmfuse::trainer {

/// Linear warmup from base to the group's peak, then a half-wave cosine down
/// to final. Steps are optimizer updates, numbered 0 .. last_step().
struct Schedule {
  double base_lr = 1e-6;
  double peak_lr = 1e-3;
  double final_lr = 1e-5;
  std::size_t warmup_epochs = 2;
  std::size_t total_epochs = 20;
  std::size_t steps_per_epoch = 1;
  std::map<std::string, double> group_peaks{{kGroupFusion, 3e-3}};

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t last_step() const { return total_epochs * steps_per_epoch - 1; }
  double peak_for(const std::string& group) const;
};

/// Throws ConfigError for a schedule whose warmup does not end before the last step.
void validate(const Schedule& schedule);

/// Throws ContractError when step > last_step().
double lr_at(std::size_t step, const std::string& group, const Schedule& schedule);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: p -= lr * weight_decay * p
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update of `param` in place. `t` counts updates
/// from 1. Weight decay applies only when `decay` is set.
void adam_step(std::span<double> param, std::span<const double> grad, Moments& moments, std::size_t t, double lr,
               const AdamConfig& config, bool decay = true);

class AdamW {
 public:
  AdamW(ParamList params, AdamConfig config);

  /// Applies one update to every parameter with a gradient, using the
  /// learning rate of its group.
  void step(const std::function<double(const std::string& group)>& lr_for_group);
  void zero_grad();

  const ParamList& params() const { return params_; }
  std::vector<Moments>& moments() { return moments_; }
  const std::vector<Moments>& moments() const { return moments_; }
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t steps) { steps_ = steps; }

 private:
  ParamList params_;
  AdamConfig config_;
  std::vector<Moments> moments_;
  std::size_t steps_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm and
/// returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);
double grad_norm(const ParamList& params);

struct Top1 {
  double verb_acc = 0.0;
  double noun_acc = 0.0;
  double action_acc = 0.0;
};

/// Argmax per head; an action is correct only when both heads are.
Top1 top1_metrics(const model::ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns);

/// Pair score log_softmax(verb)[v] + log_softmax(noun)[n]; a row counts when
/// its true pair ranks in the top 5, ties broken by (v, n) ascending.
/// Throws ConfigError when fewer than 5 pairs exist.
double recall_at_5(const model::ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns);

/// Row-wise log-softmax of a [rows, cols] buffer.
std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t cols);

struct TrainConfig {
  model::ModelConfig model;
  synth::SynthConfig data;
  std::size_t train_samples = 8000;
  std::size_t epochs = 20;
  std::size_t batch = 64;
  std::size_t warmup_epochs = 2;
  double base_lr = 1e-6;
  double peak_lr = 1e-3;
  double fusion_peak_lr = 3e-3;
  double final_lr = 1e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  bool freeze_a = false;  // exclude the transition parameters from training
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

/// Throws ConfigError on inconsistent sizes between the data and the model.
void validate(const TrainConfig& config);

/// Total sample count n whose split leaves exactly train_samples for training.
std::size_t split_size(std::size_t train_samples);

Schedule make_schedule(const TrainConfig& config, std::size_t steps_per_epoch);

/// Canonical JSON with every key; parsing rejects unknown keys and fills
/// missing ones from the defaults. Errors are ValidationError.
std::string config_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& text);
std::uint64_t config_hash(const TrainConfig& config);

struct EvalMetrics {
  double loss = 0.0;
  double verb_acc = 0.0;
  double noun_acc = 0.0;
  double action_acc = 0.0;
  double recall5 = 0.0;
};

/// Forward-only pass over `samples` in batches of `batch`.
EvalMetrics evaluate(const model::Model& model, std::span<const synth::SynthSample> samples,
                     const synth::SynthConfig& data, const synth::World& world, std::size_t batch);

struct HistoryRow {
  std::size_t epoch = 0;
  std::string split;  // train or val
  EvalMetrics metrics;
  double lr_default = 0.0;
  double lr_fusion = 0.0;
};

/// epoch,split,loss,verb_acc,noun_acc,action_acc,recall5,lr_default,lr_fusion
std::string history_csv(const std::vector<HistoryRow>& history);

struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> data;
    std::vector<double> m;
    std::vector<double> v;

    bool operator==(const Entry&) const = default;
  };
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<Entry> entries;

  bool operator==(const Checkpoint&) const = default;
};

/// "SSMC", u32 version, u64 config hash, u64 step, then one
/// name-length-prefixed entry per parameter. Little-endian float64 payloads.
void save_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
/// Throws ValidationError on a bad header or truncation, and on a config
/// hash different from `expected_hash` unless `force` is set.
Checkpoint load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_hash = std::nullopt,
                           bool force = false);

Checkpoint make_checkpoint(const AdamW& optimizer, std::uint64_t config_hash);
/// Copies parameter values (and moments, when given an optimizer) from the
/// checkpoint. Throws ValidationError on a missing name or a shape mismatch.
void restore(const Checkpoint& checkpoint, const ParamList& params, AdamW* optimizer = nullptr);

struct StepTrace {
  std::size_t step = 0;
  double lr_default = 0.0;
  double lr_fusion = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;    // before clipping
  double a_grad_norm = 0.0;  // transition parameters only
};

struct TrainResult {
  model::Model model;
  Checkpoint checkpoint;
  std::vector<HistoryRow> history;
  std::vector<StepTrace> steps;
};

struct TrainHooks {
  /// Called after every epoch's rows are appended; returning false stops
  /// training after that epoch.
  std::function<bool(const std::vector<HistoryRow>&)> on_epoch;
};

/// Trains from a fresh initialization seeded by config.seed. Throws
/// RuntimeFailure naming the batch seeds when the loss stops being finite.
TrainResult train(const TrainConfig& config, const synth::Dataset& data, const TrainHooks& hooks = {});

/// Lets glibc keep freed blocks for reuse instead of returning them to the
/// kernel, which avoids page faults on every batch's large buffers.
void retain_freed_memory();

}  // namespace ssmfuse::trainer
