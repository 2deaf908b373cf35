// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <json.hpp>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/ops.hpp"

namespace ssmfuse::trainer {

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

constexpr char kMagic[4] = {'S', 'S', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_doubles(std::ostream& out, const std::vector<double>& values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ValidationError("checkpoint is truncated");
  return value;
}

std::vector<double> get_doubles(std::istream& in, std::size_t count) {
  std::vector<double> out(count);
  if (!in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
    throw ValidationError("checkpoint is truncated");
  }
  return out;
}

bool is_transition(const std::string& name) {
  return name.ends_with(".a_log") || name.ends_with(".a_log_t");
}

std::string discretization_name(ssm::Discretization d) { return d == ssm::Discretization::Zoh ? "zoh" : "euler"; }

ssm::Discretization parse_discretization(const std::string& name) {
  if (name == "zoh") return ssm::Discretization::Zoh;
  if (name == "euler") return ssm::Discretization::Euler;
  throw ValidationError("unknown discretization '" + name + "' (expected zoh or euler)");
}

struct Tally {
  double loss = 0.0;
  double verb = 0.0;
  double noun = 0.0;
  double action = 0.0;
  double recall = 0.0;
  std::size_t rows = 0;

  void add(const model::ActionScores& scores, double batch_loss, std::span<const int> verbs,
           std::span<const int> nouns) {
    const auto n = static_cast<double>(verbs.size());
    const auto top = top1_metrics(scores, verbs, nouns);
    loss += batch_loss * n;
    verb += top.verb_acc * n;
    noun += top.noun_acc * n;
    action += top.action_acc * n;
    recall += recall_at_5(scores, verbs, nouns) * n;
    rows += verbs.size();
  }

  EvalMetrics mean() const {
    const auto n = static_cast<double>(std::max<std::size_t>(rows, 1));
    return {loss / n, verb / n, noun / n, action / n, recall / n};
  }
};

}  // namespace

double Schedule::peak_for(const std::string& group) const {
  const auto it = group_peaks.find(group);
  return it == group_peaks.end() ? peak_lr : it->second;
}

void validate(const Schedule& s) {
  if (s.steps_per_epoch == 0) throw ConfigError("schedule needs at least one step per epoch");
  if (s.total_epochs == 0 || s.last_step() <= s.warmup_steps()) {
    throw ConfigError("schedule warmup (" + std::to_string(s.warmup_epochs) + " epochs) must end before the last step (" +
                      std::to_string(s.total_epochs) + " epochs)");
  }
  if (!(s.base_lr > 0 && s.peak_lr > 0 && s.final_lr > 0)) throw ConfigError("learning rates must be positive");
  for (const auto& [group, peak] : s.group_peaks) {
    if (!(peak > 0)) throw ConfigError("peak learning rate of group '" + group + "' must be positive");
  }
}

double lr_at(std::size_t step, const std::string& group, const Schedule& s) {
  validate(s);
  if (step > s.last_step()) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond the last step " + std::to_string(s.last_step()));
  }
  const double peak = s.peak_for(group);
  const std::size_t warmup = s.warmup_steps();
  if (step < warmup) {
    return s.base_lr + (peak - s.base_lr) * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double t = static_cast<double>(step - warmup) / static_cast<double>(s.last_step() - warmup);
  return s.final_lr + 0.5 * (peak - s.final_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

void adam_step(std::span<double> param, std::span<const double> grad, Moments& moments, std::size_t t, double lr,
               const AdamConfig& c, bool decay) {
  if (grad.size() != param.size() || moments.m.size() != param.size() || moments.v.size() != param.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  }
  if (t == 0) throw ContractError("adam_step: update count starts at 1");
  const double correct1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double correct2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    moments.m[i] = c.beta1 * moments.m[i] + (1.0 - c.beta1) * grad[i];
    moments.v[i] = c.beta2 * moments.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = moments.m[i] / correct1;
    const double v_hat = moments.v[i] / correct2;
    if (decay && c.weight_decay != 0.0) param[i] -= lr * c.weight_decay * param[i];
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

AdamW::AdamW(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    const auto n = p.tensor.numel();
    moments_.push_back({std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void AdamW::step(const std::function<double(const std::string&)>& lr_for_group) {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    adam_step(p.tensor.mutable_data(), p.tensor.grad(), moments_[i], steps_, lr_for_group(p.group), config_, p.decay);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto tensor = p.tensor;
      for (double& g : tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

Top1 top1_metrics(const model::ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns) {
  const auto predicted = model::predict_action(scores);
  if (predicted.size() != verbs.size() || predicted.size() != nouns.size()) {
    throw DimensionError("top1_metrics: " + std::to_string(predicted.size()) + " score rows for " +
                         std::to_string(verbs.size()) + " labels");
  }
  Top1 out;
  if (predicted.empty()) return out;
  std::size_t v = 0, n = 0, a = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool vi = predicted[i].first == verbs[i];
    const bool ni = predicted[i].second == nouns[i];
    v += vi;
    n += ni;
    a += vi && ni;
  }
  const auto rows = static_cast<double>(predicted.size());
  out.verb_acc = static_cast<double>(v) / rows;
  out.noun_acc = static_cast<double>(n) / rows;
  out.action_acc = static_cast<double>(a) / rows;
  return out;
}

std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data() + r * cols;
    const double m = *std::max_element(x, x + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(x[c] - m);
    const double lse = m + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lse;
  }
  return out;
}

double recall_at_5(const model::ActionScores& scores, std::span<const int> verbs, std::span<const int> nouns) {
  const std::size_t rows = scores.verb_logits.dim(0);
  const std::size_t nv = scores.verb_logits.dim(1), nn = scores.noun_logits.dim(1);
  if (nv * nn < 5) {
    throw ConfigError("recall_at_5 needs at least 5 (verb, noun) pairs, got " + std::to_string(nv * nn));
  }
  if (verbs.size() != rows || nouns.size() != rows || scores.noun_logits.dim(0) != rows) {
    throw DimensionError("recall_at_5: score rows and label counts differ");
  }
  if (rows == 0) return 0.0;
  const auto lv = log_softmax_rows(scores.verb_logits.data(), rows, nv);
  const auto ln = log_softmax_rows(scores.noun_logits.data(), rows, nn);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto tv = static_cast<std::size_t>(verbs[r]), tn = static_cast<std::size_t>(nouns[r]);
    const double target = lv[r * nv + tv] + ln[r * nn + tn];
    std::size_t ahead = 0;
    for (std::size_t v = 0; v < nv && ahead < 5; ++v) {
      for (std::size_t n = 0; n < nn; ++n) {
        const double s = lv[r * nv + v] + ln[r * nn + n];
        if (s > target || (s == target && std::pair(v, n) < std::pair(tv, tn))) ++ahead;
      }
    }
    hits += ahead < 5;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

void validate(const TrainConfig& c) {
  synth::validate(c.data);
  if (c.model.block.raw_v != c.data.raw || c.model.block.raw_t != c.data.raw) {
    throw ConfigError("model raw widths must match the data's raw width " + std::to_string(c.data.raw));
  }
  if (c.model.verbs != c.data.verbs || c.model.nouns != c.data.nouns) {
    throw ConfigError("model and data disagree on the verb/noun vocabularies");
  }
  if (c.train_samples == 0 || c.batch == 0 || c.epochs == 0) {
    throw ConfigError("train_samples, batch and epochs must be positive");
  }
  if (!(c.clip_norm > 0) || !(c.weight_decay >= 0)) throw ConfigError("clip_norm must be positive, weight_decay >= 0");
  validate(make_schedule(c, (c.train_samples + c.batch - 1) / c.batch));
}

std::size_t split_size(std::size_t train_samples) {
  std::size_t n = train_samples + 1;
  while (n - std::max<std::size_t>(1, n / 10) < train_samples) ++n;
  return n;
}

Schedule make_schedule(const TrainConfig& c, std::size_t steps_per_epoch) {
  Schedule s;
  s.base_lr = c.base_lr;
  s.peak_lr = c.peak_lr;
  s.final_lr = c.final_lr;
  s.warmup_epochs = c.warmup_epochs;
  s.total_epochs = c.epochs;
  s.steps_per_epoch = steps_per_epoch;
  s.group_peaks = {{kGroupFusion, c.fusion_peak_lr}};
  return s;
}

std::string config_json(const TrainConfig& c) {
  const auto& b = c.model.block;
  const nlohmann::json j = {
      {"model_dim", b.model},
      {"state_dim", b.state},
      {"conv_width", b.conv_width},
      {"depth", b.depth},
      {"delta_rank", b.delta_rank},
      {"discretization", discretization_name(b.discretization)},
      {"chunk", b.chunk},
      {"mlp_hidden", c.model.mlp_hidden},
      {"ablation", model::ablation_name(c.model.ablation)},
      {"frames", c.data.frames},
      {"text_len", c.data.text_len},
      {"raw_dim", c.data.raw},
      {"verbs", c.data.verbs},
      {"nouns", c.data.nouns},
      {"k_v", c.data.k_v},
      {"noise", c.data.noise},
      {"mode", synth::mode_name(c.data.mode)},
      {"world_seed", c.data.world_seed},
      {"train_samples", c.train_samples},
      {"epochs", c.epochs},
      {"batch", c.batch},
      {"warmup_epochs", c.warmup_epochs},
      {"base_lr", c.base_lr},
      {"peak_lr", c.peak_lr},
      {"fusion_peak_lr", c.fusion_peak_lr},
      {"final_lr", c.final_lr},
      {"weight_decay", c.weight_decay},
      {"clip_norm", c.clip_norm},
      {"freeze_a", c.freeze_a},
      {"seed", c.seed},
  };
  return j.dump();
}

TrainConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  TrainConfig c;
  const auto defaults = nlohmann::json::parse(config_json(c));
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ValidationError("unknown config key '" + key + "'");
  }
  auto merged = defaults;
  merged.update(j);
  try {
    auto& b = c.model.block;
    b.model = merged.at("model_dim").get<std::size_t>();
    b.state = merged.at("state_dim").get<std::size_t>();
    b.conv_width = merged.at("conv_width").get<std::size_t>();
    b.depth = merged.at("depth").get<std::size_t>();
    b.delta_rank = merged.at("delta_rank").get<std::size_t>();
    b.discretization = parse_discretization(merged.at("discretization").get<std::string>());
    b.chunk = merged.at("chunk").get<std::size_t>();
    c.model.mlp_hidden = merged.at("mlp_hidden").get<std::size_t>();
    c.model.ablation = model::parse_ablation(merged.at("ablation").get<std::string>());
    c.data.frames = merged.at("frames").get<std::size_t>();
    c.data.text_len = merged.at("text_len").get<std::size_t>();
    c.data.raw = merged.at("raw_dim").get<std::size_t>();
    c.data.verbs = merged.at("verbs").get<std::size_t>();
    c.data.nouns = merged.at("nouns").get<std::size_t>();
    c.data.k_v = merged.at("k_v").get<std::size_t>();
    c.data.noise = merged.at("noise").get<double>();
    c.data.mode = synth::parse_mode(merged.at("mode").get<std::string>());
    c.data.world_seed = merged.at("world_seed").get<std::uint64_t>();
    c.train_samples = merged.at("train_samples").get<std::size_t>();
    c.epochs = merged.at("epochs").get<std::size_t>();
    c.batch = merged.at("batch").get<std::size_t>();
    c.warmup_epochs = merged.at("warmup_epochs").get<std::size_t>();
    c.base_lr = merged.at("base_lr").get<double>();
    c.peak_lr = merged.at("peak_lr").get<double>();
    c.fusion_peak_lr = merged.at("fusion_peak_lr").get<double>();
    c.final_lr = merged.at("final_lr").get<double>();
    c.weight_decay = merged.at("weight_decay").get<double>();
    c.clip_norm = merged.at("clip_norm").get<double>();
    c.freeze_a = merged.at("freeze_a").get<bool>();
    c.seed = merged.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config has a value of the wrong type: ") + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }
  c.model.block.raw_v = c.data.raw;
  c.model.block.raw_t = c.data.raw;
  c.model.verbs = c.data.verbs;
  c.model.nouns = c.data.nouns;
  return c;
}

std::uint64_t config_hash(const TrainConfig& c) { return synth::fnv1a64(config_json(c)); }

EvalMetrics evaluate(const model::Model& m, std::span<const synth::SynthSample> samples, const synth::SynthConfig& data,
                     const synth::World& world, std::size_t batch) {
  if (batch == 0) throw ConfigError("evaluate: batch must be positive");
  NoGradGuard no_grad;
  Tally tally;
  std::vector<std::size_t> index;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    index.resize(end - start);
    std::iota(index.begin(), index.end(), start);
    const auto b = synth::make_batch(samples, index, data, world);
    const auto scores = model::forward(m, b.raw_v, b.raw_t);
    const double loss = model::action_loss(scores, b.verbs, b.nouns).item();
    tally.add(scores, loss, b.verbs, b.nouns);
  }
  return tally.mean();
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream out;
  out << "epoch,split,loss,verb_acc,noun_acc,action_acc,recall5,lr_default,lr_fusion\n";
  out << std::setprecision(10);
  for (const auto& r : history) {
    const auto& m = r.metrics;
    out << r.epoch << ',' << r.split << ',' << m.loss << ',' << m.verb_acc << ',' << m.noun_acc << ',' << m.action_acc
        << ',' << m.recall5 << ',' << r.lr_default << ',' << r.lr_fusion << '\n';
  }
  return out.str();
}

void save_checkpoint(std::ostream& out, const Checkpoint& c) {
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, c.config_hash);
  put(out, c.step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.data.size() != n || e.m.size() != n || e.v.size() != n) {
      throw ContractError("checkpoint entry '" + e.name + "' has payloads that do not match its shape");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint64_t>(out, d);
    put_doubles(out, e.data);
    put_doubles(out, e.m);
    put_doubles(out, e.v);
  }
  if (!out) throw RuntimeFailure("failed to write checkpoint");
}

Checkpoint load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_hash, bool force) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw ValidationError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = get<std::uint64_t>(in);
  if (expected_hash && *expected_hash != c.config_hash && !force) {
    throw ValidationError("checkpoint config hash does not match the current config");
  }
  c.step = get<std::uint64_t>(in);
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    e.name.resize(get<std::uint32_t>(in));
    if (!in.read(e.name.data(), static_cast<std::streamsize>(e.name.size()))) throw ValidationError("checkpoint is truncated");
    const auto rank = get<std::uint32_t>(in);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get<std::uint64_t>(in));
    const std::size_t n = shape_numel(e.shape);
    e.data = get_doubles(in, n);
    e.m = get_doubles(in, n);
    e.v = get_doubles(in, n);
    c.entries.push_back(std::move(e));
  }
  return c;
}

Checkpoint make_checkpoint(const AdamW& optimizer, std::uint64_t hash) {
  Checkpoint c;
  c.config_hash = hash;
  c.step = optimizer.steps();
  const auto& params = optimizer.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto data = params[i].tensor.data();
    c.entries.push_back({params[i].name, params[i].tensor.shape(), {data.begin(), data.end()},
                         optimizer.moments()[i].m, optimizer.moments()[i].v});
  }
  return c;
}

void restore(const Checkpoint& c, const ParamList& params, AdamW* optimizer) {
  std::unordered_map<std::string, const Checkpoint::Entry*> by_name;
  for (const auto& e : c.entries) by_name[e.name] = &e;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto it = by_name.find(params[i].name);
    if (it == by_name.end()) throw ValidationError("checkpoint has no parameter '" + params[i].name + "'");
    const auto& e = *it->second;
    if (e.shape != params[i].tensor.shape()) {
      throw ValidationError("checkpoint parameter '" + e.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                            shape_str(params[i].tensor.shape()));
    }
    auto tensor = params[i].tensor;
    std::copy(e.data.begin(), e.data.end(), tensor.mutable_data().begin());
  }
  if (optimizer) {
    const auto& own = optimizer->params();
    for (std::size_t i = 0; i < own.size(); ++i) {
      const auto it = by_name.find(own[i].name);
      if (it == by_name.end()) throw ValidationError("checkpoint has no parameter '" + own[i].name + "'");
      optimizer->moments()[i] = {it->second->m, it->second->v};
    }
    optimizer->set_steps(c.step);
  }
}

void retain_freed_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

TrainResult train(const TrainConfig& config, const synth::Dataset& data, const TrainHooks& hooks) {
  validate(config);
  if (!(data.config == config.data)) throw ConfigError("dataset was generated with a different data config");
  if (data.train.empty() || data.val.empty()) throw ConfigError("dataset needs train and val samples");
  retain_freed_memory();
  const auto world = synth::make_world(config.data);

  Rng init_rng(config.seed);
  TrainResult result{model::init_model(config.model, init_rng), {}, {}, {}};
  auto& m = result.model;
  auto params = model::model_parameters(m);
  if (config.freeze_a) {
    for (auto& p : params) {
      if (is_transition(p.name)) p.tensor.set_requires_grad(false);
    }
  }
  AdamW optimizer(params, AdamConfig{0.9, 0.999, 1e-8, config.weight_decay});

  const std::size_t steps_per_epoch = (data.train.size() + config.batch - 1) / config.batch;
  const Schedule schedule = make_schedule(config, steps_per_epoch);
  validate(schedule);
  auto lr_pair = [&](std::size_t step) {
    return std::pair{lr_at(step, kGroupDefault, schedule), lr_at(step, kGroupFusion, schedule)};
  };

  {
    const auto [lr_d, lr_f] = lr_pair(0);
    result.history.push_back({0, "val", evaluate(m, data.val, config.data, world, config.batch), lr_d, lr_f});
  }

  Rng shuffle_rng(splitmix64(config.seed) ^ 0x5eed5eed5eed5eedULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    Tally tally;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::span<const std::size_t> index(order.data() + start, std::min(config.batch, order.size() - start));
      const auto batch = synth::make_batch(data.train, index, config.data, world);
      const auto scores = model::forward(m, batch.raw_v, batch.raw_t);
      const auto loss = model::action_loss(scores, batch.verbs, batch.nouns);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << loss_value << " at epoch " << epoch << ", step " << step << "; batch seeds:";
        for (auto s : batch.seeds) msg << ' ' << s;
        throw RuntimeFailure(msg.str());
      }
      backward(loss);
      StepTrace trace;
      trace.step = step;
      trace.loss = loss_value;
      double a_sq = 0.0;
      for (const auto& p : params) {
        if (!is_transition(p.name) || !p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) a_sq += g * g;
      }
      trace.a_grad_norm = std::sqrt(a_sq);
      trace.grad_norm = clip_grad_norm(params, config.clip_norm);
      std::tie(trace.lr_default, trace.lr_fusion) = lr_pair(step);
      optimizer.step([&](const std::string& group) { return group == kGroupFusion ? trace.lr_fusion : trace.lr_default; });
      optimizer.zero_grad();
      result.steps.push_back(trace);
      tally.add(scores, loss_value, batch.verbs, batch.nouns);
      ++step;
    }
    const auto [lr_d, lr_f] = lr_pair(step - 1);
    result.history.push_back({epoch, "train", tally.mean(), lr_d, lr_f});
    result.history.push_back({epoch, "val", evaluate(m, data.val, config.data, world, config.batch), lr_d, lr_f});
    if (hooks.on_epoch && !hooks.on_epoch(result.history)) break;
  }
  result.checkpoint = make_checkpoint(optimizer, config_hash(config));
  return result;
}

}  // namespace ssmfuse::trainer
