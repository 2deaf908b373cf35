// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/gradcheck.hpp"
#include "ssmfuse/qa.hpp"
#include "ssmfuse/ssm.hpp"

namespace ssmfuse::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDataPathKey = "data_path";
constexpr const char* kOutDirKey = "out_dir";

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ablation;
  std::string mode;
  std::optional<std::size_t> chunk;
  std::optional<std::size_t> epochs;
  std::string lengths = "1024,2048,4096";
  std::string data;
  std::string checkpoint;
  std::string input;
  std::size_t repeats = 5;
  bool force = false;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
}

// Config file first, then flags on top.
RunConfig effective_config(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : run_config_from_json(read_file(f.config));
  auto& t = c.train;
  if (f.seed) t.seed = *f.seed;
  try {
    if (!f.ablation.empty()) t.model.ablation = model::parse_ablation(f.ablation);
    if (!f.mode.empty()) t.data.mode = synth::parse_mode(f.mode);
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }
  if (f.chunk) t.model.block.chunk = *f.chunk;
  if (f.epochs) t.epochs = *f.epochs;
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.data.empty()) c.data_path = f.data;
  try {
    trainer::validate(t);
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }
  return c;
}

fs::path prepare_out_dir(const RunConfig& c) {
  if (c.out_dir.empty()) return {};
  fs::create_directories(c.out_dir);
  write_file(fs::path(c.out_dir) / "config.json", nlohmann::json::parse(run_config_json(c)).dump(2) + "\n");
  return c.out_dir;
}

synth::Dataset load_or_generate(const RunConfig& c) {
  if (c.data_path.empty()) return synth::gen_split(c.train.seed, trainer::split_size(c.train.train_samples), c.train.data);
  std::ifstream in(c.data_path, std::ios::binary);
  if (!in) throw ValidationError("cannot open dataset '" + c.data_path + "'");
  auto data = synth::load_dataset(in);
  if (!(data.config == c.train.data)) {
    throw ValidationError("dataset '" + c.data_path + "' was generated with a different data config");
  }
  return data;
}

nlohmann::json metrics_json(const trainer::EvalMetrics& m) {
  return {{"loss", m.loss},         {"verb_acc", m.verb_acc}, {"noun_acc", m.noun_acc},
          {"action_acc", m.action_acc}, {"recall5", m.recall5}};
}

std::string steps_csv(const std::vector<trainer::StepTrace>& steps) {
  std::ostringstream out;
  out << "step,lr_default,lr_fusion,loss,grad_norm,a_grad_norm\n" << std::setprecision(10);
  for (const auto& s : steps) {
    out << s.step << ',' << s.lr_default << ',' << s.lr_fusion << ',' << s.loss << ',' << s.grad_norm << ','
        << s.a_grad_norm << '\n';
  }
  return out.str();
}

int cmd_gen_data(const Flags& f, std::ostream& out) {
  auto c = effective_config(f);
  if (c.out_dir.empty()) throw ValidationError("gen-data needs --out");
  const auto dir = prepare_out_dir(c);
  const auto data = synth::gen_split(c.train.seed, trainer::split_size(c.train.train_samples), c.train.data);
  std::ofstream file(dir / "dataset.bin", std::ios::binary);
  synth::save_dataset(file, data);
  if (!file) throw RuntimeFailure("cannot write " + (dir / "dataset.bin").string());
  out << "wrote " << data.train.size() << " train and " << data.val.size() << " val samples ("
      << synth::mode_name(c.train.data.mode) << ") to " << (dir / "dataset.bin").string() << '\n';
  return kExitOk;
}

std::vector<qa::Narration> synthetic_narrations(const synth::SynthConfig& config) {
  const auto world = synth::make_world(config);
  std::vector<qa::Narration> rows;
  for (const auto& verb : world.verb_words) {
    for (const auto& noun : world.noun_words) {
      std::ostringstream id;
      id << "syn-" << std::setw(4) << std::setfill('0') << rows.size();
      rows.push_back({id.str(), verb + " the " + noun, verb, noun});
    }
  }
  return rows;
}

int cmd_gen_questions(const Flags& f, std::ostream& out) {
  auto c = effective_config(f);
  if (c.out_dir.empty()) throw ValidationError("gen-questions needs --out");
  const auto dir = prepare_out_dir(c);
  std::vector<qa::Narration> rows;
  if (f.input.empty()) {
    rows = synthetic_narrations(c.train.data);
  } else {
    std::ifstream in(f.input);
    if (!in) throw ValidationError("cannot open narrations '" + f.input + "'");
    rows = qa::read_narrations_csv(in);
  }
  auto source = qa::source_from_environment();
  const auto records = qa::generate_corpus(rows, *source);
  std::ofstream file(dir / "questions.jsonl");
  qa::write_jsonl(file, records);
  if (!file) throw RuntimeFailure("cannot write " + (dir / "questions.jsonl").string());
  out << "wrote " << records.size() << " records from the " << source->name() << " source to "
      << (dir / "questions.jsonl").string() << '\n';
  return kExitOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  auto c = effective_config(f);
  const auto dir = prepare_out_dir(c);
  const auto data = load_or_generate(c);
  const auto start = std::chrono::steady_clock::now();
  trainer::TrainHooks hooks;
  hooks.on_epoch = [&](const std::vector<trainer::HistoryRow>& h) {
    const auto& val = h.back().metrics;
    out << "epoch " << h.back().epoch << " train_loss " << std::setprecision(4) << h[h.size() - 2].metrics.loss
        << " val_loss " << val.loss << " verb " << val.verb_acc << " noun " << val.noun_acc << " action "
        << val.action_acc << " recall5 " << val.recall5 << std::endl;
    if (!dir.empty()) write_file(dir / "metrics.csv", trainer::history_csv(h));
    return true;
  };
  const auto result = trainer::train(c.train, data, hooks);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto& final_val = result.history.back().metrics;
  if (!dir.empty()) {
    write_file(dir / "metrics.csv", trainer::history_csv(result.history));
    write_file(dir / "steps.csv", steps_csv(result.steps));
    std::ofstream ck(dir / "checkpoint.bin", std::ios::binary);
    trainer::save_checkpoint(ck, result.checkpoint);
    const nlohmann::json summary = {{"ablation", model::ablation_name(c.train.model.ablation)},
                                    {"mode", synth::mode_name(c.train.data.mode)},
                                    {"config_hash", trainer::config_hash(c.train)},
                                    {"val", metrics_json(final_val)},
                                    {"wall_seconds", seconds}};
    write_file(dir / "summary.json", summary.dump(2) + "\n");
  }
  out << "final val " << metrics_json(final_val).dump() << " in " << std::setprecision(3) << seconds << " s\n";
  return kExitOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw ValidationError("eval needs --checkpoint");
  auto c = effective_config(f);
  const auto dir = prepare_out_dir(c);
  std::ifstream in(f.checkpoint, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + f.checkpoint + "'");
  const auto checkpoint = trainer::load_checkpoint(in, trainer::config_hash(c.train), f.force);
  Rng rng(c.train.seed);
  auto m = model::init_model(c.train.model, rng);
  trainer::restore(checkpoint, model::model_parameters(m));
  const auto data = load_or_generate(c);
  const auto world = synth::make_world(c.train.data);
  const auto metrics = trainer::evaluate(m, data.val, c.train.data, world, c.train.batch);
  const auto text = metrics_json(metrics).dump(2) + "\n";
  if (!dir.empty()) write_file(dir / "eval.json", text);
  out << text;
  return kExitOk;
}

int cmd_gradcheck(const Flags& f, std::ostream& out) {
  const auto report = fusion_gradcheck_suite(f.seed.value_or(0));
  out << report.to_text();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_file(fs::path(f.out) / "gradcheck.txt", report.to_text());
  }
  if (!report.ok()) {
    out << "FAILED: worst relative error above 1e-4\n";
    return kExitFailure;
  }
  out << "all gradients within 1e-4\n";
  return kExitOk;
}

int cmd_bench(const Flags& f, std::ostream& out) {
  const auto lengths = parse_lengths(f.lengths);
  if (f.repeats == 0) throw ValidationError("--repeats must be positive");
  const std::size_t chunk = f.chunk.value_or(0);
  std::ostringstream csv;
  csv << "length,scan,repeats,median_seconds,min_seconds,ratio_vs_half\n";
  std::map<std::size_t, double> medians;
  for (const auto length : lengths) {
    const auto t = time_scan(length, f.repeats, f.seed.value_or(0), chunk);
    medians[length] = t.median_seconds;
    csv << length << ',' << (chunk == 0 ? "sequential" : "chunked-" + std::to_string(chunk)) << ',' << f.repeats << ','
        << std::setprecision(6) << t.median_seconds << ',' << t.min_seconds << ',';
    if (length % 2 == 0 && medians.contains(length / 2)) csv << t.median_seconds / medians[length / 2];
    csv << '\n';
  }
  out << csv.str();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_file(fs::path(f.out) / "bench.csv", csv.str());
  }
  return kExitOk;
}

int cmd_count(const Flags& f, std::ostream& out) {
  auto c = effective_config(f);
  const auto dir = prepare_out_dir(c);
  const auto comparison = model::comparison_report(c.train.model);
  const auto full = model::count_params_flops(c.train.model, {true, true});
  out << "fusion comparison at D=" << c.train.model.block.model << ", N=" << c.train.model.block.state << '\n'
      << comparison.to_text() << "\nfull model (" << model::ablation_name(c.train.model.ablation) << ")\n"
      << full.to_text();
  if (!dir.empty()) {
    write_file(dir / "count_comparison.csv", comparison.to_csv());
    write_file(dir / "count_model.csv", full.to_csv());
  }
  return kExitOk;
}

}  // namespace

std::string run_config_json(const RunConfig& c) {
  auto j = nlohmann::json::parse(trainer::config_json(c.train));
  j[kDataPathKey] = c.data_path;
  j[kOutDirKey] = c.out_dir;
  return j.dump();
}

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  RunConfig c;
  for (const char* key : {kDataPathKey, kOutDirKey}) {
    if (!j.contains(key)) continue;
    if (!j[key].is_string()) throw ValidationError(std::string("run config key '") + key + "' must be a string");
    (key == std::string(kDataPathKey) ? c.data_path : c.out_dir) = j[key].get<std::string>();
    j.erase(key);
  }
  c.train = trainer::config_from_json(j.dump());
  return c;
}

std::uint64_t run_config_hash(const RunConfig& c) { return synth::fnv1a64(run_config_json(c)); }

ScanTiming time_scan(std::size_t length, std::size_t repeats, std::uint64_t seed, std::size_t chunk) {
  if (length == 0 || repeats == 0) throw ConfigError("time_scan needs a positive length and repeat count");
  constexpr std::size_t kChannels = 16, kState = 16;
  trainer::retain_freed_memory();
  Rng rng(seed);
  auto random = [&](Shape shape, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
  };
  NoGradGuard no_grad;
  const Tensor a = random({kChannels, kState}, -2.0, -0.1);
  const Tensor b = random({1, length, kState}, -1.0, 1.0);
  const Tensor c = random({1, length, kState}, -1.0, 1.0);
  const Tensor delta = random({1, length, kChannels}, 0.01, 0.1);
  const Tensor x = random({1, length, kChannels}, -1.0, 1.0);
  auto run = [&] {
    if (chunk == 0) return ssm::selective_scan(a, b, c, delta, x);
    return ssm::scan_chunked(ssm::zoh_discretize(a, b, delta), c, x, chunk);
  };
  run();
  std::vector<double> times;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto y = run();
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  const double median = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  return {length, median, times.front()};
}

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    long long value = 0;
    try {
      value = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || value <= 0) {
      throw ValidationError("--lengths expects comma-separated positive integers, got '" + text + "'");
    }
    out.push_back(static_cast<std::size_t>(value));
  }
  if (out.empty()) throw ValidationError("--lengths is empty");
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared-transition state-space fusion on synthetic multimodal tasks", "ssmfuse"};
  app.require_subcommand(1);
  Flags f;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "run configuration JSON");
    sub->add_option("--seed", f.seed, "seed for data generation and initialization");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--ablation", f.ablation, "none|separate-A|mlp-fusion|unimodal-V|unimodal-T");
    sub->add_option("--mode", f.mode, "factored|composed");
    sub->add_option("--chunk", f.chunk, "chunk size of the scan (0 = fused sequential)");
    sub->add_option("--epochs", f.epochs, "training epochs");
    sub->add_option("--data", f.data, "dataset written by gen-data");
  };

  auto* gen_data = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_config(gen_data);
  auto* gen_questions = app.add_subcommand("gen-questions", "generate masked QA records (stub unless SSMFUSE_API_KEY)");
  add_config(gen_questions);
  gen_questions->add_option("--input", f.input, "narrations CSV (id,narration,verb,noun)");
  auto* train = app.add_subcommand("train", "train a model and write metrics and a checkpoint");
  add_config(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  add_config(eval);
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint written by train");
  eval->add_flag("--force", f.force, "accept a checkpoint whose config hash differs");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every fusion block parameter");
  gradcheck->add_option("--seed", f.seed, "seed of the random instances");
  gradcheck->add_option("--out", f.out, "output directory");
  auto* bench = app.add_subcommand("bench", "time the scan across sequence lengths");
  bench->add_option("--lengths", f.lengths, "comma-separated sequence lengths");
  bench->add_option("--seed", f.seed, "seed of the random inputs");
  bench->add_option("--chunk", f.chunk, "time the chunked scan with this chunk size");
  bench->add_option("--repeats", f.repeats, "timed runs per length");
  bench->add_option("--out", f.out, "output directory");
  auto* count = app.add_subcommand("count", "parameter and FLOP report");
  add_config(count);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    if (gen_data->parsed()) return cmd_gen_data(f, out);
    if (gen_questions->parsed()) return cmd_gen_questions(f, out);
    if (train->parsed()) return cmd_train(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (gradcheck->parsed()) return cmd_gradcheck(f, out);
    if (bench->parsed()) return cmd_bench(f, out);
    if (count->parsed()) return cmd_count(f, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace ssmfuse::cli
