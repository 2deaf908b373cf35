// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssmfuse/cli.hpp"
#include "ssmfuse/errors.hpp"
#include "ssmfuse/qa.hpp"

using namespace ssmfuse;
using namespace ssmfuse::cli;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing " << p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ssmfuse_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A configuration that trains in well under a second.
fs::path small_config_file(const fs::path& dir) {
  const auto path = dir / "small.json";
  std::ofstream(path) << R"({"frames": 6, "text_len": 6, "raw_dim": 6, "model_dim": 8, "state_dim": 4,
                            "train_samples": 64, "batch": 32, "epochs": 3, "warmup_epochs": 1})";
  return path;
}

}  // namespace

TEST_CASE("run config JSON round trips, rejects unknown keys and has a stable hash") {
  RunConfig c;
  c.train.seed = 7;
  c.train.model.ablation = model::Ablation::MlpFusion;
  c.data_path = "data/set.bin";
  c.out_dir = "runs/a";
  const auto text = run_config_json(c);
  CHECK(run_config_from_json(text) == c);
  CHECK(run_config_json(run_config_from_json(text)) == text);
  CHECK(run_config_hash(run_config_from_json(text)) == run_config_hash(c));
  // The hash is FNV-1a over the canonical (sorted-key) JSON, so it is the
  // same on every platform; pinned here to catch format drift.
  CHECK(run_config_hash(RunConfig{}) == 0xb744edbe5c26f275ULL);
  CHECK_THROWS_AS(run_config_from_json(R"({"out": "x"})"), ValidationError);
  CHECK_THROWS_AS(run_config_from_json(R"({"data_path": 3})"), ValidationError);
  CHECK_THROWS_AS(run_config_from_json("not json"), ValidationError);
  CHECK(run_config_from_json(R"({"out_dir": "o", "seed": 3})").train.seed == 3);
}

TEST_CASE("parse_lengths") {
  CHECK(parse_lengths("1024,2048,4096") == std::vector<std::size_t>{1024, 2048, 4096});
  CHECK(parse_lengths("5") == std::vector<std::size_t>{5});
  CHECK_THROWS_AS(parse_lengths(""), ValidationError);
  CHECK_THROWS_AS(parse_lengths("10,x"), ValidationError);
  CHECK_THROWS_AS(parse_lengths("10,-2"), ValidationError);
  CHECK_THROWS_AS(parse_lengths("10,,20"), ValidationError);
  CHECK_THROWS_AS(parse_lengths("1.5"), ValidationError);
}

TEST_CASE("usage errors exit with 2") {
  auto r = run({"frobnicate"});
  CHECK(r.code == 2);
  CHECK(r.err.find("gen-data") != std::string::npos);
  CHECK(run({}).code == 2);
  CHECK(run({"train", "--ablation", "both"}).code == 2);
  CHECK(run({"train", "--config", "/nonexistent/cfg.json"}).code == 2);
  CHECK(run({"bench", "--lengths", "12,abc"}).code == 2);
  CHECK(run({"gen-data"}).code == 2);
  CHECK(run({"eval"}).code == 2);
  CHECK(run({"count", "--seed", "notanumber"}).code == 2);
}

TEST_CASE("gradcheck prints a table and passes") {
  const auto r = run({"gradcheck", "--seed", "0"});
  CHECK(r.code == 0);
  CHECK(r.out.find("fusion.0.a_log") != std::string::npos);
  CHECK(r.out.find("all gradients within 1e-4") != std::string::npos);
}

TEST_CASE("count reports the closed-form fusion parameters") {
  const auto r = run({"count"});
  CHECK(r.code == 0);
  CHECK(r.out.find("13568") != std::string::npos);
  CHECK(r.out.find("294912") != std::string::npos);
}

TEST_CASE("bench emits one CSV row per length") {
  const auto dir = scratch("bench");
  const auto r = run({"bench", "--lengths", "64,128", "--repeats", "3", "--out", dir.string()});
  CHECK(r.code == 0);
  CHECK(r.out.starts_with("length,scan,repeats,median_seconds,min_seconds,ratio_vs_half\n"));
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 3);
  CHECK(slurp(dir / "bench.csv") == r.out);
  CHECK(run({"bench", "--lengths", "64", "--chunk", "16", "--repeats", "1"}).out.find("chunked-16") != std::string::npos);
}

TEST_CASE("gen-data is reproducible for a seed") {
  const auto dir = scratch("gendata");
  const auto cfg = small_config_file(dir).string();
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "4", "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "4", "--out", (dir / "b").string()}).code == 0);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "5", "--out", (dir / "c").string()}).code == 0);
  CHECK(slurp(dir / "a" / "dataset.bin") == slurp(dir / "b" / "dataset.bin"));
  CHECK(slurp(dir / "a" / "dataset.bin") != slurp(dir / "c" / "dataset.bin"));
  CHECK(slurp(dir / "a" / "config.json").find("\"seed\": 4") != std::string::npos);
}

TEST_CASE("gen-questions writes masked records from the stub") {
  const auto dir = scratch("genq");
  const auto r = run({"gen-questions", "--out", dir.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("stub") != std::string::npos);
  std::ifstream in(dir / "questions.jsonl");
  const auto records = qa::read_jsonl(in, true);
  CHECK(records.size() == 8 * 12);
  CHECK(run({"gen-questions", "--out", dir.string(), "--input", "/nonexistent.csv"}).code == 2);
}

TEST_CASE("train and eval round trip through the output directory") {
  const auto dir = scratch("train");
  const auto cfg = small_config_file(dir).string();
  const auto out_a = (dir / "a").string(), out_b = (dir / "b").string();
  auto r = run({"train", "--config", cfg, "--seed", "1", "--ablation", "separate-A", "--out", out_a});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  REQUIRE(run({"train", "--config", cfg, "--seed", "1", "--ablation", "separate-A", "--out", out_b}).code == 0);

  const auto metrics = slurp(dir / "a" / "metrics.csv");
  CHECK(metrics.starts_with("epoch,split,loss,verb_acc,noun_acc,action_acc,recall5,lr_default,lr_fusion\n"));
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 1 + 2 * 3);
  CHECK(metrics == slurp(dir / "b" / "metrics.csv"));
  CHECK(slurp(dir / "a" / "steps.csv") == slurp(dir / "b" / "steps.csv"));
  CHECK(slurp(dir / "a" / "checkpoint.bin") == slurp(dir / "b" / "checkpoint.bin"));

  const auto echoed = run_config_from_json(slurp(dir / "a" / "config.json"));
  CHECK(echoed.train.model.ablation == model::Ablation::SeparateA);
  CHECK(echoed.train.seed == 1);
  CHECK(echoed.out_dir == out_a);
  CHECK(slurp(dir / "a" / "summary.json").find("separate-A") != std::string::npos);

  const auto ck = (dir / "a" / "checkpoint.bin").string();
  r = run({"eval", "--config", cfg, "--seed", "1", "--ablation", "separate-A", "--checkpoint", ck});
  CHECK(r.code == 0);
  CHECK(r.out.find("recall5") != std::string::npos);

  // The checkpoint's config hash no longer matches once the seed changes.
  CHECK(run({"eval", "--config", cfg, "--seed", "2", "--ablation", "separate-A", "--checkpoint", ck}).code == 2);
  CHECK(run({"eval", "--config", cfg, "--seed", "2", "--ablation", "separate-A", "--checkpoint", ck, "--force"}).code == 0);
  // A different ablation has different parameters: the restore fails validation.
  CHECK(run({"eval", "--config", cfg, "--seed", "1", "--ablation", "mlp-fusion", "--checkpoint", ck, "--force"}).code == 2);
}

TEST_CASE("train reads a dataset written by gen-data and rejects a mismatched one") {
  const auto dir = scratch("traindata");
  const auto cfg = small_config_file(dir).string();
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "3", "--out", (dir / "d").string()}).code == 0);
  const auto data = (dir / "d" / "dataset.bin").string();
  CHECK(run({"train", "--config", cfg, "--data", data, "--epochs", "2"}).code == 0);
  CHECK(run({"train", "--config", cfg, "--data", data, "--mode", "composed", "--epochs", "2"}).code == 2);
}
