// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ssmfuse/trainer.hpp"

// The ssmfuse command line: run configuration files and subcommand dispatch.
namespace ssmfuse::cli {

/// Training configuration plus the paths a run reads and writes. The JSON
/// form is the flat TrainConfig object with two extra keys, data_path and
/// out_dir; unknown keys are rejected.
struct RunConfig {
  trainer::TrainConfig train;
  std::string data_path;  // empty: generate the dataset from the seed
  std::string out_dir;

  bool operator==(const RunConfig&) const = default;
};

std::string run_config_json(const RunConfig& config);
/// Throws ValidationError on malformed JSON, unknown keys or bad values.
RunConfig run_config_from_json(const std::string& text);
std::uint64_t run_config_hash(const RunConfig& config);

/// Comma-separated positive integers, e.g. "1024,2048". Throws ValidationError.
std::vector<std::size_t> parse_lengths(const std::string& text);

struct ScanTiming {
  std::size_t length = 0;
  double median_seconds = 0.0;
  double min_seconds = 0.0;
};

/// Wall time of one forward scan over [1, length, 16] inputs with N = 16:
/// the fused sequential scan when chunk is 0, the chunked scan otherwise.
/// One untimed warm-up run precedes `repeats` timed runs.
ScanTiming time_scan(std::size_t length, std::size_t repeats, std::uint64_t seed, std::size_t chunk = 0);

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses argv and runs one subcommand: gen-data, gen-questions, train, eval,
/// gradcheck, bench or count. Returns 0 on success, 2 on usage or validation
/// errors, 1 on runtime failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssmfuse::cli
