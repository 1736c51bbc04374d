#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hfsc {

// Desk-scale defaults throughout; every field can be overridden from JSON.
struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or a directory of native cubes
  int64_t W = 64, H = 64, L = 16;
  int scale = 4;
  int scenes = 16;  // training scenes; test count = max(1, scenes/4)
  uint64_t seed = 17;
};

struct ModelConfig {
  int64_t l = 8;
  int64_t c_mid = 16;
  int heads = 2;
};

struct TrainConfig {
  int64_t steps = 500;
  int64_t batch = 8;
  double lr = 1e-4;
  double snr_min_db = -3.0;
  double snr_max_db = 7.0;
  std::string channel_kind = "awgn";
  uint64_t seed = 1;
};

struct EvalConfig {
  std::vector<double> snr_list_db = {-3, -1, 1, 3, 5, 7};
  std::vector<std::string> channels = {"awgn"};
  std::vector<uint64_t> seeds = {0};
};

struct ExperimentConfig {
  std::string variant = "proposed";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir = "out";
};

// Strict parse: unknown keys at any nesting level are errors, as are
// violations of the structural invariants (snr_min <= snr_max, head/channel
// divisibility, divisible-by-scale extents, ...).
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
void validate_config(const ExperimentConfig& cfg);
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace hfsc
