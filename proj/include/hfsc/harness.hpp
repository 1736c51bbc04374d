#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hfsc/checkpoint.hpp"
#include "hfsc/config.hpp"
#include "hfsc/model.hpp"
#include "hfsc/optim.hpp"

namespace hfsc {

// --- datasets ---

struct SceneSet {
  std::vector<SceneTriple> train, test;
};

// source == "synthetic": scenes drawn from data.seed substreams (test scenes
// from a disjoint substream, count max(1, scenes/4)). Otherwise source names
// a directory of native cubes: scene_*.json train, test_*.json test; when no
// test_* files exist the tail quarter of the training list is held out.
SceneSet build_scenes(const DataConfig& d);

// Training crop side: largest multiple of 2*scale that is <= min(32, W, H).
int64_t train_patch_size(const DataConfig& d);
std::vector<SceneTriple> build_patch_pool(const DataConfig& d,
                                          const std::vector<SceneTriple>& scenes);

// Writes a synthetic dataset as native cubes (scene_NNN / test_NNN).
void generate_dataset(const ExperimentConfig& cfg, const std::string& dir);

// --- model <-> checkpoint ---

Model<float> model_from_config(const ExperimentConfig& cfg);
Checkpoint snapshot_model(const Model<float>& m, const AdamState<float>& opt,
                          const ExperimentConfig& cfg, uint64_t step);
// Restores parameters (and optimizer moments when opt != nullptr) by name.
void restore_model(Model<float>& m, AdamState<float>* opt, const Checkpoint& ckpt);
// Rebuilds the model recorded in a checkpoint's config snapshot.
Model<float> load_model(const std::string& path, ExperimentConfig* cfg_out = nullptr,
                        AdamState<float>* opt_out = nullptr);

// --- training ---

struct TrainStats {
  int64_t steps = 0;
  double first_window_loss = 0;  // mean of first min(20, steps) losses
  double last_window_loss = 0;   // mean of last  min(20, steps) losses
  std::string checkpoint_path, log_path;
};

// Runs the full loop: per step draws a patch batch, an SNR ~ U[min,max] dB
// and a channel noise substream, minimizes MSE with Adam, appends
// step,loss,snr_db to <out_dir>/train_log.csv and rewrites
// <out_dir>/checkpoint.bin every 100 steps and at the end.
TrainStats train_experiment(const ExperimentConfig& cfg);

// --- evaluation ---

struct EvalRow {
  std::string variant, channel;
  double snr_db = 0;
  uint64_t seed = 0;
  int scene = 0;
  double psnr_db = 0, ssim = 0, mse = 0;
  int64_t symbols = 0, mask_bytes = 0;
};

constexpr const char* kEvalCsvHeader = "variant,channel,snr_db,seed,scene,psnr_db,ssim,mse,symbols,mask_bytes";

// One row per (channel, snr, seed, test scene); noise substreams depend on
// the eval seed, channel, SNR index and scene only, so different variants
// see identical channel realizations.
std::vector<EvalRow> evaluate_model(const Model<float>& m, const ExperimentConfig& cfg);
std::vector<EvalRow> evaluate_checkpoint(const std::string& ckpt_path, const ExperimentConfig& cfg);
void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);

// --- ablation ---

struct AblationRun {
  std::string variant;
  uint64_t seed = 0;  // training seed for this replicate
  TrainStats stats;
  std::vector<EvalRow> rows;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::string runs_csv, summary_csv;
};

// Trains every variant once per entry of eval.seeds (seed = training seed)
// with shared data/init/budget, evaluates each on the eval SNR grid, and
// writes a long-form runs CSV plus a one-row-per-variant summary.
AblationResult run_ablation(ExperimentConfig cfg, int jobs = 1);

// run_single_source: variant must be hsi_only or rgb_only; train + evaluate.
std::vector<EvalRow> run_single_source(const ExperimentConfig& cfg);

// --- gradient verification ---

struct ComponentCheck {
  std::string name;
  double max_rel_err = 0;
  double tol = 0;
  bool ok = false;
};

struct GradCheckReport {
  std::vector<ComponentCheck> checks;
  bool all_ok = true;
  double elapsed_s = 0;
};

// Finite-difference verification (in double) of every differentiable op,
// every layer type, and a tiny end-to-end pipeline over a noiseless channel.
GradCheckReport gradcheck_all();

}  // namespace hfsc
