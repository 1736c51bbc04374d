// Command-line front end: dataset generation, training, evaluation sweeps,
// the ablation runner, single-source baselines and gradient verification.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "hfsc/harness.hpp"
#include "hfsc/metrics.hpp"

namespace {

double parse_snr(const std::string& tok) {
  if (tok == "inf" || tok == "+inf") return std::numeric_limits<double>::infinity();
  size_t used = 0;
  double v = std::stod(tok, &used);
  if (used != tok.size()) throw CLI::ValidationError("--snr", "bad SNR value \"" + tok + "\"");
  return v;
}

std::vector<double> parse_snr_list(const std::string& csv) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= csv.size()) {
    const size_t comma = csv.find(',', start);
    const std::string tok = csv.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!tok.empty()) out.push_back(parse_snr(tok));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw CLI::ValidationError("--snr", "empty SNR list");
  return out;
}

struct CommonFlags {
  std::string config_path, out_dir, snr_csv, channel, variant;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON experiment config");
  cmd->add_option("--out", f.out_dir, "output directory (overrides out_dir)");
  cmd->add_option("--seed", f.seed, "seed override")->each([&f](const std::string&) {
    f.seed_set = true;
  });
  cmd->add_option("--snr", f.snr_csv, "comma-separated SNR list in dB ('inf' = noiseless)");
  cmd->add_option("--channel", f.channel, "channel kind: awgn|rayleigh|mimo");
  cmd->add_option("--variant", f.variant, "model variant");
}

hfsc::ExperimentConfig make_config(const CommonFlags& f, bool seed_is_train_seed) {
  hfsc::ExperimentConfig cfg;
  if (!f.config_path.empty()) cfg = hfsc::load_config(f.config_path);
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (!f.variant.empty()) cfg.variant = f.variant;
  if (!f.channel.empty()) {
    cfg.train.channel_kind = f.channel;
    cfg.eval.channels = {f.channel};
  }
  if (!f.snr_csv.empty()) {
    const std::vector<double> list = parse_snr_list(f.snr_csv);
    cfg.eval.snr_list_db = list;
    cfg.train.snr_min_db = list.front();
    cfg.train.snr_max_db = list.size() > 1 ? list.back() : list.front();
  }
  if (f.seed_set) {
    if (seed_is_train_seed)
      cfg.train.seed = f.seed;
    else
      cfg.eval.seeds = {f.seed};
  }
  hfsc::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchy-aware semantic transmission of hyperspectral images"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, ablate_f, single_f;
  std::string eval_ckpt, pgm_in, pgm_out;
  int jobs = 1;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset as native cubes");
  add_common(gen, gen_f);

  CLI::App* train = app.add_subcommand("train", "train one variant");
  add_common(train, train_f);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint over SNR/channel grids");
  add_common(eval, eval_f);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path (default <out_dir>/checkpoint.bin)");

  CLI::App* ablate = app.add_subcommand("ablate", "train + evaluate every variant");
  add_common(ablate, ablate_f);
  ablate->add_option("--jobs", jobs, "parallel training runs")->check(CLI::PositiveNumber);

  CLI::App* single = app.add_subcommand("single-source", "train + evaluate a one-source baseline");
  add_common(single, single_f);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");

  CLI::App* import = app.add_subcommand("import-pgm", "convert PGM file/directory to a native cube");
  import->add_option("input", pgm_in, "PGM file or directory of per-band PGMs")->required();
  import->add_option("--out", pgm_out, "output cube path (without extension)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      hfsc::ExperimentConfig cfg = make_config(gen_f, true);
      if (gen_f.seed_set) cfg.data.seed = gen_f.seed;
      const std::string dir = cfg.out_dir + "/data";
      hfsc::generate_dataset(cfg, dir);
      std::printf("wrote %d train + %d test scenes to %s\n", cfg.data.scenes,
                  std::max(1, cfg.data.scenes / 4), dir.c_str());
    } else if (train->parsed()) {
      hfsc::ExperimentConfig cfg = make_config(train_f, true);
      hfsc::TrainStats st = hfsc::train_experiment(cfg);
      std::printf("trained %lld steps: loss %.6e -> %.6e\ncheckpoint: %s\nlog: %s\n",
                  static_cast<long long>(st.steps), st.first_window_loss, st.last_window_loss,
                  st.checkpoint_path.c_str(), st.log_path.c_str());
    } else if (eval->parsed()) {
      hfsc::ExperimentConfig cfg = make_config(eval_f, false);
      const std::string ckpt = eval_ckpt.empty() ? cfg.out_dir + "/checkpoint.bin" : eval_ckpt;
      std::vector<hfsc::EvalRow> rows = hfsc::evaluate_checkpoint(ckpt, cfg);
      const std::string csv = cfg.out_dir + "/eval.csv";
      hfsc::write_eval_csv(csv, rows);
      std::printf("wrote %zu rows to %s\n", rows.size(), csv.c_str());
    } else if (ablate->parsed()) {
      hfsc::ExperimentConfig cfg = make_config(ablate_f, true);
      if (ablate_f.seed_set) cfg.eval.seeds = {ablate_f.seed};
      hfsc::AblationResult res = hfsc::run_ablation(cfg, jobs);
      std::printf("ran %zu runs\nruns: %s\nsummary: %s\n", res.runs.size(), res.runs_csv.c_str(),
                  res.summary_csv.c_str());
    } else if (single->parsed()) {
      hfsc::ExperimentConfig cfg = make_config(single_f, true);
      std::vector<hfsc::EvalRow> rows = hfsc::run_single_source(cfg);
      std::printf("wrote %zu rows to %s\n", rows.size(), (cfg.out_dir + "/eval.csv").c_str());
    } else if (gradcheck->parsed()) {
      hfsc::GradCheckReport rep = hfsc::gradcheck_all();
      for (const hfsc::ComponentCheck& c : rep.checks)
        std::printf("%-28s max_rel_err=%.3e tol=%.0e %s\n", c.name.c_str(), c.max_rel_err, c.tol,
                    c.ok ? "ok" : "FAIL");
      std::printf("%zu checks in %.1fs: %s\n", rep.checks.size(), rep.elapsed_s,
                  rep.all_ok ? "all ok" : "FAILURES");
      return rep.all_ok ? 0 : 1;
    } else if (import->parsed()) {
      hfsc::HsiCube cube = hfsc::import_pgm(pgm_in);
      hfsc::save_cube(pgm_out, cube);
      std::printf("wrote %lldx%lldx%lld cube to %s\n", static_cast<long long>(cube.width),
                  static_cast<long long>(cube.height), static_cast<long long>(cube.bands),
                  pgm_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
