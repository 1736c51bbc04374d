#include "hfsc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "hfsc/metrics.hpp"

namespace hfsc {

namespace fs = std::filesystem;

namespace {

constexpr int kSyntheticBlobs = 8;
constexpr uint64_t kTestSceneTag = 0x7E57;
constexpr int64_t kCheckpointEvery = 100;
constexpr int64_t kLossWindow = 20;

// Disjoint RNG stream tags inside one training run.
constexpr uint64_t kBatchTag = 0xBA7C4;
constexpr uint64_t kSnrTag = 0x54B0;
constexpr uint64_t kNoiseTag = 0xC4A17;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string fmt_general(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt_fixed(double v, int prec) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string fmt_sci(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.8e", v);
  return buf;
}

SceneTriple cube_to_triple(HsiCube hr, const DataConfig& d, const std::string& origin) {
  if (hr.width != d.W || hr.height != d.H || hr.bands != d.L)
    fail("cube " + origin + " is " + std::to_string(hr.width) + "x" + std::to_string(hr.height) +
         "x" + std::to_string(hr.bands) + " but the config wants " + std::to_string(d.W) + "x" +
         std::to_string(d.H) + "x" + std::to_string(d.L));
  SceneTriple t;
  t.scale = d.scale;
  t.lr_hsi = degrade_to_lr(hr, d.scale);
  t.hr_rgb = project_to_rgb(hr, default_response(d.L));
  t.hr_hsi = std::move(hr);
  return t;
}

NamedTensor to_named(const std::string& name, const Tensor<float>& t) {
  NamedTensor n;
  n.name = name;
  for (int i = 0; i < t.shape().nd; ++i) n.dims.push_back(t.shape()[i]);
  n.values = t.values();
  return n;
}

}  // namespace

SceneSet build_scenes(const DataConfig& d) {
  SceneSet out;
  const int test_n = std::max(1, d.scenes / 4);
  if (d.source == "synthetic") {
    for (int i = 0; i < d.scenes; ++i)
      out.train.push_back(make_synthetic_scene(substream(d.seed, uint64_t(i)), d.W, d.H, d.L,
                                               d.scale, kSyntheticBlobs));
    for (int i = 0; i < test_n; ++i)
      out.test.push_back(make_synthetic_scene(substream(d.seed, kTestSceneTag + uint64_t(i)), d.W,
                                              d.H, d.L, d.scale, kSyntheticBlobs));
    return out;
  }

  if (!fs::is_directory(d.source))
    fail("data source \"" + d.source + "\" is neither \"synthetic\" nor a directory");
  std::vector<std::string> train_files, test_files;
  for (const auto& e : fs::directory_iterator(d.source)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.size() < 6 || name.substr(name.size() - 5) != ".json") continue;
    if (name.rfind("scene_", 0) == 0)
      train_files.push_back(e.path().string());
    else if (name.rfind("test_", 0) == 0)
      test_files.push_back(e.path().string());
  }
  std::sort(train_files.begin(), train_files.end());
  std::sort(test_files.begin(), test_files.end());
  if (train_files.empty()) fail("no scene_*.json cubes found in " + d.source);
  if (int64_t(train_files.size()) > d.scenes) train_files.resize(size_t(d.scenes));
  for (const auto& f : train_files) out.train.push_back(cube_to_triple(load_cube(f), d, f));
  for (const auto& f : test_files) out.test.push_back(cube_to_triple(load_cube(f), d, f));
  if (out.test.empty()) {
    if (out.train.size() < 2)
      fail("need at least 2 scenes in " + d.source + " to hold out a test set");
    const size_t hold = std::max<size_t>(1, out.train.size() / 4);
    out.test.assign(out.train.end() - long(hold), out.train.end());
    out.train.resize(out.train.size() - hold);
  }
  return out;
}

int64_t train_patch_size(const DataConfig& d) {
  const int64_t unit = 2 * d.scale;
  const int64_t cap = std::min<int64_t>({32, d.W, d.H});
  const int64_t patch = (cap / unit) * unit;
  if (patch < unit) fail("scene extent too small for a training crop (need >= 2*scale)");
  return patch;
}

std::vector<SceneTriple> build_patch_pool(const DataConfig& d,
                                          const std::vector<SceneTriple>& scenes) {
  const int64_t patch = train_patch_size(d);
  const int64_t stride = std::max<int64_t>(d.scale, patch / 2);
  std::vector<SceneTriple> pool;
  for (const SceneTriple& s : scenes) {
    for (SceneTriple& p : extract_patches(s, patch, stride)) {
      // Spatially flat crops are degenerate: the decoder can fit them from
      // its biases alone, so the loss drives the encoder output for them to
      // exactly zero, which the transmit-power normalizer rejects. Keep only
      // crops with real spatial structure in at least one band.
      const int64_t hw = p.hr_hsi.width * p.hr_hsi.height;
      float range = 0.f;
      for (int64_t b = 0; b < p.hr_hsi.bands; ++b) {
        float lo = p.hr_hsi.data[b * hw], hi = lo;
        for (int64_t i = 1; i < hw; ++i) {
          const float v = p.hr_hsi.data[b * hw + i];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        range = std::max(range, hi - lo);
      }
      if (range >= 0.1f) pool.push_back(std::move(p));
    }
  }
  if (pool.empty()) fail("patch pool is empty (all training crops are blank)");
  return pool;
}

void generate_dataset(const ExperimentConfig& cfg, const std::string& dir) {
  if (cfg.data.source != "synthetic")
    fail("generate: data.source must be \"synthetic\", got \"" + cfg.data.source + "\"");
  SceneSet s = build_scenes(cfg.data);
  fs::create_directories(dir);
  char name[32];
  for (size_t i = 0; i < s.train.size(); ++i) {
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    save_cube(dir + "/" + name, s.train[i].hr_hsi);
  }
  for (size_t i = 0; i < s.test.size(); ++i) {
    std::snprintf(name, sizeof name, "test_%03zu", i);
    save_cube(dir + "/" + name, s.test[i].hr_hsi);
  }
}

Model<float> model_from_config(const ExperimentConfig& cfg) {
  validate_config(cfg);
  ModelDims dims;
  dims.L = cfg.data.L;
  dims.l = cfg.model.l;
  dims.c_mid = cfg.model.c_mid;
  dims.heads = cfg.model.heads;
  dims.scale = cfg.data.scale;
  return make_model<float>(parse_variant(cfg.variant), dims, cfg.train.seed);
}

Checkpoint snapshot_model(const Model<float>& m, const AdamState<float>& opt,
                          const ExperimentConfig& cfg, uint64_t step) {
  Checkpoint ck;
  ck.step = step;
  ck.config_json = config_to_json(cfg);
  const ParamSet<float>& ps = m.params;
  for (size_t i = 0; i < ps.size(); ++i) ck.tensors.push_back(to_named(ps.names()[i], ps.at(i)));
  if (opt.m.size() == ps.size()) {
    for (size_t i = 0; i < ps.size(); ++i) {
      NamedTensor t = to_named("adam.m/" + ps.names()[i], ps.at(i));
      t.values = opt.m[i];
      ck.tensors.push_back(std::move(t));
    }
    for (size_t i = 0; i < ps.size(); ++i) {
      NamedTensor t = to_named("adam.v/" + ps.names()[i], ps.at(i));
      t.values = opt.v[i];
      ck.tensors.push_back(std::move(t));
    }
  }
  return ck;
}

void restore_model(Model<float>& m, AdamState<float>* opt, const Checkpoint& ckpt) {
  ParamSet<float>& ps = m.params;
  if (opt) {
    opt->init(ps);
    opt->step = int64_t(ckpt.step);
  }
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names()[i];
    const NamedTensor* t = ckpt.find(name);
    if (!t) fail("checkpoint is missing tensor " + name);
    Tensor<float>& p = ps.at(i);
    bool same = int(t->dims.size()) == p.shape().nd;
    for (int k = 0; same && k < p.shape().nd; ++k) same = t->dims[size_t(k)] == p.shape()[k];
    if (!same) fail("checkpoint tensor " + name + " does not match the model shape");
    p.values() = t->values;
    if (opt) {
      const NamedTensor* tm = ckpt.find("adam.m/" + name);
      const NamedTensor* tv = ckpt.find("adam.v/" + name);
      if (!tm || !tv) fail("checkpoint is missing optimizer state for " + name);
      if (tm->values.size() != p.values().size() || tv->values.size() != p.values().size())
        fail("checkpoint optimizer state for " + name + " has the wrong size");
      opt->m[i] = tm->values;
      opt->v[i] = tv->values;
    }
  }
}

Model<float> load_model(const std::string& path, ExperimentConfig* cfg_out,
                        AdamState<float>* opt_out) {
  Checkpoint ck = load_checkpoint(path);
  ExperimentConfig cfg = parse_config(ck.config_json);
  Model<float> m = model_from_config(cfg);
  restore_model(m, opt_out, ck);
  if (cfg_out) *cfg_out = cfg;
  return m;
}

TrainStats train_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  fs::create_directories(cfg.out_dir);
  SceneSet scenes = build_scenes(cfg.data);
  std::vector<SceneTriple> pool = build_patch_pool(cfg.data, scenes.train);

  Model<float> model = model_from_config(cfg);
  AdamState<float> opt;
  opt.lr = cfg.train.lr;
  opt.init(model.params);

  TrainStats stats;
  stats.steps = cfg.train.steps;
  stats.log_path = cfg.out_dir + "/train_log.csv";
  stats.checkpoint_path = cfg.out_dir + "/checkpoint.bin";

  std::ofstream log(stats.log_path, std::ios::trunc);
  if (!log) fail("cannot write " + stats.log_path);
  log << "step,loss,snr_db\n";

  const uint64_t batch_key = substream(cfg.train.seed, kBatchTag);
  const uint64_t snr_key = substream(cfg.train.seed, kSnrTag);
  const uint64_t noise_key = substream(cfg.train.seed, kNoiseTag);
  const ChannelKind kind = parse_channel(cfg.train.channel_kind);

  std::vector<double> losses;
  losses.reserve(size_t(cfg.train.steps));
  for (int64_t step = 0; step < cfg.train.steps; ++step) {
    std::vector<const SceneTriple*> batch;
    batch.reserve(size_t(cfg.train.batch));
    for (int64_t j = 0; j < cfg.train.batch; ++j)
      batch.push_back(
          &pool[keyed_u64(batch_key, uint64_t(step * cfg.train.batch + j)) % pool.size()]);
    Tensor<float> x1, x2, target;
    batch_to_tensors(batch, x1, x2, target);

    const double snr =
        cfg.train.snr_min_db == cfg.train.snr_max_db
            ? cfg.train.snr_min_db
            : cfg.train.snr_min_db + (cfg.train.snr_max_db - cfg.train.snr_min_db) *
                                         keyed_uniform(snr_key, uint64_t(step));
    ChannelConfig ch;
    ch.kind = kind;
    ch.snr_db = snr;
    ch.seed = substream(noise_key, uint64_t(step));

    ForwardResult<float> out = forward(model, x1, x2, ch);
    Tensor<float> loss = ops::mse(out.y_hat, target);
    const double loss_v = double(loss.item());
    if (!std::isfinite(loss_v))
      fail("training diverged at step " + std::to_string(step + 1) +
           " (loss = " + std::to_string(loss_v) + ")");
    losses.push_back(loss_v);
    log << (step + 1) << ',' << fmt_sci(loss_v) << ',' << fmt_fixed(snr, 4) << '\n';

    model.params.zero_grad();
    backward(loss);
    adam_step(model.params, opt);

    if ((step + 1) % kCheckpointEvery == 0 || step + 1 == cfg.train.steps)
      save_checkpoint(stats.checkpoint_path, snapshot_model(model, opt, cfg, uint64_t(step + 1)));
  }

  const size_t win = size_t(std::min<int64_t>(kLossWindow, int64_t(losses.size())));
  double first = 0, last = 0;
  for (size_t i = 0; i < win; ++i) {
    first += losses[i];
    last += losses[losses.size() - win + i];
  }
  stats.first_window_loss = first / double(win);
  stats.last_window_loss = last / double(win);
  return stats;
}

std::vector<EvalRow> evaluate_model(const Model<float>& m, const ExperimentConfig& cfg) {
  validate_config(cfg);
  SceneSet scenes = build_scenes(cfg.data);
  if (scenes.test.empty()) fail("no test scenes available");
  NoGradGuard noguard;

  const std::string vname = variant_name(m.variant);
  const BandwidthReport bw = bandwidth_report(vname, cfg.data.W / 2, cfg.data.H / 2, cfg.model.l,
                                              m.dims.quant_bits);
  std::vector<EvalRow> rows;
  for (size_t ci = 0; ci < cfg.eval.channels.size(); ++ci) {
    const std::string& cname = cfg.eval.channels[ci];
    const ChannelKind kind = parse_channel(cname);
    const uint64_t ckey = hash_name(cname.c_str());
    for (size_t si = 0; si < cfg.eval.snr_list_db.size(); ++si) {
      for (uint64_t seed : cfg.eval.seeds) {
        for (size_t scn = 0; scn < scenes.test.size(); ++scn) {
          const SceneTriple& t = scenes.test[scn];
          ChannelConfig ch;
          ch.kind = kind;
          ch.snr_db = cfg.eval.snr_list_db[si];
          ch.seed = substream(substream(substream(seed, ckey), uint64_t(si)), uint64_t(scn));
          Tensor<float> x1 = cube_to_tensor<float>(t.lr_hsi);
          Tensor<float> x2 = rgb_to_tensor<float>(t.hr_rgb);
          ForwardResult<float> out = forward(m, x1, x2, ch, /*quantized_masks=*/true);
          HsiCube y_hat = tensor_to_cube(out.y_hat);

          EvalRow r;
          r.variant = vname;
          r.channel = cname;
          r.snr_db = ch.snr_db;
          r.seed = seed;
          r.scene = int(scn);
          r.mse = mse(t.hr_hsi, y_hat);
          r.psnr_db = psnr_from_mse(r.mse);
          r.ssim = ssim(t.hr_hsi, y_hat);
          r.symbols = bw.symbols;
          r.mask_bytes = bw.mask_bytes;
          rows.push_back(std::move(r));
        }
      }
    }
  }
  return rows;
}

std::vector<EvalRow> evaluate_checkpoint(const std::string& ckpt_path,
                                         const ExperimentConfig& cfg) {
  ExperimentConfig stored;
  Model<float> m = load_model(ckpt_path, &stored);
  ExperimentConfig merged = stored;  // data/model/variant as trained
  merged.eval = cfg.eval;
  merged.out_dir = cfg.out_dir;
  return evaluate_model(m, merged);
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail("cannot write " + path);
  f << kEvalCsvHeader << '\n';
  for (const EvalRow& r : rows)
    f << r.variant << ',' << r.channel << ',' << fmt_general(r.snr_db) << ',' << r.seed << ','
      << r.scene << ',' << fmt_fixed(r.psnr_db, 6) << ',' << fmt_fixed(r.ssim, 6) << ','
      << fmt_sci(r.mse) << ',' << r.symbols << ',' << r.mask_bytes << '\n';
  if (!f) fail("write failed for " + path);
}

AblationResult run_ablation(ExperimentConfig cfg, int jobs) {
  validate_config(cfg);
  static const char* kOrder[] = {"full", "proposed", "separate", "basic", "hsi_only", "rgb_only"};
  fs::create_directories(cfg.out_dir);

  AblationResult result;
  for (const char* v : kOrder)
    for (uint64_t seed : cfg.eval.seeds) {
      AblationRun run;
      run.variant = v;
      run.seed = seed;
      result.runs.push_back(std::move(run));
    }

  auto do_run = [&cfg](AblationRun& run) {
    ExperimentConfig sub = cfg;
    sub.variant = run.variant;
    sub.train.seed = run.seed;      // the replicate seed drives init + batch order
    sub.eval.seeds = {run.seed};
    sub.out_dir = cfg.out_dir + "/" + run.variant + "_s" + std::to_string(run.seed);
    run.stats = train_experiment(sub);
    Model<float> m = load_model(run.stats.checkpoint_path);
    run.rows = evaluate_model(m, sub);
    write_eval_csv(sub.out_dir + "/eval.csv", run.rows);
  };

  if (jobs <= 1) {
    for (AblationRun& r : result.runs) do_run(r);
  } else {
    std::atomic<size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> workers;
    const int n = std::min<int>(jobs, int(result.runs.size()));
    for (int w = 0; w < n; ++w)
      workers.emplace_back([&] {
        for (;;) {
          const size_t i = next.fetch_add(1);
          if (i >= result.runs.size()) return;
          try {
            do_run(result.runs[i]);
          } catch (...) {
            std::lock_guard<std::mutex> lk(err_mu);
            if (!err) err = std::current_exception();
            return;
          }
        }
      });
    for (std::thread& w : workers) w.join();
    if (err) std::rethrow_exception(err);
  }

  std::vector<EvalRow> all;
  for (const AblationRun& r : result.runs) all.insert(all.end(), r.rows.begin(), r.rows.end());
  result.runs_csv = cfg.out_dir + "/ablate_runs.csv";
  write_eval_csv(result.runs_csv, all);

  result.summary_csv = cfg.out_dir + "/ablate_summary.csv";
  std::ofstream f(result.summary_csv, std::ios::trunc);
  if (!f) fail("cannot write " + result.summary_csv);
  f << "variant,symbols,mask_bytes,bandwidth_vs_full";
  for (double s : cfg.eval.snr_list_db) f << ",psnr_" << fmt_general(s) << "db";
  f << '\n';
  for (const char* v : kOrder) {
    const BandwidthReport bw =
        bandwidth_report(v, cfg.data.W / 2, cfg.data.H / 2, cfg.model.l, 8);
    f << v << ',' << bw.symbols << ',' << bw.mask_bytes << ',' << bw.ratio_num << '/'
      << bw.ratio_den;
    for (double s : cfg.eval.snr_list_db) {
      double sum = 0;
      int n = 0;
      for (const EvalRow& r : all)
        if (r.variant == v && r.snr_db == s) {
          sum += r.psnr_db;
          ++n;
        }
      f << ',' << fmt_fixed(n ? sum / n : 0.0, 6);
    }
    f << '\n';
  }
  if (!f) fail("write failed for " + result.summary_csv);
  return result;
}

std::vector<EvalRow> run_single_source(const ExperimentConfig& cfg) {
  if (cfg.variant != "hsi_only" && cfg.variant != "rgb_only")
    fail("single-source runs need variant hsi_only or rgb_only, got \"" + cfg.variant + "\"");
  TrainStats st = train_experiment(cfg);
  Model<float> m = load_model(st.checkpoint_path);
  std::vector<EvalRow> rows = evaluate_model(m, cfg);
  write_eval_csv(cfg.out_dir + "/eval.csv", rows);
  return rows;
}

}  // namespace hfsc
