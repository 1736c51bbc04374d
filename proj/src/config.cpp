#include "hfsc/config.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace hfsc {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("config: " + msg); }

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known) fail("unknown key \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
void get_to(const json& obj, const char* key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception& e) {
    fail("bad value for \"" + std::string(key) + "\" in " + where + ": " + e.what());
  }
}

// SNR values admit the strings "inf"/"-inf" since JSON numbers cannot.
double snr_from_json(const json& v, const std::string& where) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    fail("bad SNR value \"" + s + "\" in " + where);
  }
  if (!v.is_number()) fail("SNR values in " + where + " must be numbers or \"inf\"");
  return v.get<double>();
}

void get_snr(const json& obj, const char* key, const std::string& where, double& out) {
  if (obj.contains(key)) out = snr_from_json(obj.at(key), where);
}

json snr_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return json(v);
}

void parse_data(const json& j, DataConfig& d) {
  check_keys(j, "data", {"source", "W", "H", "L", "scale", "scenes", "seed"});
  get_to(j, "source", "data", d.source);
  get_to(j, "W", "data", d.W);
  get_to(j, "H", "data", d.H);
  get_to(j, "L", "data", d.L);
  get_to(j, "scale", "data", d.scale);
  get_to(j, "scenes", "data", d.scenes);
  get_to(j, "seed", "data", d.seed);
}

void parse_model(const json& j, ModelConfig& m) {
  check_keys(j, "model", {"l", "c_mid", "heads"});
  get_to(j, "l", "model", m.l);
  get_to(j, "c_mid", "model", m.c_mid);
  get_to(j, "heads", "model", m.heads);
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j, "train",
             {"steps", "batch", "lr", "snr_min_db", "snr_max_db", "channel_kind", "seed"});
  get_to(j, "steps", "train", t.steps);
  get_to(j, "batch", "train", t.batch);
  get_to(j, "lr", "train", t.lr);
  get_snr(j, "snr_min_db", "train", t.snr_min_db);
  get_snr(j, "snr_max_db", "train", t.snr_max_db);
  get_to(j, "channel_kind", "train", t.channel_kind);
  get_to(j, "seed", "train", t.seed);
}

void parse_eval(const json& j, EvalConfig& e) {
  check_keys(j, "eval", {"snr_list_db", "channels", "seeds"});
  if (j.contains("snr_list_db")) {
    const json& list = j.at("snr_list_db");
    if (!list.is_array()) fail("snr_list_db in eval must be an array");
    e.snr_list_db.clear();
    for (const json& v : list) e.snr_list_db.push_back(snr_from_json(v, "eval"));
  }
  get_to(j, "channels", "eval", e.channels);
  get_to(j, "seeds", "eval", e.seeds);
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  check_keys(j, "config", {"variant", "data", "model", "train", "eval", "out_dir"});
  get_to(j, "variant", "config", cfg.variant);
  get_to(j, "out_dir", "config", cfg.out_dir);
  if (j.contains("data")) parse_data(j.at("data"), cfg.data);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void validate_config(const ExperimentConfig& cfg) {
  static const char* kVariants[] = {"full",  "proposed", "separate",
                                    "basic", "hsi_only", "rgb_only"};
  bool ok = false;
  for (const char* v : kVariants) ok = ok || cfg.variant == v;
  if (!ok) fail("unknown variant \"" + cfg.variant + "\"");

  const DataConfig& d = cfg.data;
  if (d.W < 2 || d.H < 2 || d.L < 3) fail("data extents too small (need W,H >= 2 and L >= 3)");
  if (d.scale < 1) fail("scale must be >= 1");
  if (d.W % d.scale != 0 || d.H % d.scale != 0) fail("W and H must be divisible by scale");
  if (d.W % 2 != 0 || d.H % 2 != 0) fail("W and H must be even");
  if (d.W < 2 * d.scale || d.H < 2 * d.scale) fail("W and H must be at least 2*scale");
  if (d.scenes < 1) fail("scenes must be >= 1");
  if (d.source.empty()) fail("data source must not be empty");

  const ModelConfig& m = cfg.model;
  if (m.l < 1 || m.c_mid < 1) fail("l and c_mid must be >= 1");
  if (m.heads < 1) fail("heads must be >= 1");
  if (m.l < m.heads) fail("l must be >= heads");
  if (m.l % m.heads != 0) fail("l must be divisible by heads");

  const TrainConfig& t = cfg.train;
  if (t.steps < 1) fail("steps must be >= 1");
  if (t.batch < 1) fail("batch must be >= 1");
  if (!(t.lr > 0)) fail("lr must be positive");
  if (t.snr_min_db > t.snr_max_db) fail("snr_min_db must be <= snr_max_db");
  if (t.channel_kind != "awgn" && t.channel_kind != "rayleigh" && t.channel_kind != "mimo")
    fail("unknown channel_kind \"" + t.channel_kind + "\"");

  const EvalConfig& e = cfg.eval;
  if (e.snr_list_db.empty()) fail("eval snr_list_db must not be empty");
  if (e.channels.empty()) fail("eval channels must not be empty");
  if (e.seeds.empty()) fail("eval seeds must not be empty");
  for (const std::string& c : e.channels)
    if (c != "awgn" && c != "rayleigh" && c != "mimo")
      fail("unknown eval channel \"" + c + "\"");
  if (cfg.out_dir.empty()) fail("out_dir must not be empty");
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["variant"] = cfg.variant;
  j["data"] = {{"source", cfg.data.source}, {"W", cfg.data.W},         {"H", cfg.data.H},
               {"L", cfg.data.L},           {"scale", cfg.data.scale}, {"scenes", cfg.data.scenes},
               {"seed", cfg.data.seed}};
  j["model"] = {{"l", cfg.model.l}, {"c_mid", cfg.model.c_mid}, {"heads", cfg.model.heads}};
  j["train"] = {{"steps", cfg.train.steps},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.lr},
                {"snr_min_db", snr_to_json(cfg.train.snr_min_db)},
                {"snr_max_db", snr_to_json(cfg.train.snr_max_db)},
                {"channel_kind", cfg.train.channel_kind},
                {"seed", cfg.train.seed}};
  json snrs = json::array();
  for (double v : cfg.eval.snr_list_db) snrs.push_back(snr_to_json(v));
  j["eval"] = {{"snr_list_db", std::move(snrs)},
               {"channels", cfg.eval.channels},
               {"seeds", cfg.eval.seeds}};
  j["out_dir"] = cfg.out_dir;
  return j.dump(2);
}

}  // namespace hfsc
