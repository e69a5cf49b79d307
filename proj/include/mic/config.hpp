#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mic/numerics.hpp"
#include "mic/prompt.hpp"
#include "mic/synthtask.hpp"

namespace mic {

// Every hyperparameter of both training procedures. Values in the first two
// groups default to the reference settings; step counts, batch sizes and
// learning rates are scaled for desk-size worlds.
struct TrainConfig {
  // Procedure A: prompt learning.
  double tau = 0.01;
  std::size_t fg_length = 8;
  std::size_t bg_length = 10;
  TokenPosition token_position = TokenPosition::end;
  std::size_t meta_k = 0;  // 0 selects ceil(0.75 * |C_B|)
  double prompt_lr = 0.002;
  std::size_t prompt_steps = 300;
  std::size_t prompt_batch = 64;
  std::size_t batch_classes = 8;
  double neg_fraction = 0.1;
  double prompt_lr_decay = 0.1;
  double prompt_decay_at = 2.0 / 3.0;
  std::size_t iou_levels = 5;  // 1 trains a single prompt on all IoU >= 0.5 positives
  bool joint_grads = false;
  bool bg_from_p = true;
  bool learn_fg = true;
  bool learn_bg = true;

  // Procedure B: detector-analog training.
  double gamma = 0.1;
  double alpha0 = 0.1;
  std::size_t bank_capacity = 256;
  std::size_t bank_sample = 16;
  double u_pos = 0.7;
  double u_neg = 0.01;
  double detector_lr = 0.05;
  std::size_t detector_steps = 2000;
  std::size_t warmup_steps = 0;  // 0 scales the 10k-of-90k warmup fraction to detector_steps
  double warmup_factor = 1e-4;
  double momentum = 0.9;
  double tau_cls = 0.02;
  std::size_t detector_batch = 16;
  std::size_t detector_bg = 8;
  double fg_iou_threshold = 0.5;
  std::size_t proj_hidden = 0;  // 0 uses the input dimension
  std::size_t proj_dim = 16;
  bool use_adapter = true;
  bool literal_icl_denominator = false;

  // Data volumes.
  std::size_t train_per_class = 200;
  std::size_t train_background = 800;
  std::size_t test_per_class = 100;
  std::size_t test_background = 500;

  std::uint64_t seed = 1;

  std::size_t sampled_classes(std::size_t n_base) const {
    if (meta_k != 0) return meta_k;
    return static_cast<std::size_t>(std::ceil(0.75 * static_cast<double>(n_base)));
  }

  std::size_t effective_warmup() const {
    if (warmup_steps != 0) return warmup_steps;
    return detector_steps * 10000 / 90000;
  }

  void validate() const {
    check_temperature(tau);
    check_temperature(gamma);
    check_temperature(tau_cls);
    if (fg_length == 0 || bg_length == 0) throw ConfigError("context lengths must be at least 1");
    if (prompt_lr < 0.0 || detector_lr < 0.0) throw ConfigError("learning rates must be non-negative");
    if (alpha0 < 0.0) throw ConfigError("alpha0 must be non-negative");
    if (!(0.0 <= u_neg && u_neg < u_pos && u_pos <= 1.0)) throw ConfigError("thresholds need 0 <= U_n < U_p <= 1");
    if (bank_sample >= bank_capacity) throw ConfigError("bank sample size m must be smaller than capacity M");
    if (prompt_batch == 0 || batch_classes == 0 || detector_batch == 0) throw ConfigError("batch sizes must be positive");
    if (neg_fraction < 0.0 || neg_fraction >= 1.0) throw ConfigError("neg_fraction must lie in [0, 1)");
    if (iou_levels != 1 && iou_levels != kIouLevels) throw ConfigError("iou_levels must be 1 or 5");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (proj_dim == 0) throw ConfigError("projection dimension must be positive");
  }
};

// Everything a CLI run needs: the world, the training hyperparameters and
// the sweep settings.
struct RunConfig {
  TaskSpec world;
  TrainConfig train;
  std::vector<std::size_t> sweep_k = {10, 15, 20, 25, 30, 35, 40};
  std::size_t sweep_seeds = 5;
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("expected a boolean but found '" + v + "'");
}

template <typename T>
T parse_number(const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError("cannot parse '" + v + "' as a number");
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(parse_number<std::size_t>(tok.substr(b, e - b + 1)));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

template <typename T>
Setter number(T TrainConfig::*field) {
  return [field](RunConfig& rc, const std::string& v) { rc.train.*field = parse_number<T>(v); };
}
template <typename T>
Setter world_number(T TaskSpec::*field) {
  return [field](RunConfig& rc, const std::string& v) { rc.world.*field = parse_number<T>(v); };
}
inline Setter flag(bool TrainConfig::*field) {
  return [field](RunConfig& rc, const std::string& v) { rc.train.*field = parse_bool(v); };
}

inline const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = {
      // world
      {"n_base", world_number(&TaskSpec::n_base)},
      {"n_novel", world_number(&TaskSpec::n_novel)},
      {"dim", world_number(&TaskSpec::dim)},
      {"cluster_count", world_number(&TaskSpec::cluster_count)},
      {"spread", world_number(&TaskSpec::spread)},
      {"proposal_sigma", world_number(&TaskSpec::proposal_sigma)},
      {"iou_alpha", world_number(&TaskSpec::iou_alpha)},
      {"iou_beta", world_number(&TaskSpec::iou_beta)},
      {"bg_iou_max", world_number(&TaskSpec::bg_iou_max)},
      {"bg_noise", world_number(&TaskSpec::bg_noise)},
      {"iou_mix", world_number(&TaskSpec::iou_mix)},
      {"word_noise", world_number(&TaskSpec::word_noise)},
      {"text_offset", world_number(&TaskSpec::text_offset)},
      {"identity_text_map",
       [](RunConfig& rc, const std::string& v) { rc.world.identity_text_map = parse_bool(v); }},
      {"world_seed", world_number(&TaskSpec::seed)},
      // procedure A
      {"tau", number(&TrainConfig::tau)},
      {"fg_length", number(&TrainConfig::fg_length)},
      {"bg_length", number(&TrainConfig::bg_length)},
      {"token_position",
       [](RunConfig& rc, const std::string& v) { rc.train.token_position = parse_token_position(v); }},
      {"meta_k", number(&TrainConfig::meta_k)},
      {"prompt_lr", number(&TrainConfig::prompt_lr)},
      {"prompt_steps", number(&TrainConfig::prompt_steps)},
      {"prompt_batch", number(&TrainConfig::prompt_batch)},
      {"batch_classes", number(&TrainConfig::batch_classes)},
      {"neg_fraction", number(&TrainConfig::neg_fraction)},
      {"prompt_lr_decay", number(&TrainConfig::prompt_lr_decay)},
      {"prompt_decay_at", number(&TrainConfig::prompt_decay_at)},
      {"iou_levels", number(&TrainConfig::iou_levels)},
      {"joint_grads", flag(&TrainConfig::joint_grads)},
      {"bg_from_p", flag(&TrainConfig::bg_from_p)},
      {"learn_fg", flag(&TrainConfig::learn_fg)},
      {"learn_bg", flag(&TrainConfig::learn_bg)},
      // procedure B
      {"gamma", number(&TrainConfig::gamma)},
      {"alpha0", number(&TrainConfig::alpha0)},
      {"bank_capacity", number(&TrainConfig::bank_capacity)},
      {"bank_sample", number(&TrainConfig::bank_sample)},
      {"u_pos", number(&TrainConfig::u_pos)},
      {"u_neg", number(&TrainConfig::u_neg)},
      {"detector_lr", number(&TrainConfig::detector_lr)},
      {"detector_steps", number(&TrainConfig::detector_steps)},
      {"warmup_steps", number(&TrainConfig::warmup_steps)},
      {"warmup_factor", number(&TrainConfig::warmup_factor)},
      {"momentum", number(&TrainConfig::momentum)},
      {"tau_cls", number(&TrainConfig::tau_cls)},
      {"detector_batch", number(&TrainConfig::detector_batch)},
      {"detector_bg", number(&TrainConfig::detector_bg)},
      {"fg_iou_threshold", number(&TrainConfig::fg_iou_threshold)},
      {"proj_hidden", number(&TrainConfig::proj_hidden)},
      {"proj_dim", number(&TrainConfig::proj_dim)},
      {"use_adapter", flag(&TrainConfig::use_adapter)},
      {"literal_icl_denominator", flag(&TrainConfig::literal_icl_denominator)},
      // data
      {"train_per_class", number(&TrainConfig::train_per_class)},
      {"train_background", number(&TrainConfig::train_background)},
      {"test_per_class", number(&TrainConfig::test_per_class)},
      {"test_background", number(&TrainConfig::test_background)},
      {"seed", number(&TrainConfig::seed)},
      // sweeps
      {"sweep_k", [](RunConfig& rc, const std::string& v) { rc.sweep_k = parse_list(v); }},
      {"sweep_seeds",
       [](RunConfig& rc, const std::string& v) { rc.sweep_seeds = parse_number<std::size_t>(v); }},
  };
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& rc, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(rc, value);
}

// Flat `key = value` lines; '#' starts a comment.
inline RunConfig parse_config(std::istream& is, RunConfig rc = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(rc, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  rc.world.validate();
  rc.train.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

inline void write_config(std::ostream& os, const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  const TaskSpec& w = rc.world;
  auto kv = [&os](const char* k, const auto& v) { os << k << " = " << v << '\n'; };
  auto kd = [&os](const char* k, double v) { os << k << " = " << format_double(v) << '\n'; };
  kv("n_base", w.n_base);
  kv("n_novel", w.n_novel);
  kv("dim", w.dim);
  kv("cluster_count", w.cluster_count);
  kd("spread", w.spread);
  kd("proposal_sigma", w.proposal_sigma);
  kd("iou_alpha", w.iou_alpha);
  kd("iou_beta", w.iou_beta);
  kd("bg_iou_max", w.bg_iou_max);
  kd("bg_noise", w.bg_noise);
  kd("iou_mix", w.iou_mix);
  kd("word_noise", w.word_noise);
  kd("text_offset", w.text_offset);
  kv("identity_text_map", w.identity_text_map ? 1 : 0);
  kv("world_seed", w.seed);
  kd("tau", t.tau);
  kv("fg_length", t.fg_length);
  kv("bg_length", t.bg_length);
  kv("token_position", to_string(t.token_position));
  kv("meta_k", t.meta_k);
  kd("prompt_lr", t.prompt_lr);
  kv("prompt_steps", t.prompt_steps);
  kv("prompt_batch", t.prompt_batch);
  kv("batch_classes", t.batch_classes);
  kd("neg_fraction", t.neg_fraction);
  kd("prompt_lr_decay", t.prompt_lr_decay);
  kd("prompt_decay_at", t.prompt_decay_at);
  kv("iou_levels", t.iou_levels);
  kv("joint_grads", t.joint_grads ? 1 : 0);
  kv("bg_from_p", t.bg_from_p ? 1 : 0);
  kv("learn_fg", t.learn_fg ? 1 : 0);
  kv("learn_bg", t.learn_bg ? 1 : 0);
  kd("gamma", t.gamma);
  kd("alpha0", t.alpha0);
  kv("bank_capacity", t.bank_capacity);
  kv("bank_sample", t.bank_sample);
  kd("u_pos", t.u_pos);
  kd("u_neg", t.u_neg);
  kd("detector_lr", t.detector_lr);
  kv("detector_steps", t.detector_steps);
  kv("warmup_steps", t.warmup_steps);
  kd("warmup_factor", t.warmup_factor);
  kd("momentum", t.momentum);
  kd("tau_cls", t.tau_cls);
  kv("detector_batch", t.detector_batch);
  kv("detector_bg", t.detector_bg);
  kd("fg_iou_threshold", t.fg_iou_threshold);
  kv("proj_hidden", t.proj_hidden);
  kv("proj_dim", t.proj_dim);
  kv("use_adapter", t.use_adapter ? 1 : 0);
  kv("literal_icl_denominator", t.literal_icl_denominator ? 1 : 0);
  kv("train_per_class", t.train_per_class);
  kv("train_background", t.train_background);
  kv("test_per_class", t.test_per_class);
  kv("test_background", t.test_background);
  kv("seed", t.seed);
  os << "sweep_k = ";
  for (std::size_t i = 0; i < rc.sweep_k.size(); ++i) os << (i ? "," : "") << rc.sweep_k[i];
  os << '\n';
  kv("sweep_seeds", rc.sweep_seeds);
}

}  // namespace mic
