#pragma once

// Config-driven sweeps of the preference-based FQE pipeline.
//
// A run expands the grid D x K x K_HF into cells, executes every (cell, seed)
// task on a small worker pool and appends one row per task to records.csv in
// canonical order. Output directory layout:
//
//   manifest.json          config, config hash, cell list, timestamps
//   records.csv            seed,K,K_HF,D,d,H,v_hat,v_true,abs_err,reward_mse_mean,runtime_s,cell_hash
//   reward_metrics_D<D>.csv  h,seed,K_HF,reward_mse,stderr,nonzeros
//   diagnostics_D<D>.csv   h,kind,chi2_restricted,chi2_pearson,probe_count
//   env_D<D>.json          serialized environment (for verify)
//   policies.json          target and behavior policy tables
//   timings.csv            wall-clock seconds per task
//   failed.csv             tasks that raised, with the error message
//
// Randomness. Transition data depends on (seed, D, K), preference data and
// the reward fit on (seed, D, K_HF), and the Q fits on (seed, cell hash). A
// reward fit is therefore shared by every K at the same (D, K_HF, seed) and is
// computed once per run.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "pbfqe/divergence.hpp"
#include "pbfqe/error.hpp"
#include "pbfqe/fqe.hpp"
#include "pbfqe/json_io.hpp"
#include "pbfqe/mdp.hpp"
#include "pbfqe/relu_net.hpp"
#include "pbfqe/reward_mle.hpp"
#include "pbfqe/stats.hpp"
#include "pbfqe/synthetic_env.hpp"

namespace pbfqe {

namespace fs = std::filesystem;

inline constexpr const char* kRecordsHeader =
    "seed,K,K_HF,D,d,H,v_hat,v_true,abs_err,reward_mse_mean,runtime_s,cell_hash";
inline constexpr const char* kRewardMetricsHeader = "h,seed,K_HF,reward_mse,stderr,nonzeros";
inline constexpr const char* kTimingsHeader = "seed,K,K_HF,D,cell_hash,runtime_s";
inline constexpr const char* kFailedHeader = "seed,K,K_HF,D,cell_hash,error";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Locates keys in the raw config text so errors can name a line.
class ConfigSource {
 public:
  ConfigSource(std::string text, std::string name) : text_(std::move(text)), name_(std::move(name)) {}

  const std::string& text() const { return text_; }

  int line_of_offset(std::size_t offset) const {
    offset = std::min(offset, text_.size());
    return 1 + static_cast<int>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
  }

  /// Line of the first occurrence of "key" after the first occurrence of
  /// "parent" (if given); 1 when not found.
  int line_of(const std::string& key, const std::string& parent = {}) const {
    std::size_t from = 0;
    if (!parent.empty()) {
      const auto p = text_.find('"' + parent + '"');
      if (p != std::string::npos) from = p;
    }
    const auto k = text_.find('"' + key + '"', from);
    return k == std::string::npos ? 1 : line_of_offset(k);
  }

  [[noreturn]] void fail(int line, const std::string& msg) const {
    throw ConfigError(name_ + ":" + std::to_string(line) + ": " + msg);
  }
  [[noreturn]] void fail_at(const std::string& key, const std::string& msg, const std::string& parent = {}) const {
    fail(line_of(key, parent), msg);
  }

 private:
  std::string text_;
  std::string name_;
};

/// Target, behavior or exploration policy description.
///   uniform                      1/|A| everywhere
///   softmax {temperature, seed}  random softmax policy
///   action_mix {action, weight}  (1 - weight) uniform + weight * delta_action
struct PolicySpec {
  std::string kind = "uniform";
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int action = 0;
  double weight = 1.0;

  Policy build(int horizon, int num_states, int num_actions) const {
    const Policy u = Policy::uniform(horizon, num_states, num_actions);
    if (kind == "uniform") return u;
    if (kind == "softmax") return Policy::random_softmax(horizon, num_states, num_actions, temperature, seed);
    if (kind == "action_mix") {
      const Policy det = Policy::deterministic(
          num_actions, std::vector<std::vector<int>>(static_cast<std::size_t>(horizon),
                                                     std::vector<int>(static_cast<std::size_t>(num_states), action)));
      return Policy::mixture(u, det, weight);
    }
    throw ConfigError("unknown policy kind '" + kind + "'");
  }

  Json to_json() const {
    if (kind == "softmax") return {{"kind", kind}, {"temperature", temperature}, {"seed", seed}};
    if (kind == "action_mix") return {{"kind", kind}, {"action", action}, {"weight", weight}};
    return {{"kind", kind}};
  }
};

/// Optional per-network overrides applied after the preset.
struct NetOverrides {
  std::optional<int> hidden_layers;
  std::optional<int> width;
  std::optional<double> weight_bound;
  std::optional<double> learning_rate;
  std::optional<int> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> boundary_penalty;

  void apply(NetConfig& net, OptimizerConfig& opt) const {
    if (hidden_layers) net.hidden_layers = *hidden_layers;
    if (width) net.width = *width;
    if (weight_bound) net.weight_bound = *weight_bound;
    if (learning_rate) opt.learning_rate = *learning_rate;
    if (epochs) opt.epochs = *epochs;
    if (batch_size) opt.batch_size = *batch_size;
    if (boundary_penalty) opt.boundary_penalty = *boundary_penalty;
  }

  Json to_json() const {
    Json j = Json::object();
    if (hidden_layers) j["hidden_layers"] = *hidden_layers;
    if (width) j["width"] = *width;
    if (weight_bound) j["weight_bound"] = *weight_bound;
    if (learning_rate) j["learning_rate"] = *learning_rate;
    if (epochs) j["epochs"] = *epochs;
    if (batch_size) j["batch_size"] = *batch_size;
    if (boundary_penalty) j["boundary_penalty"] = *boundary_penalty;
    return j;
  }
};

struct ExperimentConfig {
  EnvConfig env;
  PolicySpec target;
  PolicySpec behavior;
  /// eta_h: the occupancy of `eta_policy` (default), or uniform over pairs.
  std::string eta = "occupancy";
  PolicySpec eta_policy;
  std::vector<std::size_t> K;
  std::vector<std::size_t> K_HF;
  std::vector<int> D;
  std::vector<std::uint64_t> seeds;
  RewardSource reward = RewardSource::kLearned;
  QMode q_mode = QMode::kNeural;
  /// default | small | paper_scaling
  std::string preset = "default";
  /// Smoothness alpha used by the paper_scaling preset.
  double smoothness = 2.0;
  NetOverrides reward_net;
  NetOverrides q_net;
  std::size_t reward_eval_samples = 20000;
  std::size_t probe_relu_count = 64;
  std::string output_dir = "out";
  /// Write measured seconds into runtime_s; off keeps records byte-stable.
  bool record_runtime = false;

  /// Canonical form: every field explicit, used for hashing and the manifest.
  Json to_json() const {
    return {{"env", env.to_json()},
            {"target_policy", target.to_json()},
            {"behavior_policy", behavior.to_json()},
            {"eta", eta == "uniform" ? Json{{"kind", "uniform"}}
                                      : Json{{"kind", "occupancy"}, {"policy", eta_policy.to_json()}}},
            {"grid", {{"K", K}, {"K_HF", K_HF}, {"D", D}}},
            {"seeds", seeds},
            {"reward", reward == RewardSource::kLearned ? "learned" : "oracle"},
            {"q_mode", q_mode == QMode::kNeural ? "neural" : "tabular"},
            {"preset", preset},
            {"smoothness", smoothness},
            {"reward_net", reward_net.to_json()},
            {"q_net", q_net.to_json()},
            {"reward_eval_samples", reward_eval_samples},
            {"probe_relu_count", probe_relu_count},
            {"output_dir", output_dir},
            {"record_runtime", record_runtime}};
  }

  /// Reward-fit and FQE settings for one grid cell.
  PipelineConfig pipeline(std::size_t k, std::size_t k_hf, int ambient) const {
    PipelineConfig pc;
    pc.reward = reward;
    pc.fqe.mode = q_mode;
    pc.reward_eval_samples = reward_eval_samples;
    if (preset == "small") {
      for (NetConfig* n : {&pc.reward_fit.net, &pc.fqe.net}) {
        n->hidden_layers = 1;
        n->width = 16;
      }
      pc.reward_fit.opt.epochs = 600;
      pc.fqe.opt.epochs = 600;
    } else if (preset == "paper_scaling") {
      const int H = env.horizon;
      pc.reward_fit.net = paper_scaling(std::max<std::size_t>(k_hf, 2), env.intrinsic_dim, smoothness, ambient, 0.0, 1.0);
      pc.fqe.net = paper_scaling(std::max<std::size_t>(k, 2), env.intrinsic_dim, smoothness, ambient, -H, H);
    }
    reward_net.apply(pc.reward_fit.net, pc.reward_fit.opt);
    q_net.apply(pc.fqe.net, pc.fqe.opt);
    pc.reward_fit.net.input_dim = ambient;
    pc.fqe.net.input_dim = ambient;
    return pc;
  }
};

namespace detail {

inline void check_keys(const ConfigSource& src, const Json& obj, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!obj.is_object()) src.fail_at(where, "'" + where + "' must be an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) src.fail_at(key, "unknown key '" + key + "' in " + where, where == "config" ? "" : where);
}

template <typename T>
T get_as(const ConfigSource& src, const Json& obj, const std::string& key, const std::string& parent = {}) {
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    src.fail_at(key, "key '" + key + "' has the wrong type", parent);
  }
}

inline PolicySpec parse_policy(const ConfigSource& src, const Json& j, const std::string& key) {
  check_keys(src, j, {"kind", "temperature", "seed", "action", "weight"}, key);
  PolicySpec p;
  if (j.contains("kind")) p.kind = get_as<std::string>(src, j, "kind", key);
  if (p.kind != "uniform" && p.kind != "softmax" && p.kind != "action_mix")
    src.fail_at("kind", "policy kind must be uniform, softmax or action_mix", key);
  if (j.contains("temperature")) p.temperature = get_as<double>(src, j, "temperature", key);
  if (j.contains("seed")) p.seed = get_as<std::uint64_t>(src, j, "seed", key);
  if (j.contains("action")) p.action = get_as<int>(src, j, "action", key);
  if (j.contains("weight")) p.weight = get_as<double>(src, j, "weight", key);
  if (!(p.temperature > 0.0)) src.fail_at("temperature", "temperature must be positive", key);
  if (!(p.weight >= 0.0 && p.weight <= 1.0)) src.fail_at("weight", "weight must lie in [0,1]", key);
  return p;
}

inline NetOverrides parse_overrides(const ConfigSource& src, const Json& j, const std::string& key) {
  check_keys(src, j,
             {"hidden_layers", "width", "weight_bound", "learning_rate", "epochs", "batch_size", "boundary_penalty"},
             key);
  NetOverrides o;
  if (j.contains("hidden_layers")) o.hidden_layers = get_as<int>(src, j, "hidden_layers", key);
  if (j.contains("width")) o.width = get_as<int>(src, j, "width", key);
  if (j.contains("weight_bound")) o.weight_bound = get_as<double>(src, j, "weight_bound", key);
  if (j.contains("learning_rate")) o.learning_rate = get_as<double>(src, j, "learning_rate", key);
  if (j.contains("epochs")) o.epochs = get_as<int>(src, j, "epochs", key);
  if (j.contains("batch_size")) o.batch_size = get_as<std::size_t>(src, j, "batch_size", key);
  if (j.contains("boundary_penalty")) o.boundary_penalty = get_as<double>(src, j, "boundary_penalty", key);
  if (o.hidden_layers && *o.hidden_layers < 0) src.fail_at("hidden_layers", "hidden_layers must be >= 0", key);
  if (o.width && *o.width < 1) src.fail_at("width", "width must be positive", key);
  if (o.weight_bound && !(*o.weight_bound > 0.0)) src.fail_at("weight_bound", "weight_bound must be positive", key);
  if (o.learning_rate && !(*o.learning_rate > 0.0)) src.fail_at("learning_rate", "learning_rate must be positive", key);
  if (o.epochs && *o.epochs < 1) src.fail_at("epochs", "epochs must be positive", key);
  if (o.boundary_penalty && !(*o.boundary_penalty >= 0.0))
    src.fail_at("boundary_penalty", "boundary_penalty must be >= 0", key);
  return o;
}

template <typename T>
std::vector<T> parse_positive_list(const ConfigSource& src, const Json& grid, const std::string& key) {
  const Json& arr = grid.at(key);
  if (!arr.is_array()) src.fail_at(key, "grid." + key + " must be an array", "grid");
  std::vector<T> out;
  for (const auto& v : arr) {
    if (!v.is_number_integer() || v.get<long long>() <= 0)
      src.fail_at(key, "grid." + key + " entries must be positive integers", "grid");
    out.push_back(v.get<T>());
  }
  return out;
}

}  // namespace detail

/// Parses and validates a config. Every error is a ConfigError of the form
/// "<name>:<line>: message".
inline ExperimentConfig parse_experiment_config(const std::string& text, const std::string& name = "config") {
  const ConfigSource src(text, name);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    src.fail(src.line_of_offset(e.byte == 0 ? 0 : e.byte - 1), std::string("invalid JSON: ") + e.what());
  }
  detail::check_keys(src, j,
                     {"env", "target_policy", "behavior_policy", "eta", "grid", "seeds", "reward", "q_mode", "preset",
                      "smoothness", "reward_net", "q_net", "reward_eval_samples", "probe_relu_count", "output_dir",
                      "record_runtime"},
                     "config");
  ExperimentConfig c;
  if (j.contains("env")) {
    try {
      c.env = EnvConfig::from_json(j.at("env"));
    } catch (const ConfigError& e) {
      src.fail_at("env", std::string("env: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
      src.fail_at("env", std::string("env: ") + e.what());
    }
  }
  if (j.contains("target_policy")) c.target = detail::parse_policy(src, j["target_policy"], "target_policy");
  if (j.contains("behavior_policy")) c.behavior = detail::parse_policy(src, j["behavior_policy"], "behavior_policy");
  for (const PolicySpec* p : {&c.target, &c.behavior})
    if (p->kind == "action_mix" && (p->action < 0 || p->action >= c.env.num_actions))
      src.fail_at("action", "policy action outside 0..num_actions-1");
  if (j.contains("eta")) {
    const Json& e = j["eta"];
    detail::check_keys(src, e, {"kind", "policy"}, "eta");
    c.eta = e.contains("kind") ? detail::get_as<std::string>(src, e, "kind", "eta") : "occupancy";
    if (c.eta != "uniform" && c.eta != "occupancy") src.fail_at("kind", "eta kind must be uniform or occupancy", "eta");
    if (e.contains("policy")) {
      if (c.eta != "occupancy") src.fail_at("policy", "eta.policy is only used by kind occupancy", "eta");
      c.eta_policy = detail::parse_policy(src, e["policy"], "policy");
    }
  }
  if (!j.contains("grid")) src.fail(1, "missing required key 'grid'");
  const Json& grid = j["grid"];
  detail::check_keys(src, grid, {"K", "K_HF", "D"}, "grid");
  if (!grid.contains("K") || !grid.contains("K_HF")) src.fail_at("grid", "grid needs K and K_HF");
  c.K = detail::parse_positive_list<std::size_t>(src, grid, "K");
  c.K_HF = detail::parse_positive_list<std::size_t>(src, grid, "K_HF");
  c.D = grid.contains("D") ? detail::parse_positive_list<int>(src, grid, "D") : std::vector<int>{c.env.ambient_dim};
  for (int d : c.D)
    if (d < c.env.intrinsic_dim) src.fail_at("D", "grid.D entries must be >= env.intrinsic_dim", "grid");
  const auto check_distinct = [&](auto v, const std::string& key) {
    std::sort(v.begin(), v.end());
    if (std::adjacent_find(v.begin(), v.end()) != v.end()) src.fail_at(key, key + " entries must be distinct");
  };
  check_distinct(c.K, "K");
  check_distinct(c.K_HF, "K_HF");
  check_distinct(c.D, "D");

  if (!j.contains("seeds")) src.fail(1, "missing required key 'seeds'");
  const Json& s = j["seeds"];
  if (s.is_array()) {
    for (const auto& v : s) {
      if (!v.is_number_unsigned()) src.fail_at("seeds", "seeds must be non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  } else if (s.is_object()) {
    detail::check_keys(src, s, {"first", "count"}, "seeds");
    const auto first = s.contains("first") ? detail::get_as<std::uint64_t>(src, s, "first", "seeds") : 0;
    const auto count = detail::get_as<std::uint64_t>(src, s, "count", "seeds");
    for (std::uint64_t i = 0; i < count; ++i) c.seeds.push_back(first + i);
  } else {
    src.fail_at("seeds", "seeds must be an array or {first, count}");
  }
  check_distinct(c.seeds, "seeds");

  if (j.contains("reward")) {
    const auto r = detail::get_as<std::string>(src, j, "reward");
    if (r != "learned" && r != "oracle") src.fail_at("reward", "reward must be learned or oracle");
    c.reward = r == "learned" ? RewardSource::kLearned : RewardSource::kOracle;
  }
  if (j.contains("q_mode")) {
    const auto q = detail::get_as<std::string>(src, j, "q_mode");
    if (q != "neural" && q != "tabular") src.fail_at("q_mode", "q_mode must be neural or tabular");
    c.q_mode = q == "neural" ? QMode::kNeural : QMode::kTabular;
  }
  if (j.contains("preset")) c.preset = detail::get_as<std::string>(src, j, "preset");
  if (c.preset != "default" && c.preset != "small" && c.preset != "paper_scaling")
    src.fail_at("preset", "preset must be default, small or paper_scaling");
  if (j.contains("smoothness")) c.smoothness = detail::get_as<double>(src, j, "smoothness");
  if (!(c.smoothness > 0.0)) src.fail_at("smoothness", "smoothness must be positive");
  if (j.contains("reward_net")) c.reward_net = detail::parse_overrides(src, j["reward_net"], "reward_net");
  if (j.contains("q_net")) c.q_net = detail::parse_overrides(src, j["q_net"], "q_net");
  if (j.contains("reward_eval_samples")) c.reward_eval_samples = detail::get_as<std::size_t>(src, j, "reward_eval_samples");
  if (c.reward_eval_samples < 1) src.fail_at("reward_eval_samples", "reward_eval_samples must be positive");
  if (j.contains("probe_relu_count")) c.probe_relu_count = detail::get_as<std::size_t>(src, j, "probe_relu_count");
  if (j.contains("output_dir")) c.output_dir = detail::get_as<std::string>(src, j, "output_dir");
  if (c.output_dir.empty()) src.fail_at("output_dir", "output_dir must not be empty");
  if (j.contains("record_runtime")) c.record_runtime = detail::get_as<bool>(src, j, "record_runtime");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ":1: cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path);
}

inline std::string config_hash(const ExperimentConfig& c) {
  Json j = c.to_json();
  j.erase("output_dir");  // where results go does not change them
  return hex64(fnv1a(to_json_string(j)));
}

// ---------------------------------------------------------------------------
// Cells and records
// ---------------------------------------------------------------------------

struct Cell {
  int D = 0;
  std::size_t K = 0;
  std::size_t K_HF = 0;
  std::string hash;
};

inline EnvConfig env_for(const ExperimentConfig& c, int ambient) {
  EnvConfig e = c.env;
  e.ambient_dim = ambient;
  if (e.identity_frame && e.intrinsic_dim != ambient) e.identity_frame = false;
  return e;
}

/// Grid cells in canonical order: D, then K, then K_HF.
inline std::vector<Cell> expand_grid(const ExperimentConfig& c) {
  std::vector<Cell> cells;
  for (int d : c.D)
    for (std::size_t k : c.K)
      for (std::size_t khf : c.K_HF) {
        const Json key = {{"env", env_for(c, d).to_json()},
                          {"target_policy", c.target.to_json()},
                          {"behavior_policy", c.behavior.to_json()},
                          {"eta", c.to_json()["eta"]},
                          {"K", k},
                          {"K_HF", khf},
                          {"reward", c.reward == RewardSource::kLearned ? "learned" : "oracle"},
                          {"q_mode", c.q_mode == QMode::kNeural ? "neural" : "tabular"},
                          {"reward_fit", {{"net", c.pipeline(k, khf, d).reward_fit.net.to_json()},
                                          {"opt", c.pipeline(k, khf, d).reward_fit.opt.to_json()}}},
                          {"fqe", {{"net", c.pipeline(k, khf, d).fqe.net.to_json()},
                                   {"opt", c.pipeline(k, khf, d).fqe.opt.to_json()}}},
                          {"reward_eval_samples", c.reward_eval_samples}};
        cells.push_back({d, k, khf, hex64(fnv1a(to_json_string(key)))});
      }
  return cells;
}

/// One row of records.csv plus the in-memory diagnostics.
struct ExperimentRecord {
  std::uint64_t seed = 0;
  std::size_t K = 0;
  std::size_t K_HF = 0;
  int D = 0;
  int d = 0;
  int H = 0;
  double v_hat = 0.0;
  double v_true = 0.0;
  double abs_err = 0.0;
  double reward_mse_mean = 0.0;
  double runtime_s = 0.0;
  std::string cell_hash;
  double kappa1 = 0.0;
  double kappa2 = 0.0;
  std::vector<MseEstimate> reward_mse;
  std::vector<std::size_t> reward_nonzeros;

  std::string csv_row() const {
    std::ostringstream o;
    o << seed << ',' << K << ',' << K_HF << ',' << D << ',' << d << ',' << H << ',' << format_double(v_hat) << ','
      << format_double(v_true) << ',' << format_double(std::abs(v_hat - v_true)) << ','
      << format_double(reward_mse_mean) << ',' << format_double(runtime_s) << ',' << cell_hash;
    return o.str();
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw RangeError("cannot parse " + what + " '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw RangeError("cannot parse " + what + " '" + s + "'");
  return std::stoull(s);
}

/// Complete lines of a file (a trailing line without '\n' is dropped).
inline std::vector<std::string> read_complete_lines(const fs::path& p) {
  std::vector<std::string> lines;
  std::ifstream in(p, std::ios::binary);
  if (!in) return lines;
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0;
  for (std::size_t i = 0; i < content.size(); ++i)
    if (content[i] == '\n') {
      lines.push_back(content.substr(start, i - start));
      start = i + 1;
    }
  return lines;
}

inline void write_lines(const fs::path& p, const std::string& header, const std::vector<std::string>& rows) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << header << '\n';
    for (const auto& r : rows) out << r << '\n';
  }
  fs::rename(tmp, p);
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

inline std::string csv_escape(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return s;
}

}  // namespace detail

inline ExperimentRecord parse_record(const std::string& line) {
  const auto f = detail::split_csv(line);
  if (f.size() != 12) throw RangeError("record has " + std::to_string(f.size()) + " fields, expected 12");
  ExperimentRecord r;
  r.seed = detail::parse_uint(f[0], "seed");
  r.K = detail::parse_uint(f[1], "K");
  r.K_HF = detail::parse_uint(f[2], "K_HF");
  r.D = static_cast<int>(detail::parse_uint(f[3], "D"));
  r.d = static_cast<int>(detail::parse_uint(f[4], "d"));
  r.H = static_cast<int>(detail::parse_uint(f[5], "H"));
  r.v_hat = detail::parse_double(f[6], "v_hat");
  r.v_true = detail::parse_double(f[7], "v_true");
  r.abs_err = detail::parse_double(f[8], "abs_err");
  r.reward_mse_mean = detail::parse_double(f[9], "reward_mse_mean");
  r.runtime_s = detail::parse_double(f[10], "runtime_s");
  r.cell_hash = f[11];
  if (r.cell_hash.size() != 16) throw RangeError("malformed cell_hash '" + r.cell_hash + "'");
  return r;
}

inline std::vector<ExperimentRecord> load_records(const std::string& path) {
  std::ifstream probe(path);
  if (!probe) throw RangeError("cannot open " + path);
  const auto lines = detail::read_complete_lines(path);
  if (lines.empty() || lines.front() != kRecordsHeader) throw RangeError(path + ": missing or unexpected header");
  std::vector<ExperimentRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    try {
      out.push_back(parse_record(lines[i]));
    } catch (const RangeError& e) {
      throw RangeError(path + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct RunOptions {
  unsigned workers = 1;
  /// Stop dispatching after this many tasks have been written (0 = no limit).
  /// Simulates an interruption.
  std::size_t stop_after = 0;
  /// Progress lines go here when set.
  std::ostream* log = nullptr;
};

/// Worker count from PBFQE_WORKERS, defaulting to the hardware concurrency.
inline unsigned workers_from_env() {
  if (const char* v = std::getenv("PBFQE_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) throw ConfigError("PBFQE_WORKERS must be a positive integer");
    return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct RunSummary {
  std::size_t tasks = 0;
  std::size_t skipped = 0;    // already recorded by an earlier run
  std::size_t completed = 0;  // recorded by this run
  std::size_t failed = 0;
  bool interrupted = false;
  std::vector<ExperimentRecord> records;  // those computed by this run, canonical order
  int exit_code() const { return failed > 0 ? 1 : 0; }
};

/// Per ambient dimension: the environment and everything derived from it.
struct EnvContext {
  EmbeddedMdp env;
  Policy target;
  Policy behavior;
  PairSampler eta;
  KappaProfile kappa;
};

inline EnvContext build_context(const ExperimentConfig& c, int ambient) {
  EnvContext ctx;
  ctx.env = make_embedded_mdp(env_for(c, ambient));
  const TabularMdp& m = ctx.env.latent();
  ctx.target = c.target.build(m.horizon(), m.num_states(), m.num_actions());
  ctx.behavior = c.behavior.build(m.horizon(), m.num_states(), m.num_actions());
  ctx.eta = c.eta == "uniform"
                ? PairSampler::uniform(m)
                : PairSampler::occupancy(m, c.eta_policy.build(m.horizon(), m.num_states(), m.num_actions()));
  const ProbeClass probes = default_probes(ctx.env.embedding(), c.probe_relu_count,
                                           derive_seed(c.env.seed, {0x70726f62ULL, static_cast<std::uint64_t>(ambient)}));
  ctx.kappa = kappa_profile(m, ctx.target, ctx.behavior, ctx.eta, probes);
  return ctx;
}

namespace detail {

inline constexpr std::uint64_t kTransitionTag = 0x7472616eULL;
inline constexpr std::uint64_t kPreferenceTag = 0x70726566ULL;
inline constexpr std::uint64_t kRewardTag = 0x72657764ULL;
inline constexpr std::uint64_t kFqeTag = 0x66716531ULL;

/// Computes each (D, K_HF, seed) reward stage once, whichever worker asks first.
class RewardCache {
 public:
  using Key = std::tuple<int, std::size_t, std::uint64_t>;

  RewardStage get(const Key& key, const std::function<RewardStage()>& compute) {
    std::shared_future<RewardStage> fut;
    std::promise<RewardStage> promise;
    bool owner = false;
    {
      std::lock_guard lock(mutex_);
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        fut = promise.get_future().share();
        entries_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(compute());
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mutex_;
  std::map<Key, std::shared_future<RewardStage>> entries_;
};

struct Task {
  std::size_t cell = 0;
  std::size_t seed_index = 0;
};

struct TaskOutput {
  std::optional<ExperimentRecord> record;
  std::vector<std::string> reward_rows;  // only for the first K of a (D, K_HF, seed)
  std::string error;
  double seconds = 0.0;
};

inline ExperimentRecord run_task(const ExperimentConfig& c, const Cell& cell, std::uint64_t seed,
                                 const EnvContext& ctx, RewardCache& cache) {
  const auto D = static_cast<std::uint64_t>(cell.D);
  const PipelineConfig pc = c.pipeline(cell.K, cell.K_HF, cell.D);
  const TransitionDataset transitions =
      generate_transition_dataset(ctx.env, ctx.behavior, cell.K, derive_seed(seed, {kTransitionTag, D, cell.K}));
  RewardStage reward = cache.get({cell.D, cell.K_HF, seed}, [&] {
    PipelineConfig rc = pc;
    rc.seed = derive_seed(seed, {kRewardTag, D, cell.K_HF});
    PreferenceDataset prefs;
    if (c.reward == RewardSource::kLearned)
      prefs = generate_preference_dataset(ctx.env, ctx.eta, cell.K_HF, derive_seed(seed, {kPreferenceTag, D, cell.K_HF}));
    return run_reward_stage(ctx.env, prefs, ctx.eta, rc);
  });
  PipelineConfig fc = pc;
  fc.seed = derive_seed(seed, {kFqeTag, fnv1a(cell.hash)});
  const PipelineResult res = run_fqe_stage(ctx.env, transitions, ctx.target, ctx.behavior, std::move(reward), fc);

  ExperimentRecord r;
  r.seed = seed;
  r.K = cell.K;
  r.K_HF = cell.K_HF;
  r.D = cell.D;
  r.d = c.env.intrinsic_dim;
  r.H = ctx.env.horizon();
  r.v_hat = res.report.v_hat;
  r.v_true = res.report.v_true;
  r.abs_err = res.report.abs_error();
  r.reward_mse_mean = res.report.reward_mse_mean();
  r.cell_hash = cell.hash;
  r.kappa1 = ctx.kappa.kappa1;
  r.kappa2 = ctx.kappa.kappa2;
  r.reward_mse = res.report.reward_mse;
  r.reward_nonzeros = res.report.reward_nonzeros;
  return r;
}

inline std::vector<std::string> reward_rows(const ExperimentRecord& r) {
  std::vector<std::string> rows;
  for (std::size_t h = 0; h < r.reward_mse.size(); ++h) {
    std::ostringstream o;
    o << h + 1 << ',' << r.seed << ',' << r.K_HF << ',' << format_double(r.reward_mse[h].mean) << ','
      << format_double(r.reward_mse[h].standard_error) << ','
      << (h < r.reward_nonzeros.size() ? r.reward_nonzeros[h] : 0);
    rows.push_back(o.str());
  }
  return rows;
}

inline fs::path reward_metrics_path(const fs::path& dir, int D) {
  return dir / ("reward_metrics_D" + std::to_string(D) + ".csv");
}

/// Appends task outputs in canonical task order, whatever order they finish in.
class OrderedSink {
 public:
  OrderedSink(const fs::path& dir, const std::vector<Cell>& cells, const std::vector<std::uint64_t>& seeds,
              std::vector<Task> tasks, std::ostream* log)
      : cells_(cells), seeds_(seeds), tasks_(std::move(tasks)), log_(log) {
    records_.open(dir / "records.csv", std::ios::binary | std::ios::app);
    timings_.open(dir / "timings.csv", std::ios::binary | std::ios::app);
    failed_.open(dir / "failed.csv", std::ios::binary | std::ios::app);
    for (const auto& cell : cells_)
      if (!metrics_.count(cell.D)) metrics_[cell.D].open(reward_metrics_path(dir, cell.D), std::ios::binary | std::ios::app);
    if (!records_ || !timings_ || !failed_) throw Error("cannot open output files in " + dir.string());
  }

  /// Returns the number of tasks written so far.
  std::size_t deliver(std::size_t index, TaskOutput out) {
    std::lock_guard lock(mutex_);
    pending_.emplace(index, std::move(out));
    while (!pending_.empty() && pending_.begin()->first == next_) {
      flush_one(tasks_[next_], pending_.begin()->second);
      pending_.erase(pending_.begin());
      ++next_;
    }
    return next_;
  }

  std::size_t written() {
    std::lock_guard lock(mutex_);
    return next_;
  }

  std::size_t failures() const { return failures_; }
  std::vector<ExperimentRecord> take_records() { return std::move(done_); }

 private:
  void flush_one(const Task& t, const TaskOutput& o) {
    const Cell& cell = cells_[t.cell];
    const std::uint64_t seed = seeds_[t.seed_index];
    std::ostringstream key;
    key << seed << ',' << cell.K << ',' << cell.K_HF << ',' << cell.D << ',' << cell.hash;
    if (!o.record) {
      ++failures_;
      failed_ << key.str() << ',' << csv_escape(o.error) << '\n';
      failed_.flush();
      if (log_) *log_ << "FAILED " << key.str() << ": " << o.error << '\n';
      return;
    }
    auto& m = metrics_.at(cell.D);
    for (const auto& row : o.reward_rows) m << row << '\n';
    m.flush();
    records_ << o.record->csv_row() << '\n';
    records_.flush();
    timings_ << key.str() << ',' << format_double(o.seconds) << '\n';
    timings_.flush();
    done_.push_back(*o.record);
    if (log_) *log_ << "done " << key.str() << " abs_err=" << format_double(o.record->abs_err) << '\n';
  }

  const std::vector<Cell>& cells_;
  const std::vector<std::uint64_t>& seeds_;
  std::vector<Task> tasks_;
  std::ostream* log_;
  std::mutex mutex_;
  std::map<std::size_t, TaskOutput> pending_;
  std::size_t next_ = 0;
  std::size_t failures_ = 0;
  std::ofstream records_, timings_, failed_;
  std::map<int, std::ofstream> metrics_;
  std::vector<ExperimentRecord> done_;
};

inline void ensure_file(const fs::path& p, const std::string& header) {
  const auto lines = read_complete_lines(p);
  if (!lines.empty() && lines.front() == header) return;
  write_lines(p, header, {});
}

}  // namespace detail

/// Executes (or resumes) an experiment. Throws ConfigError when the output
/// directory holds a run with a different config.
inline RunSummary run_experiment(const ExperimentConfig& c, const RunOptions& opt = {}) {
  const fs::path dir(c.output_dir);
  fs::create_directories(dir);
  const std::string chash = config_hash(c);
  const std::vector<Cell> cells = expand_grid(c);
  const fs::path manifest_path = dir / "manifest.json";

  Json manifest;
  bool resuming = false;
  if (fs::exists(manifest_path)) {
    manifest = load_json(manifest_path.string());
    if (manifest.value("config_hash", std::string()) != chash)
      throw ConfigError(manifest_path.string() + ":1: output_dir holds a run with a different config (hash " +
                        manifest.value("config_hash", std::string("?")) + ", now " + chash + ")");
    resuming = true;
  } else {
    manifest = {{"format", "pbfqe.experiment_manifest"},
                {"version", 1},
                {"config_hash", chash},
                {"config", c.to_json()},
                {"created", detail::utc_timestamp()},
                {"runs", Json::array()}};
  }
  Json cell_list = Json::array();
  for (const auto& cell : cells)
    cell_list.push_back({{"cell_hash", cell.hash}, {"D", cell.D}, {"K", cell.K}, {"K_HF", cell.K_HF}});
  manifest["cells"] = cell_list;
  manifest["columns"] = kRecordsHeader;

  // Canonical task list and the rows already on disk.
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> task_index;
  std::vector<detail::Task> all_tasks;
  for (std::size_t ci = 0; ci < cells.size(); ++ci)
    for (std::size_t si = 0; si < c.seeds.size(); ++si) {
      task_index[{cells[ci].hash, c.seeds[si]}] = all_tasks.size();
      all_tasks.push_back({ci, si});
    }
  const fs::path records_path = dir / "records.csv";
  std::set<std::size_t> done;
  std::vector<std::string> kept;
  if (resuming) {
    const auto lines = detail::read_complete_lines(records_path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      try {
        const ExperimentRecord r = parse_record(lines[i]);
        const auto it = task_index.find({r.cell_hash, r.seed});
        if (it != task_index.end() && done.insert(it->second).second) kept.push_back(lines[i]);
      } catch (const RangeError&) {
      }
    }
  }
  detail::write_lines(records_path, kRecordsHeader, kept);

  // Reward rows belong to the task with the first K of their (D, K_HF, seed).
  const auto owner_task = [&](int D, std::size_t k_hf, std::uint64_t seed) -> std::optional<std::size_t> {
    for (std::size_t ci = 0; ci < cells.size(); ++ci)
      if (cells[ci].D == D && cells[ci].K == c.K.front() && cells[ci].K_HF == k_hf) {
        const auto it = task_index.find({cells[ci].hash, seed});
        if (it != task_index.end()) return it->second;
      }
    return std::nullopt;
  };
  for (int D : c.D) {
    const fs::path p = detail::reward_metrics_path(dir, D);
    std::vector<std::string> rows;
    if (resuming) {
      const auto lines = detail::read_complete_lines(p);
      for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = detail::split_csv(lines[i]);
        if (f.size() != 6) continue;
        try {
          const auto t = owner_task(D, detail::parse_uint(f[2], "K_HF"), detail::parse_uint(f[1], "seed"));
          if (t && done.count(*t)) rows.push_back(lines[i]);
        } catch (const RangeError&) {
        }
      }
    }
    detail::write_lines(p, kRewardMetricsHeader, rows);
  }
  if (resuming) {
    detail::ensure_file(dir / "timings.csv", kTimingsHeader);
  } else {
    detail::write_lines(dir / "timings.csv", kTimingsHeader, {});
  }
  detail::write_lines(dir / "failed.csv", kFailedHeader, {});

  // Environments, policies and divergence diagnostics.
  std::map<int, EnvContext> contexts;
  for (int D : c.D) {
    EnvContext ctx = build_context(c, D);
    save_json(ctx.env.to_json(), (dir / ("env_D" + std::to_string(D) + ".json")).string());
    std::ofstream diag(dir / ("diagnostics_D" + std::to_string(D) + ".csv"), std::ios::binary | std::ios::trunc);
    write_diagnostics_csv(diag, ctx.kappa);
    contexts.emplace(D, std::move(ctx));
  }
  if (!contexts.empty()) {
    const EnvContext& any = contexts.begin()->second;
    save_json({{"target", any.target.to_json()}, {"behavior", any.behavior.to_json()}},
              (dir / "policies.json").string());
  }

  std::vector<detail::Task> todo;
  for (std::size_t i = 0; i < all_tasks.size(); ++i)
    if (!done.count(i)) todo.push_back(all_tasks[i]);

  Json run_entry = {{"started", detail::utc_timestamp()}, {"workers", opt.workers}, {"resumed", resuming},
                    {"skipped", done.size()}};
  manifest["runs"].push_back(run_entry);
  save_json(manifest, manifest_path.string());

  RunSummary summary;
  summary.tasks = all_tasks.size();
  summary.skipped = done.size();

  detail::RewardCache cache;
  detail::OrderedSink sink(dir, cells, c.seeds, todo, opt.log);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  const auto worker = [&] {
    for (;;) {
      if (stop.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      const detail::Task& t = todo[i];
      const Cell& cell = cells[t.cell];
      const std::uint64_t seed = c.seeds[t.seed_index];
      detail::TaskOutput out;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        ExperimentRecord r = detail::run_task(c, cell, seed, contexts.at(cell.D), cache);
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.record_runtime) r.runtime_s = out.seconds;
        if (cell.K == c.K.front()) out.reward_rows = detail::reward_rows(r);
        out.record = std::move(r);
      } catch (const std::exception& e) {
        out.error = e.what();
      }
      const std::size_t written = sink.deliver(i, std::move(out));
      if (opt.stop_after > 0 && written >= opt.stop_after) stop.store(true);
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(opt.workers, static_cast<unsigned>(std::max<std::size_t>(todo.size(), 1))));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < n; ++w) pool.emplace_back(worker);
  }

  summary.failed = sink.failures();
  summary.records = sink.take_records();
  summary.completed = summary.records.size();
  summary.interrupted = sink.written() < todo.size();

  if (!summary.interrupted) {
    // Canonical order, in case earlier failures were retried out of order.
    std::vector<std::pair<std::size_t, std::string>> rows;
    const auto lines = detail::read_complete_lines(records_path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const ExperimentRecord r = parse_record(lines[i]);
      rows.emplace_back(task_index.at({r.cell_hash, r.seed}), lines[i]);
    }
    if (!std::is_sorted(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; })) {
      std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      std::vector<std::string> sorted;
      for (auto& [i, l] : rows) sorted.push_back(std::move(l));
      detail::write_lines(records_path, kRecordsHeader, sorted);
    }
    for (int D : c.D) {
      const fs::path p = detail::reward_metrics_path(dir, D);
      const auto mlines = detail::read_complete_lines(p);
      std::vector<std::tuple<std::size_t, int, std::string>> mrows;
      for (std::size_t i = 1; i < mlines.size(); ++i) {
        const auto f = detail::split_csv(mlines[i]);
        const auto t = owner_task(D, detail::parse_uint(f[2], "K_HF"), detail::parse_uint(f[1], "seed"));
        mrows.emplace_back(t.value_or(0), static_cast<int>(detail::parse_uint(f[0], "h")), mlines[i]);
      }
      const auto less = [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
      };
      if (!std::is_sorted(mrows.begin(), mrows.end(), less)) {
        std::stable_sort(mrows.begin(), mrows.end(), less);
        std::vector<std::string> sorted;
        for (auto& row : mrows) sorted.push_back(std::move(std::get<2>(row)));
        detail::write_lines(p, kRewardMetricsHeader, sorted);
      }
    }
  }

  manifest["runs"].back()["finished"] = detail::utc_timestamp();
  manifest["runs"].back()["completed"] = summary.completed;
  manifest["runs"].back()["failed"] = summary.failed;
  manifest["runs"].back()["interrupted"] = summary.interrupted;
  save_json(manifest, manifest_path.string());
  return summary;
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

enum class SlopeAxis { kK, kKHF };
enum class SlopeMetric { kAbsErr, kRewardMse };

/// Restricts the records used by fit_decay_slope; unset axes must be single-valued.
struct RecordFilter {
  std::optional<std::size_t> K;
  std::optional<std::size_t> K_HF;
  std::optional<int> D;
};

/// Log-log OLS of the per-x median of y, with a bootstrap band over seeds.
inline stats::DecayFit fit_decay_slope(const std::vector<ExperimentRecord>& records, SlopeAxis x, SlopeMetric y,
                                       const RecordFilter& filter = {}, int resamples = 2000, std::uint64_t seed = 0) {
  std::map<double, std::vector<double>> groups;
  std::set<std::size_t> other_k;
  std::set<int> dims;
  for (const auto& r : records) {
    if (filter.K && r.K != *filter.K) continue;
    if (filter.K_HF && r.K_HF != *filter.K_HF) continue;
    if (filter.D && r.D != *filter.D) continue;
    other_k.insert(x == SlopeAxis::kK ? r.K_HF : r.K);
    dims.insert(r.D);
    const double xv = static_cast<double>(x == SlopeAxis::kK ? r.K : r.K_HF);
    const double yv = y == SlopeMetric::kAbsErr ? std::abs(r.v_hat - r.v_true) : r.reward_mse_mean;
    groups[xv].push_back(yv);
  }
  if (other_k.size() > 1)
    throw RangeError(std::string("records mix several values of ") + (x == SlopeAxis::kK ? "K_HF" : "K") +
                     "; fix one with a filter");
  if (dims.size() > 1) throw RangeError("records mix several values of D; fix one with a filter");
  return stats::fit_decay(groups, 3, 5, resamples, 0.95, seed);
}

struct VerifyReport {
  std::size_t rows = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Recomputes v_true from the serialized environment and policies next to
/// `records_path`, and checks abs_err and the cell hashes.
inline VerifyReport verify_records(const std::string& records_path, double tolerance = 1e-10) {
  const fs::path dir = fs::path(records_path).parent_path().empty() ? fs::path(".") : fs::path(records_path).parent_path();
  const auto records = load_records(records_path);
  const Json manifest = load_json((dir / "manifest.json").string());
  const Json policies = load_json((dir / "policies.json").string());
  const Policy target = Policy::from_json(policies.at("target"));
  std::set<std::string> hashes;
  for (const auto& cell : manifest.at("cells")) hashes.insert(cell.at("cell_hash").get<std::string>());

  VerifyReport rep;
  std::map<int, std::pair<EmbeddedMdp, double>> envs;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = records_path + ":" + std::to_string(i + 2) + ": ";
    ++rep.rows;
    if (!envs.count(r.D)) {
      const EmbeddedMdp env = EmbeddedMdp::from_json(load_json((dir / ("env_D" + std::to_string(r.D) + ".json")).string()));
      const double v = exact_policy_value(env.latent(), target);
      envs.emplace(r.D, std::make_pair(env, v));
    }
    const auto& [env, v] = envs.at(r.D);
    if (std::abs(r.v_true - v) > tolerance)
      rep.problems.push_back(where + "v_true " + format_double(r.v_true) + " differs from oracle " + format_double(v));
    const double err = std::abs(r.v_hat - r.v_true);
    if (std::abs(r.abs_err - err) > 1e-12 * std::max(1.0, err))
      rep.problems.push_back(where + "abs_err " + format_double(r.abs_err) + " != |v_hat - v_true| " + format_double(err));
    if (r.H != env.horizon() || r.D != env.ambient_dim() || r.d != env.config().intrinsic_dim)
      rep.problems.push_back(where + "dimensions do not match the stored environment");
    if (!hashes.count(r.cell_hash)) rep.problems.push_back(where + "cell_hash " + r.cell_hash + " not in the manifest");
  }
  return rep;
}

}  // namespace pbfqe
