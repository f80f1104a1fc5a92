#pragma once

// Plain-text run configuration: UTF-8 `key = value` lines, `#` starts a
// comment, blank lines ignored. Unknown keys are rejected; later lines win
// over earlier ones; command-line overrides reuse the same key grammar and
// are applied after the file.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/model.hpp"
#include "uoe/train.hpp"

namespace uoe {

struct RunConfig {
  std::string arch = "uoe";  // "uoe" or "dense"
  UoeModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim_ws(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::size_t parse_size_value(const std::string& key,
                                    const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an unsigned integer, got '" +
                      value + "'");
  }
  if (pos != value.size() || value.front() == '-')
    throw ConfigError("config key '" + key + "' needs an unsigned integer, got '" +
                      value + "'");
  return static_cast<std::size_t>(v);
}

inline double parse_double_value(const std::string& key,
                                 const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + value +
                      "'");
  }
  if (pos != value.size())
    throw ConfigError("config key '" + key + "' needs a number, got '" + value +
                      "'");
  return v;
}

inline bool parse_bool_value(const std::string& key,
                             const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "' needs true/false, got '" + value +
                    "'");
}

}  // namespace detail

inline const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "arch",
      "layers", "d", "n_a", "d_h", "n_m", "d_e", "l_p",
      "k_attn", "k_mlp", "attn_mode", "mlp_mode",
      "vocab_size", "max_len", "alpha",
      "rope_theta", "rope_rotated", "compacted_positions",
      "gate_scale_outputs", "pooled_expert_gate",
      "mlp_second_activation", "mlp_bias", "use_layer_norm",
      "gate_hidden", "seed",
      "steps", "batch_size", "seq_len", "grad_accum", "log_every",
      "lr", "beta1", "beta2", "eps", "data_seed",
  };
  return keys;
}

inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value) {
  using detail::parse_bool_value;
  using detail::parse_double_value;
  using detail::parse_size_value;
  auto& m = cfg.model;
  auto& t = cfg.train;
  if (key == "arch") {
    if (value != "uoe" && value != "dense")
      throw ConfigError("config key 'arch' must be 'uoe' or 'dense', got '" +
                        value + "'");
    cfg.arch = value;
  } else if (key == "layers") m.layers = parse_size_value(key, value);
  else if (key == "d") m.d = parse_size_value(key, value);
  else if (key == "n_a") m.n_a = parse_size_value(key, value);
  else if (key == "d_h") m.d_h = parse_size_value(key, value);
  else if (key == "n_m") m.n_m = parse_size_value(key, value);
  else if (key == "d_e") m.d_e = parse_size_value(key, value);
  else if (key == "l_p") m.l_p = parse_size_value(key, value);
  else if (key == "k_attn") m.k_attn = parse_size_value(key, value);
  else if (key == "k_mlp") m.k_mlp = parse_size_value(key, value);
  else if (key == "attn_mode") m.attn_mode = routing_mode_from_string(value);
  else if (key == "mlp_mode") m.mlp_mode = routing_mode_from_string(value);
  else if (key == "vocab_size") m.vocab_size = parse_size_value(key, value);
  else if (key == "max_len") m.max_len = parse_size_value(key, value);
  else if (key == "alpha") m.alpha = parse_double_value(key, value);
  else if (key == "rope_theta") m.rope_theta = parse_double_value(key, value);
  else if (key == "rope_rotated") m.rope_rotated = parse_size_value(key, value);
  else if (key == "compacted_positions")
    m.compacted_positions = parse_bool_value(key, value);
  else if (key == "gate_scale_outputs")
    m.gate_scale_outputs = parse_bool_value(key, value);
  else if (key == "pooled_expert_gate")
    m.pooled_expert_gate = parse_bool_value(key, value);
  else if (key == "mlp_second_activation")
    m.mlp_second_activation = second_activation_from_string(value);
  else if (key == "mlp_bias") m.mlp_bias = parse_bool_value(key, value);
  else if (key == "use_layer_norm")
    m.use_layer_norm = parse_bool_value(key, value);
  else if (key == "gate_hidden") m.gate_hidden = parse_size_value(key, value);
  else if (key == "seed")
    m.seed = static_cast<std::uint64_t>(parse_size_value(key, value));
  else if (key == "steps") t.steps = parse_size_value(key, value);
  else if (key == "batch_size") t.batch_size = parse_size_value(key, value);
  else if (key == "seq_len") t.seq_len = parse_size_value(key, value);
  else if (key == "grad_accum") t.grad_accum = parse_size_value(key, value);
  else if (key == "log_every") t.log_every = parse_size_value(key, value);
  else if (key == "lr") t.adam.lr = parse_double_value(key, value);
  else if (key == "beta1") t.adam.beta1 = parse_double_value(key, value);
  else if (key == "beta2") t.adam.beta2 = parse_double_value(key, value);
  else if (key == "eps") t.adam.eps = parse_double_value(key, value);
  else if (key == "data_seed")
    t.data_seed = static_cast<std::uint64_t>(parse_size_value(key, value));
  else
    throw ConfigError("unknown config key '" + key + "'");
}

// "key=value" override, as accepted on the command line.
inline void apply_config_override(RunConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key=value, got '" + kv + "'");
  apply_config_entry(cfg, detail::trim_ws(kv.substr(0, eq)),
                     detail::trim_ws(kv.substr(eq + 1)));
}

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::stringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim_ws(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("config line " + std::to_string(lineno) +
                        " is not 'key = value': '" + line + "'");
    const std::string key = detail::trim_ws(line.substr(0, eq));
    const std::string value = detail::trim_ws(line.substr(eq + 1));
    if (value.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        " has an empty value for '" + key + "'");
    apply_config_entry(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

}  // namespace uoe
