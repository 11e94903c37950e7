#ifndef DENSFORMER_CONFIG_HPP
#define DENSFORMER_CONFIG_HPP

// Training configuration and the key=value text form shared by config files,
// the CLI's resolved-config echo and checkpoint headers.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "densformer/model.hpp"

namespace densformer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t halve_every = 20000;
  std::size_t batch = 8;
  std::size_t patch = 40;
  std::size_t max_iters = 100000;
  std::uint64_t seed = 0;
  std::vector<double> sigmas{25.0};
  std::size_t val_every = 500;
  std::size_t ckpt_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("train config: lr0 must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("train config: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train config: eps must be > 0");
    if (halve_every == 0 || batch == 0 || patch == 0) throw ConfigError("train config: halve_every, batch, patch >= 1");
    if (sigmas.empty()) throw ConfigError("train config: need at least one sigma");
    for (double s : sigmas) {
      if (s < 0) throw ConfigError("train config: sigma must be >= 0");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError("config: bad number for " + key + ": " + v);
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config: bad unsigned integer for " + key + ": " + v);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: bad boolean for " + key + ": " + v);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline KeyValues to_key_values(const ModelConfig& m) {
  return {
      {"channels", std::to_string(m.channels)},
      {"in_channels", std::to_string(m.in_channels)},
      {"groups", std::to_string(m.groups)},
      {"blocks", std::to_string(m.blocks)},
      {"layers", std::to_string(m.layers)},
      {"window", std::to_string(m.attention.window)},
      {"heads", std::to_string(m.attention.heads)},
      {"variant", std::string(to_string(m.attention.variant))},
      {"bias_mode", std::string(to_string(m.attention.bias_mode))},
      {"ffn", std::string(to_string(m.ffn))},
      {"ffn_ratio", std::to_string(m.ffn_ratio)},
      {"connection", std::string(to_string(m.connection))},
      {"ffn_from_layer_input", m.ffn_from_layer_input ? "true" : "false"},
  };
}

inline KeyValues to_key_values(const TrainConfig& t) {
  std::string sig;
  for (std::size_t i = 0; i < t.sigmas.size(); ++i) sig += (i ? "," : "") + detail::format_double(t.sigmas[i]);
  return {
      {"lr0", detail::format_double(t.lr0)},
      {"beta1", detail::format_double(t.beta1)},
      {"beta2", detail::format_double(t.beta2)},
      {"eps", detail::format_double(t.eps)},
      {"halve_every", std::to_string(t.halve_every)},
      {"batch", std::to_string(t.batch)},
      {"patch", std::to_string(t.patch)},
      {"iters", std::to_string(t.max_iters)},
      {"seed", std::to_string(t.seed)},
      {"sigma", sig},
      {"val_every", std::to_string(t.val_every)},
      {"ckpt_every", std::to_string(t.ckpt_every)},
  };
}

/// Applies key=value pairs. `variant` is applied first so an explicit `ffn`
/// overrides the variant's default feed-forward. Unknown keys are rejected.
inline void apply_key_values(const KeyValues& kv, ModelConfig& m, TrainConfig& t) {
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k != "variant") continue;
    auto var = parse_variant(v);
    if (!var) throw ConfigError("config: unknown variant " + v);
    m.set_variant(*var);
  }
  for (const auto& [k, v] : kv) {
    if (k == "variant") continue;
    if (k == "channels") m.channels = parse_uint(k, v);
    else if (k == "in_channels") m.in_channels = parse_uint(k, v);
    else if (k == "groups") m.groups = parse_uint(k, v);
    else if (k == "blocks") m.blocks = parse_uint(k, v);
    else if (k == "layers") m.layers = parse_uint(k, v);
    else if (k == "window") m.attention.window = parse_uint(k, v);
    else if (k == "heads") m.attention.heads = parse_uint(k, v);
    else if (k == "bias_mode") {
      auto b = parse_bias_mode(v);
      if (!b) throw ConfigError("config: unknown bias_mode " + v);
      m.attention.bias_mode = *b;
    } else if (k == "ffn") {
      auto f = parse_ffn(v);
      if (!f) throw ConfigError("config: unknown ffn " + v);
      m.ffn = *f;
    } else if (k == "ffn_ratio") m.ffn_ratio = parse_uint(k, v);
    else if (k == "connection") {
      auto c = parse_connection(v);
      if (!c) throw ConfigError("config: unknown connection " + v);
      m.connection = *c;
    } else if (k == "ffn_from_layer_input") m.ffn_from_layer_input = parse_bool(k, v);
    else if (k == "lr0") t.lr0 = parse_double(k, v);
    else if (k == "beta1") t.beta1 = parse_double(k, v);
    else if (k == "beta2") t.beta2 = parse_double(k, v);
    else if (k == "eps") t.eps = parse_double(k, v);
    else if (k == "halve_every") t.halve_every = parse_uint(k, v);
    else if (k == "batch") t.batch = parse_uint(k, v);
    else if (k == "patch") t.patch = parse_uint(k, v);
    else if (k == "iters") t.max_iters = parse_uint(k, v);
    else if (k == "seed") t.seed = parse_uint(k, v);
    else if (k == "sigma") {
      t.sigmas.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) t.sigmas.push_back(parse_double(k, trim(item)));
    } else if (k == "val_every") t.val_every = parse_uint(k, v);
    else if (k == "ckpt_every") t.ckpt_every = parse_uint(k, v);
    else throw ConfigError("config: unknown key '" + k + "'");
  }
}

/// key=value lines; blank lines and '#' comments are skipped.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline KeyValues read_key_value_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace densformer

#endif  // DENSFORMER_CONFIG_HPP
