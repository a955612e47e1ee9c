#pragma once

// Flat key=value configuration shared by the CLI subcommands. Lines starting
// with '#' and blank lines are ignored; later assignments win.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "warpadapt/scenegen.hpp"
#include "warpadapt/trainer.hpp"

namespace warpadapt {

struct CliConfig {
  TrainConfig train;
  SceneParams scene;
  std::size_t count = 200;  // samples per domain for `generate`
  std::string shift_preset = "default";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  return out;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  return out;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  const std::int64_t x = parse_int(key, v);
  if (x < 0) throw ConfigError("config key '" + key + "': must be >= 0");
  return static_cast<std::uint64_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config key '" + key + "': expected 0/1/true/false, got '" + v + "'");
}

using Setter = std::function<void(CliConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto i32 = [](int TrainConfig::*m) {
      return [m](CliConfig& c, const std::string& k, const std::string& v) {
        c.train.*m = static_cast<int>(parse_int(k, v));
      };
    };
    auto u64 = [](std::uint64_t TrainConfig::*m) {
      return [m](CliConfig& c, const std::string& k, const std::string& v) { c.train.*m = parse_count(k, v); };
    };
    auto f64 = [](double TrainConfig::*m) {
      return [m](CliConfig& c, const std::string& k, const std::string& v) { c.train.*m = parse_double(k, v); };
    };
    auto scene = [](int SceneParams::*m) {
      return [m](CliConfig& c, const std::string& k, const std::string& v) {
        c.scene.*m = static_cast<int>(parse_int(k, v));
      };
    };
    t["k"] = i32(&TrainConfig::k);
    t["total_iters"] = u64(&TrainConfig::total_iters);
    t["batch_size"] = i32(&TrainConfig::batch_size);
    t["lr_translation"] = f64(&TrainConfig::lr_translation);
    t["lr_disp"] = f64(&TrainConfig::lr_disp);
    t["lr_flow"] = f64(&TrainConfig::lr_flow);
    t["beta1"] = f64(&TrainConfig::beta1);
    t["beta2"] = f64(&TrainConfig::beta2);
    t["seed"] = u64(&TrainConfig::seed);
    t["eval_every"] = u64(&TrainConfig::eval_every);
    t["checkpoint_every"] = u64(&TrainConfig::checkpoint_every);
    t["gamma"] = f64(&TrainConfig::gamma);
    t["gen_channels"] = i32(&TrainConfig::gen_channels);
    t["disc_channels"] = i32(&TrainConfig::disc_channels);
    t["max_disp"] = i32(&TrainConfig::max_disp);
    t["max_flow"] = i32(&TrainConfig::max_flow);
    t["threads"] = i32(&TrainConfig::threads);
    t["mode"] = [](CliConfig& c, const std::string&, const std::string& v) { c.train.mode = parse_mode(v); };
    t["identity_generators"] = [](CliConfig& c, const std::string& k, const std::string& v) {
      c.train.identity_generators = parse_bool(k, v);
    };
    t["d1_mode"] = [](CliConfig& c, const std::string&, const std::string& v) {
      c.train.d1_mode = parse_threshold_mode(v);
    };
    t["flow_valid"] = [](CliConfig& c, const std::string& k, const std::string& v) {
      if (v != "all" && v != "noc") throw ConfigError("config key '" + k + "': expected all or noc");
      c.train.flow_noc = v == "noc";
    };
    for (const auto& [name, member] : LossWeights::fields()) {
      double LossWeights::*m = member;
      t[std::string("weights.") + name] = [m](CliConfig& c, const std::string& k, const std::string& v) {
        c.train.weights.*m = parse_double(k, v);
      };
    }
    t["scene.width"] = scene(&SceneParams::width);
    t["scene.height"] = scene(&SceneParams::height);
    t["scene.max_disp"] = scene(&SceneParams::max_disp);
    t["scene.max_flow"] = scene(&SceneParams::max_flow);
    t["scene.min_objects"] = scene(&SceneParams::min_objects);
    t["scene.max_objects"] = scene(&SceneParams::max_objects);
    t["count"] = [](CliConfig& c, const std::string& k, const std::string& v) { c.count = parse_count(k, v); };
    t["shift_preset"] = [](CliConfig& c, const std::string&, const std::string& v) {
      (void)DomainShift::preset(v);  // validate now
      c.shift_preset = v;
    };
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [name, fn] : detail::setters()) k.push_back(name);
  return k;
}

inline void apply_config_value(CliConfig& c, const std::string& key, const std::string& value) {
  const auto& t = detail::setters();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

inline void apply_config_text(CliConfig& c, const std::string& text, const std::string& context = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(context + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    apply_config_value(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

inline CliConfig load_config_file(const std::string& path, CliConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str(), path);
  return base;
}

// The full set of keys with current values, in file syntax.
inline std::string config_to_text(const CliConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_echo(c.train)) out += k + "=" + v + "\n";
  out += "threads=" + std::to_string(c.train.threads) + "\n";
  out += "scene.width=" + std::to_string(c.scene.width) + "\n";
  out += "scene.height=" + std::to_string(c.scene.height) + "\n";
  out += "scene.max_disp=" + std::to_string(c.scene.max_disp) + "\n";
  out += "scene.max_flow=" + std::to_string(c.scene.max_flow) + "\n";
  out += "scene.min_objects=" + std::to_string(c.scene.min_objects) + "\n";
  out += "scene.max_objects=" + std::to_string(c.scene.max_objects) + "\n";
  out += "count=" + std::to_string(c.count) + "\n";
  out += "shift_preset=" + c.shift_preset + "\n";
  return out;
}

}  // namespace warpadapt
