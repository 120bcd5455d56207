#include "demt/config.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace demt {
namespace {

constexpr std::array<const char*, 27> kKnownKeys = {
    "seed",
    "data.dir",
    "data.count",
    "data.height",
    "data.width",
    "data.classes",
    "data.split",
    "data.seed",
    "model.tasks",
    "model.widths",
    "model.scales",
    "model.reduced_channels",
    "model.depth_d",
    "model.points",
    "model.heads",
    "model.mode",
    "model.seed",
    "loss.semseg",
    "loss.depth",
    "loss.normal",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.momentum",
    "train.checkpoint_every",
    "train.shuffle_seed",
};

bool known_key(const std::string& key) {
  for (const char* k : kKnownKeys) {
    if (key == k) return true;
  }
  return false;
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

bool RunConfig::has(const std::string& key) const {
  return values.count(key) > 0;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) {
    throw ConfigError("config key not set: " + key);
  }
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const int64_t out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " needs an integer, got: " + v);
  }
}

uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    // stoull wraps negatives around instead of rejecting them.
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    size_t used = 0;
    const uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key +
                      " needs an unsigned integer, got: " + v);
  }
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " needs a number, got: " + v);
  }
}

std::vector<int64_t> RunConfig::get_int_list(const std::string& key) const {
  const std::string& v = get(key);
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const std::string p = trim(part);
    try {
      size_t used = 0;
      out.push_back(std::stoll(p, &used));
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key +
                        " needs a comma-separated integer list, got: " + v);
    }
  }
  if (out.empty()) {
    throw ConfigError("config key " + key + " needs a non-empty list");
  }
  return out;
}

std::vector<std::string> RunConfig::get_name_list(
    const std::string& key) const {
  const std::string& v = get(key);
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const std::string p = trim(part);
    if (p.empty()) {
      throw ConfigError("config key " + key + " has an empty list entry");
    }
    out.push_back(p);
  }
  if (out.empty()) {
    throw ConfigError("config key " + key + " needs a non-empty list");
  }
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known_key(key)) throw ConfigError("unknown config key: " + key);
  values[key] = value;
}

std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& [key, value] : values) {
    out += key + " = " + value + "\n";
  }
  return out;
}

RunConfig default_config() {
  RunConfig c;
  c.set("seed", "1");
  c.set("data.dir", "data");
  c.set("data.count", "16");
  c.set("data.height", "64");
  c.set("data.width", "64");
  c.set("data.classes", "5");
  c.set("data.split", "train");
  c.set("model.tasks", "semseg,depth,normal");
  c.set("model.widths", "8,16,24,32");
  c.set("model.scales", "4,8,16,32");
  c.set("model.reduced_channels", "0");
  c.set("model.depth_d", "1");
  c.set("model.points", "9");
  c.set("model.heads", "2");
  c.set("model.mode", "dm+ti+tq");
  c.set("loss.semseg", "1");
  c.set("loss.depth", "1");
  c.set("loss.normal", "10");
  c.set("train.steps", "200");
  c.set("train.batch_size", "1");
  c.set("train.lr", "0.001");
  c.set("train.weight_decay", "0.0005");
  c.set("train.momentum", "0.9");
  c.set("train.checkpoint_every", "0");
  return c;
}

void apply_config_text(RunConfig& config, const std::string& text,
                       const std::string& source_name) {
  std::stringstream ss(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source_name + ":" + std::to_string(lineno) +
                        ": expected key = value, got: " + t);
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(source_name + ":" + std::to_string(lineno) +
                        ": empty key");
    }
    config.set(key, value);
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    // Missing config files are an IO problem, not a syntax problem.
    throw std::ios_base::failure("cannot open config file: " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str(), path);
}

void apply_override(RunConfig& config, const std::string& key_eq_value) {
  const size_t eq = key_eq_value.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("--set needs key=value, got: " + key_eq_value);
  }
  const std::string key = trim(key_eq_value.substr(0, eq));
  const std::string value = trim(key_eq_value.substr(eq + 1));
  if (key.empty()) throw ConfigError("--set needs a non-empty key");
  config.set(key, value);
}

void derive_seeds(RunConfig& config) {
  const uint64_t master = config.get_u64("seed");
  const auto derive = [&](const char* key, uint64_t salt) {
    if (!config.has(key)) {
      config.set(key, std::to_string(splitmix64(master * 4 + salt)));
    }
  };
  derive("data.seed", 1);
  derive("model.seed", 2);
  derive("train.shuffle_seed", 3);
}

}  // namespace demt
