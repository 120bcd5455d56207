#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace demt {

// User configuration mistakes: unknown keys, malformed values, bad syntax.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Flat dotted-key configuration. Keys come from a fixed schema; anything
// else is rejected. Values stay strings until a typed getter converts them.
struct RunConfig {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;
  std::vector<std::string> get_name_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value);  // checks schema

  // Every effective key, one sorted `key = value` line each.
  std::string resolved_text() const;
};

// Schema defaults for everything except the derived seeds.
RunConfig default_config();

// Line-oriented `key = value` text; blank lines and #-comments allowed.
void apply_config_text(RunConfig& config, const std::string& text,
                       const std::string& source_name);
void apply_config_file(RunConfig& config, const std::string& path);
void apply_override(RunConfig& config, const std::string& key_eq_value);

// Fills data.seed / model.seed / train.shuffle_seed from the master seed
// when they were not set explicitly.
void derive_seeds(RunConfig& config);

}  // namespace demt
