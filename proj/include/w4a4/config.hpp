#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "w4a4/model.hpp"
#include "w4a4/ptq.hpp"
#include "w4a4/train.hpp"

namespace w4a4 {

using TomlValue = std::variant<bool, std::int64_t, double, std::string>;

/// Parses the subset of TOML used by run configs: `[table]` headers,
/// `key = value` lines with strings, integers, floats and booleans, and `#`
/// comments. Keys come back flattened as "table.key". Throws ConfigError with
/// the line number on a syntax error or a duplicate key.
std::map<std::string, TomlValue> parse_toml(std::string_view text);

struct RunConfig {
  std::string name = "run";
  std::filesystem::path corpus;
  double eval_fraction = 0.1;
  /// Tokens of the held-out split used for perplexity (0 = all).
  std::size_t eval_tokens = 8192;
  ModelConfig model;
  TrainConfig train;
  std::size_t calib_tokens = kCalibTokens;
  double damping = kGptqDamping;

  /// Sets one dotted key from its textual value (as given to --set). Throws
  /// ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, const TomlValue& value);
  /// Full config, every key explicit, in the same grammar.
  std::string to_toml() const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);
/// `overrides` are "key=value" strings.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace w4a4
