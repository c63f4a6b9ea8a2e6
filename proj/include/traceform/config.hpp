#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "traceform/dataset.hpp"
#include "traceform/finetune.hpp"
#include "traceform/model.hpp"
#include "traceform/pretrain.hpp"
#include "traceform/synth.hpp"

namespace traceform {

/// Flat key-value run configuration. Keys are dotted (`model.hidden`); a config file may group
/// them under `[model]` headers. Every key has a registered default and type, unknown keys and
/// unparsable values raise ConfigError.
///
/// Precedence, lowest first: defaults, config file, `--set key=value`, dedicated flags.
class RunConfig {
 public:
  RunConfig();

  void set(const std::string& key, const std::string& value);
  /// Parses `key = value` lines; `#` starts a comment, `[section]` prefixes following keys.
  void merge_text(const std::string& text, const std::string& origin = "<config>");
  void merge_file(const std::filesystem::path& path);

  bool has_key(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Sorted `key = value` lines, readable back with merge_text.
  std::string to_text() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  GeneratorConfig generator() const;
  DatasetConfig dataset() const;
  ModelConfig model() const;
  PretrainConfig pretrain() const;
  FinetuneConfig finetune() const;
  TaskDataLimits task_limits() const;
  int threads() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Names of every registered key, sorted.
std::vector<std::string> config_keys();

}  // namespace traceform
