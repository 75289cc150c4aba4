#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xsalab/optim.hpp"

namespace xsalab {

/// Everything a training run needs; mirrors the key-value config file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

using KvPairs = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
KvPairs parse_kv_file(const std::string& path);
KvPairs parse_kv_text(const std::string& text);

/// Applies one key; throws on unknown keys or unparsable values.
void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig run_config_from_kv(const KvPairs& kv);
inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_kv(parse_kv_file(path));
}

/// Serializations round-trip exactly (doubles at 17 significant digits).
KvPairs run_config_to_kv(const RunConfig& cfg);
KvPairs model_config_to_kv(const ModelConfig& cfg, const std::string& prefix);
ModelConfig model_config_from_kv(const KvPairs& kv, const std::string& prefix);
void write_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace xsalab
