#pragma once

#include "bipars/bipars.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace bipars {

/// Everything needed to reproduce an experiment: one training config run
/// once per seed.
struct RunConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir;
  int jobs = 1;
  bool paper_scale = false;
};

/// Suite defaults for an (env, shaping, method) triple. Desk scale unless
/// `paper_scale`, which restores the full step budgets, seed counts, and
/// network sizes.
RunConfig default_run_config(const std::string& env, const std::string& shaping, Method method,
                             bool paper_scale = false);

/// Ordered `section.key` names accepted in config files and as CLI flags.
std::vector<std::string> config_keys();

/// Sets one field from its text form; `key` may be bare or section-qualified.
/// Throws ConfigError on an unknown key or malformed value.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_setting(const RunConfig& cfg, const std::string& key);

/// Plain-text format: `[section]` headers, `key = value` lines, `#`
/// comments. Settings are applied on top of `base`. Every problem in the
/// file is collected before throwing.
RunConfig parse_config_text(const std::string& text, const RunConfig& base = {});
RunConfig load_config(const std::string& path, const RunConfig& base = {});

/// Canonical text: every key, in config_keys() order.
std::string to_config_text(const RunConfig& cfg);

/// All validation failures; empty when the config is usable.
std::vector<std::string> validate(const RunConfig& cfg);
/// Throws ConfigError listing every failure.
void require_valid(const RunConfig& cfg);

/// FNV-1a over the settings that fix parameter shapes and meaning (env,
/// shaping, method, network architectures). Checkpoints carry it.
std::uint64_t model_hash(const RunConfig& cfg);
std::string hex64(std::uint64_t v);

}  // namespace bipars
