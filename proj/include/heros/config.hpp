#pragma once

#include "heros/metrics.hpp"
#include "heros/signal.hpp"
#include "heros/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string_view>

namespace heros {

inline constexpr std::string_view kVersion = "0.1.0";

/// Synthetic dataset layout for `generate`.
struct DatasetSpec {
  int episodes = 40;
  int axes = 3;
  double dt = 0.005;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Everything a run can be configured with. Every field has a default, so
/// `{}` is a complete configuration.
struct RunConfig {
  DatasetSpec dataset;
  MotionSpec motion;
  NoiseModel noise{0.05, 1e-4, 0.0, 6.0};
  TrainConfig train;
  AllanOptions allan;

  void validate() const;
};

/// Strict reader: unknown keys and wrong types raise ValidationError naming
/// the offending key path. Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Parses a JSON file; syntax errors raise ParseError, unreadable files IoError.
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved configuration; parsing it back yields the same RunConfig.
nlohmann::json to_json(const RunConfig& cfg);

/// {"tool": "heros", "version": ..., "config": to_json(cfg)} for embedding in outputs.
nlohmann::json provenance(const RunConfig& cfg);

}  // namespace heros
