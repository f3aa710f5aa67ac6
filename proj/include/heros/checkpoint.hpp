#pragma once

#include "heros/nets.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>

namespace heros {

/// Trained (or freshly initialized) model plus what is needed to apply it.
///
/// On disk: one line of compact JSON (format tag, arch, seed, step, scale,
/// parameter count, view table, embedded config) terminated by '\n', then the
/// parameters as raw little-endian IEEE-754 doubles. Round trips are bit-exact.
struct Checkpoint {
  ModelParams params;
  std::uint64_t step = 0;
  double scale = 1.0;  ///< signals are divided by this before the generator
  nlohmann::json config = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j);

}  // namespace heros
