#pragma once

#include "heros/config.hpp"
#include "heros/signal.hpp"

#include <json.hpp>

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace heros {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// One synthetic rest-shake-rest episode and its degraded twin.
struct Episode {
  std::string name;
  std::uint64_t motion_seed = 0;
  std::uint64_t noise_seed = 0;
  Signal high;
  Signal low;
};

/// Episode `index` of the dataset described by `cfg`; seeds derive from cfg.dataset.seed.
Episode make_episode(const RunConfig& cfg, int index);

/// Writes high/<name>.csv, low/<name>.csv and manifest.json under `out_dir`.
nlohmann::json generate_dataset(const RunConfig& cfg, const std::filesystem::path& out_dir);

/// Pairs files by name across two directories; mismatched sets raise
/// ValidationError listing the unmatched names.
std::vector<std::pair<std::filesystem::path, std::filesystem::path>> pair_signals(const std::filesystem::path& ref_dir,
                                                                                  const std::filesystem::path& recon_dir);

/// Per-pair CSRE, ZVRE and peak magnitudes plus their means.
nlohmann::json evaluate_pairs(const std::vector<std::pair<std::filesystem::path, std::filesystem::path>>& pairs);

/// Entry point of the `heros` tool. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace heros
