#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lora/bench.hpp"
#include "lora/run_config.hpp"
#include "lora/training.hpp"

namespace lora {

// Process exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitBenchBound = 4;

/// Maps the active exception to an exit code and prints it to `err`.
int exit_code_for_current_exception(std::ostream& err);

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::size_t threads = 1;
  std::ostream* log = nullptr;
};

/// Loads the config file (or defaults) and applies --seed / --out.
RunConfig resolve_config(const GlobalOptions& g, RunPurpose purpose);

/// Writes <out>/base.ckpt and <out>/pretrain_metrics.csv; returns the checkpoint path.
std::string cmd_pretrain(const GlobalOptions& g);

struct AdaptOverrides {
  std::string base;      ///< overrides `base` from the config
  std::string strategy;  ///< overrides `strategy`
  std::string name = "adapted";
};
/// Writes <out>/<name>.ckpt (lora_delta for plain LoRA, full_model otherwise)
/// and <out>/<name>_metrics.csv; returns the checkpoint path.
std::string cmd_adapt(const GlobalOptions& g, const AdaptOverrides& o);

/// Evaluates a full model, optionally with LoRA deltas applied (unmerged) or
/// merged first, on the config's held-out set.
EvalResult cmd_eval(const GlobalOptions& g, const std::string& model_path,
                    const std::string& delta_path, bool merge);

void cmd_merge(const std::string& base, const std::string& delta, const std::string& out);
/// Merges `delta_old` into the pristine `base`, unmerges it, merges `delta_new`.
void cmd_switch(const std::string& base, const std::string& delta_old,
                const std::string& delta_new, const std::string& out);

enum class AnalyzeMode { kSubspace, kSeedPair, kProjection, kRankSweep };
AnalyzeMode parse_analyze_mode(const std::string& s);

struct AnalyzeOptions {
  AnalyzeMode mode = AnalyzeMode::kSubspace;
  std::vector<std::string> inputs;
  std::vector<std::size_t> ranks;           ///< projection r values / sweep ranks
  std::vector<std::string> target_variants; ///< sweep target sets, e.g. "qv", "q"
  std::size_t baseline_draws = 100;
};
/// Writes CSV and PGM files under the output directory; returns the paths written.
std::vector<std::string> cmd_analyze(const GlobalOptions& g, const AnalyzeOptions& o);

/// Aligned text table; also writes <out>/budget.csv when an output directory is set.
std::string cmd_budget(const GlobalOptions& g, const std::string& preset_name,
                       const std::vector<std::string>& strategies);

/// Runs the latency grid, writes latency.csv and slowdown grids, and returns
/// kExitBenchBound when a merged-LoRA point exceeds the 2% bound.
int cmd_bench(const GlobalOptions& g, const BenchOptions& options);

/// Largest |slowdown_pct| allowed for merged LoRA.
inline constexpr double kMergedSlowdownBoundPct = 2.0;

}  // namespace lora
