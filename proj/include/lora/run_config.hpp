#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>

#include "lora/checkpoint.hpp"
#include "lora/model_config.hpp"
#include "lora/strategy.hpp"
#include "lora/tasks.hpp"
#include "lora/training.hpp"

namespace lora {

/// Everything one experiment run needs. Parsed from flat `key = value` text;
/// `#` starts a comment. Unknown keys are rejected.
struct RunConfig {
  std::string task = "reverse";
  /// Sequence length for copy/reverse, pair count for kv.
  std::size_t task_length = 6;
  double label_noise = 0.1;
  std::size_t train_examples = 4000;
  std::size_t eval_examples = 500;
  std::uint64_t data_seed = 11;

  std::string model = "toy";
  ModelConfig model_config = toy_config();

  AdaptationStrategy strategy = AdaptationStrategy::low_rank(4, {AttnWeight::kQuery, AttnWeight::kValue});
  TrainHyper hyper;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  /// Base checkpoint for adapt / eval.
  std::string base;
  DType dtype = DType::kF64;

  /// Keys that appeared in the parsed text.
  std::set<std::string> explicit_keys;

  bool has(const std::string& key) const { return explicit_keys.count(key) > 0; }
  TaskDataset train_set() const;
  /// Held-out examples drawn with a different data seed.
  TaskDataset eval_set() const;
};

/// Pre-training defaults to the copy corpus and pre-training hyperparameters;
/// adaptation to the reverse task and per-strategy hyperparameters.
enum class RunPurpose { kPretrain, kAdapt };

/// Throws ConfigError on unknown keys, malformed lines or invalid values.
RunConfig parse_run_config(const std::string& text, RunPurpose purpose = RunPurpose::kAdapt);
RunConfig load_run_config(const std::string& path, RunPurpose purpose = RunPurpose::kAdapt);

/// Shipped defaults. Learning rate and epochs depend on the strategy, as
/// adapter-style methods want larger steps than full fine-tuning.
TrainHyper default_adapt_hyper(const AdaptationStrategy& strategy);
TrainHyper default_pretrain_hyper();

/// Every accepted key, for help text.
const std::set<std::string>& run_config_keys();

}  // namespace lora
