#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "lora/model_config.hpp"
#include "lora/strategy.hpp"

namespace lora {

enum class Precision { kFp16, kFp32 };

/// Bytes per stored scalar.
std::size_t precision_width(Precision p);

/// The fixed part of every checkpoint: the 8-byte little-endian length of the
/// JSON header. The JSON text itself is variable and reported separately.
inline constexpr std::size_t kCheckpointPrefixBytes = 8;

struct ParamBudget {
  AdaptationStrategy strategy;
  std::size_t trainable_params = 0;
  std::size_t checkpoint_bytes_fp16 = 0;
  std::size_t checkpoint_bytes_fp32 = 0;
  /// First and second Adam moments for every trainable scalar.
  std::size_t optimizer_state_scalars = 0;
};

/// Closed-form trainable-parameter count. Throws ConfigError when the
/// strategy cannot be realized on `config`.
ParamBudget count(const ModelConfig& config, const AdaptationStrategy& strategy);

/// Scalar width times trainable scalars plus the fixed prefix.
std::size_t checkpoint_size(const ParamBudget& budget, Precision precision);

/// Bias vectors plus LayerNorm shifts of the model layout, closed form.
std::size_t bias_parameter_count(const ModelConfig& config);

/// 37748736 -> "37.7M"; values below 0.05M keep thousands ("2.0K") or units.
std::string format_millions(std::size_t n);

/// Table of counts, checkpoint sizes and optimizer state per strategy.
std::string budget_table_csv(const ModelConfig& config,
                             std::span<const AdaptationStrategy> strategies);
std::string budget_table_text(const ModelConfig& config,
                              std::span<const AdaptationStrategy> strategies);

}  // namespace lora
