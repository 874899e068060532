#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lora/model_config.hpp"

namespace lora {

/// The four self-attention projections LoRA may target.
enum class AttnWeight { kQuery, kKey, kValue, kOutput };

const char* weight_name(AttnWeight w);  // "W_q", ...
/// Accepts "W_q"/"q" style names. Throws ConfigError otherwise.
AttnWeight parse_weight(const std::string& name);

enum class StrategyKind {
  kFullFineTune,
  kFineTuneTop2,
  kBitFit,
  kPrefixEmbed,
  kPrefixLayer,
  kAdapterH,
  kAdapterL,
  kLora,
  kLoraPrefixEmbed,
  kLoraPrefixLayer,
};

const char* kind_name(StrategyKind kind);

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 4.0;
  std::vector<AttnWeight> targets{AttnWeight::kQuery, AttnWeight::kValue};
  /// Also train the biases of targeted projections (off by default).
  bool train_bias = false;

  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

struct PrefixConfig {
  std::size_t prefix_len = 0;  ///< l_p
  std::size_t infix_len = 0;   ///< l_i

  std::size_t slots() const { return prefix_len + infix_len; }
  friend bool operator==(const PrefixConfig&, const PrefixConfig&) = default;
};

struct AdapterConfig {
  std::size_t bottleneck = 4;  ///< r_b

  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

/// Tagged description of one adaptation method with its hyperparameters.
/// Composition kinds carry both a LoRA and a prefix configuration.
struct AdaptationStrategy {
  StrategyKind kind = StrategyKind::kFullFineTune;
  std::optional<LoraConfig> lora;
  std::optional<PrefixConfig> prefix;
  std::optional<AdapterConfig> adapter;

  static AdaptationStrategy full_fine_tune();
  static AdaptationStrategy fine_tune_top2();
  static AdaptationStrategy bitfit();
  static AdaptationStrategy prefix_embed(std::size_t l_p, std::size_t l_i);
  static AdaptationStrategy prefix_layer(std::size_t l_p, std::size_t l_i);
  static AdaptationStrategy adapter_h(std::size_t bottleneck);
  static AdaptationStrategy adapter_l(std::size_t bottleneck);
  static AdaptationStrategy low_rank(std::size_t rank, std::vector<AttnWeight> targets,
                                     double alpha = 0.0);

  bool uses_lora() const { return lora.has_value(); }
  bool uses_prefix() const { return prefix.has_value(); }
  bool uses_adapter() const { return adapter.has_value(); }
  std::size_t reserved_slots() const { return prefix ? prefix->slots() : 0; }

  /// Throws ConfigError when the hyperparameters cannot be realized on `config`.
  void validate(const ModelConfig& config) const;

  /// Canonical text form, e.g. "lora:r=8:qv:alpha=8" or "adapter-h:r=1".
  std::string to_string() const;

  friend bool operator==(const AdaptationStrategy&, const AdaptationStrategy&) = default;
};

/// Parses the text form produced by to_string(). Accepted kinds:
///   ft, ft-top2, bitfit, pre-embed:lp=N:li=N, pre-layer:lp=N:li=N,
///   adapter-h:r=N, adapter-l:r=N, lora:r=N:<targets>[:alpha=X][:bias],
///   lora+pe:r=N:<targets>:lp=N:li=N, lora+pl:...
/// <targets> is a letter set drawn from {q,k,v,o}. alpha defaults to r.
AdaptationStrategy parse_strategy(const std::string& text);

/// LoRA + prefix composition. An empty prefix (l_p = l_i = 0) is allowed.
AdaptationStrategy compose(const LoraConfig& lora_cfg, const PrefixConfig& prefix_cfg,
                           bool prefix_layer);

}  // namespace lora
