#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lora {

/// Architecture descriptor shared by the toy model and the budget calculators.
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;

  /// d_ffn defaults to 4 * d_model.
  static ModelConfig make(std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                          std::size_t vocab_size, std::size_t max_seq_len);

  /// Throws ConfigError on zero sizes or d_model % n_heads != 0.
  void validate() const;

  std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Default desk-scale model used for training experiments.
ModelConfig toy_config();

/// Larger model used only for latency measurements.
ModelConfig bench_config();

/// Named presets: gpt3-175b, roberta-base, roberta-large, gpt2-medium, toy, bench.
/// Throws ConfigError for unknown names.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace lora
