#include "lora/model_config.hpp"

#include "lora/errors.hpp"

namespace lora {

ModelConfig ModelConfig::make(std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                              std::size_t vocab_size, std::size_t max_seq_len) {
  return ModelConfig{n_layers, d_model, n_heads, 4 * d_model, vocab_size, max_seq_len};
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_ffn == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
}

ModelConfig toy_config() { return ModelConfig::make(2, 64, 4, 64, 32); }

ModelConfig bench_config() { return ModelConfig::make(12, 512, 8, 64, 128); }

ModelConfig preset(const std::string& name) {
  if (name == "gpt3-175b") return ModelConfig::make(96, 12288, 96, 50257, 2048);
  if (name == "roberta-base") return ModelConfig::make(12, 768, 12, 50265, 514);
  if (name == "roberta-large") return ModelConfig::make(24, 1024, 16, 50265, 514);
  if (name == "gpt2-medium") return ModelConfig::make(24, 1024, 16, 50257, 1024);
  if (name == "toy") return toy_config();
  if (name == "bench") return bench_config();
  throw ConfigError("unknown model preset '" + name + "'");
}

std::vector<std::string> preset_names() {
  return {"gpt3-175b", "roberta-base", "roberta-large", "gpt2-medium", "toy", "bench"};
}

}  // namespace lora
