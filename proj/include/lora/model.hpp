#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lora/model_config.hpp"
#include "lora/strategy.hpp"
#include "lora/tensor.hpp"

namespace lora {

/// Weights of one pre-LayerNorm decoder block. Linear weights are stored
/// (out x in) so a projection is h = x W^T + b on row-vector activations.
struct BlockWeights {
  Matrix ln1_gain, ln1_shift;
  Matrix W_q, b_q, W_k, b_k, W_v, b_v, W_o, b_o;
  Matrix ln2_gain, ln2_shift;
  Matrix W_in, b_in;    // d_ffn x d_model, 1 x d_ffn
  Matrix W_out, b_out;  // d_model x d_ffn, 1 x d_model

  Matrix& attention_weight(AttnWeight w);
  const Matrix& attention_weight(AttnWeight w) const;
  Matrix& attention_bias(AttnWeight w);
  const Matrix& attention_bias(AttnWeight w) const;

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

enum class ParamRole { kEmbedding, kMatrix, kBias, kNormGain, kNormShift };

struct ParamInfo {
  std::string name;
  Matrix* value;
  ParamRole role;
  /// Block index, or -1 for embeddings / final norm / head.
  int layer;
};

/// A toy decoder-only Transformer: token + learned position embeddings,
/// pre-LN blocks, final LayerNorm, untied output head without bias.
struct TransformerModel {
  ModelConfig config;
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<BlockWeights> blocks;
  Matrix lnf_gain, lnf_shift;
  Matrix head;  // vocab x d_model

  /// Random initialization from a seed.
  static TransformerModel initialize(const ModelConfig& config, std::uint64_t seed);

  /// Every parameter with a stable dotted name, in a fixed order.
  std::vector<ParamInfo> parameters();
  std::vector<ParamInfo> parameters() const;

  /// Number of scalars across all parameters.
  std::size_t census() const;

  friend bool operator==(const TransformerModel&, const TransformerModel&) = default;
};

/// Closed-form parameter count of TransformerModel for a config.
std::size_t total_parameter_count(const ModelConfig& config);

/// Dotted name of a block parameter, e.g. "blocks.1.attn.W_q".
std::string attention_weight_param_name(std::size_t layer, AttnWeight w);

}  // namespace lora
