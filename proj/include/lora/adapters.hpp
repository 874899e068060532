#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lora/adamw.hpp"
#include "lora/model.hpp"
#include "lora/strategy.hpp"
#include "lora/tensor.hpp"

namespace lora {

struct LoraTarget {
  std::size_t layer = 0;
  AttnWeight weight = AttnWeight::kQuery;

  friend bool operator==(const LoraTarget&, const LoraTarget&) = default;
};

/// Low-rank update for one host weight W0 (d x k): delta = (alpha / r) * B * A
/// with B (d x r) and A (r x k). While `merged` is false the host weight is
/// untouched and the update is applied on the side.
struct LoraModule {
  LoraTarget target;
  Matrix A;
  Matrix B;
  std::size_t rank = 0;
  double alpha = 0.0;
  bool merged = false;

  double scaling() const { return alpha / static_cast<double>(rank); }
  /// (alpha / r) * B * A.
  Matrix delta() const;
  std::string param_prefix() const;  // "lora.<layer>.<W_x>"

  friend bool operator==(const LoraModule&, const LoraModule&) = default;
};

/// Attaches one module per (layer, target). A ~ N(0, 1/r), B = 0.
/// Throws ConfigError for an empty/duplicate target set or r outside [1, min(d, k)].
std::vector<LoraModule> lora_attach(const TransformerModel& model,
                                    const std::vector<AttnWeight>& targets, std::size_t rank,
                                    double alpha, std::uint64_t seed);

/// True when r > d/4, the range where the update stops being "low" rank.
bool lora_rank_is_large(std::size_t rank, std::size_t d_model);

/// h = W0 x + (alpha / r) B (A x) for column-vector inputs x (k x n).
/// Throws ContractError if the module is merged.
Matrix lora_forward(const LoraModule& module, const Matrix& W0, const Matrix& x);

/// host += (alpha / r) B A; sets merged. ContractError if already merged.
void lora_merge(LoraModule& module, Matrix& host_weight);
/// host -= (alpha / r) B A; clears merged. ContractError if not merged.
void lora_unmerge(LoraModule& module, Matrix& host_weight);

enum class AdapterPlacement { kAfterAttention, kAfterMlp };

/// Bottleneck adapter inserted sequentially after a sub-layer:
///   out = in + relu(norm(in) W_down + b_down) W_up + b_up
/// where norm is the identity unless the module carries its own LayerNorm.
struct AdapterModule {
  std::size_t layer = 0;
  AdapterPlacement placement = AdapterPlacement::kAfterMlp;
  Matrix W_down;  // d_model x r_b
  Matrix b_down;  // 1 x r_b
  Matrix W_up;    // r_b x d_model
  Matrix b_up;    // 1 x d_model
  bool has_norm = false;
  Matrix norm_gain, norm_shift;

  std::string param_prefix() const;  // "adapter.<layer>.<attn|mlp>"
  std::size_t parameter_count() const;

  friend bool operator==(const AdapterModule&, const AdapterModule&) = default;
};

enum class AdapterVariant { kHoulsby, kLin };

/// H: two modules per block (after attention, after MLP). L: one module per
/// block after the MLP with its own trainable LayerNorm. W_up starts at zero.
std::vector<AdapterModule> adapter_attach(const TransformerModel& model, AdapterVariant variant,
                                          std::size_t bottleneck, std::uint64_t seed);

enum class PrefixKind { kEmbedding, kEveryLayer };

/// Trainable activations for l_p prefix slots and l_i infix slots. The
/// embedding kind replaces the slots' input embeddings; the every-layer kind
/// replaces the slots' activations at the input of every block.
struct PrefixState {
  PrefixKind kind = PrefixKind::kEmbedding;
  std::size_t prefix_len = 0;
  std::size_t infix_len = 0;
  /// One (slots x d_model) matrix for kEmbedding, n_layers of them otherwise.
  std::vector<Matrix> activations;

  std::size_t slots() const { return prefix_len + infix_len; }
  std::size_t usable_length(std::size_t max_seq_len) const { return max_seq_len - slots(); }
  std::string param_name(std::size_t index) const;
  std::size_t parameter_count() const;

  friend bool operator==(const PrefixState&, const PrefixState&) = default;
};

/// Throws ConfigError when l_p + l_i >= max_seq_len.
PrefixState prefix_attach(const TransformerModel& model, PrefixKind kind, std::size_t l_p,
                          std::size_t l_i, std::uint64_t seed);

/// Everything a strategy hangs off a frozen model.
struct Attachments {
  AdaptationStrategy strategy;
  std::vector<LoraModule> lora;
  std::vector<AdapterModule> adapters;
  std::optional<PrefixState> prefix;

  const LoraModule* find_lora(std::size_t layer, AttnWeight w) const;
  const AdapterModule* find_adapter(std::size_t layer, AdapterPlacement p) const;
  bool any_merged() const;
  bool all_merged() const;

  /// Attachment-owned trainable parameters. Merged LoRA modules are excluded.
  std::vector<NamedParam> trainable_parameters();

  friend bool operator==(const Attachments&, const Attachments&) = default;
};

/// Builds the attachments a strategy needs. Strategies that only unfreeze
/// base weights (FT, FT-top2, BitFit) return empty attachments.
Attachments attach_strategy(const TransformerModel& model, const AdaptationStrategy& strategy,
                            std::uint64_t seed);

/// Whether a base-model parameter is trained under a strategy.
bool base_parameter_trainable(const AdaptationStrategy& strategy, const ParamInfo& param,
                              std::size_t n_layers);

/// Base parameters plus attachment parameters that the strategy trains.
std::vector<NamedParam> trainable_parameters(TransformerModel& model, Attachments& attachments);
std::size_t trainable_scalar_count(TransformerModel& model, Attachments& attachments);

/// Merge every LoRA module into its host weight (no-op for modules already merged).
void merge_all(TransformerModel& model, Attachments& attachments);
/// Unmerge every merged LoRA module.
void unmerge_all(TransformerModel& model, Attachments& attachments);

/// Task switch: unmerge `from`, then merge `to`.
void switch_task(TransformerModel& model, Attachments& from, Attachments& to);

}  // namespace lora
