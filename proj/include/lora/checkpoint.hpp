#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lora/adapters.hpp"
#include "lora/model.hpp"
#include "lora/model_config.hpp"
#include "lora/strategy.hpp"

namespace lora {

// File layout: 8-byte little-endian header length N, N bytes of JSON, then
// the payload of row-major little-endian IEEE-754 tensors. byte_offset in the
// tensor index is relative to the start of the payload.

inline constexpr int kCheckpointFormatVersion = 1;

enum class CheckpointKind { kFullModel, kLoraDelta };
enum class DType { kF64, kF32 };

const char* checkpoint_kind_name(CheckpointKind k);  // "full_model" / "lora_delta"
const char* dtype_name(DType d);                     // "f64" / "f32"

struct TensorEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  DType dtype = DType::kF64;
  std::size_t byte_offset = 0;
};

/// Per-module metadata of a lora_delta checkpoint.
struct LoraModuleMeta {
  LoraTarget target;
  std::size_t rank = 0;
  double alpha = 0.0;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kFullModel;
  ModelConfig model_config;
  AdaptationStrategy strategy;
  std::uint64_t seed = 0;
  DType dtype = DType::kF64;
  std::vector<LoraModuleMeta> modules;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
};

/// Throws ContractError for tensors whose values do not fit the dtype.
std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws ConfigError on a malformed file, a version mismatch, or tensor
/// extents that overlap or leave the file.
Checkpoint parse_checkpoint(std::string_view bytes);

/// Header JSON and tensor index of serialized bytes, without decoding tensors.
std::string checkpoint_header_json(std::string_view bytes);
std::vector<TensorEntry> checkpoint_index(std::string_view bytes);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Base parameters plus the attachments' adapter/prefix tensors. LoRA modules
/// must already be merged (ContractError otherwise).
Checkpoint full_model_checkpoint(const TransformerModel& model, const Attachments* attachments,
                                 std::uint64_t seed, DType dtype = DType::kF64);
/// Only A and B of each module plus rank, alpha and target metadata.
/// Throws ContractError unless the strategy is plain LoRA without biases.
Checkpoint lora_delta_checkpoint(const ModelConfig& config, const Attachments& attachments,
                                 std::uint64_t seed, DType dtype = DType::kF64);

/// Rebuilds the model of a full_model checkpoint.
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);
/// Rebuilds attachments: LoRA modules (unmerged) from a delta, or the
/// adapter/prefix attachments stored with a full model. Throws ConfigError
/// when targets or shapes do not fit `model`.
Attachments attachments_from_checkpoint(const Checkpoint& ckpt, const TransformerModel& model);

}  // namespace lora
