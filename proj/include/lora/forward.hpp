#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lora/adapters.hpp"
#include "lora/model.hpp"
#include "lora/tape.hpp"

namespace lora {

/// A batch of equal-length sequences. Each sequence is `context_len` context
/// tokens followed by `seq_len - context_len` target tokens.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::size_t context_len = 0;
  std::vector<int> tokens;  // batch_size x seq_len, row-major

  std::span<const int> sequence(std::size_t b) const {
    return {tokens.data() + b * seq_len, seq_len};
  }
};

struct ForwardOptions {
  const Attachments* attachments = nullptr;
  /// Names of parameters registered as trainable leaves. Null means none.
  const std::set<std::string>* trainable = nullptr;
};

/// Tape handles produced by a forward pass.
struct ForwardPass {
  /// (batch_size * seq_len) x vocab logits at the real token positions;
  /// reserved prefix/infix slots are dropped.
  Var logits;
};

/// Records the forward pass on `tape`. The model and attachments must outlive
/// the tape. Throws DimensionError for out-of-range tokens and ConfigError when
/// the sequence plus reserved slots exceeds max_seq_len.
ForwardPass forward(Tape& tape, const TransformerModel& model, const Batch& batch,
                    const ForwardOptions& options = {});

/// Forward without gradients; returns the logits matrix.
Matrix logits(const TransformerModel& model, const Batch& batch,
              const Attachments* attachments = nullptr);

/// Per-sample LoRA selection inside one batch: sequence b runs with
/// `per_sample[b]` (null = base model). Only unmerged attachments are allowed.
Matrix logits_per_sample(const TransformerModel& model, const Batch& batch,
                         std::span<const Attachments* const> per_sample);

/// Target token and weight for every logits row: row (b, t) predicts token
/// t + 1 of sequence b and counts only when that token is in the target span.
struct LossTargets {
  std::vector<int> targets;
  std::vector<double> weights;
};
LossTargets loss_targets(const Batch& batch);

/// Mean negative log-likelihood of the target tokens. Throws ContractError
/// when the batch has no target tokens.
Var loss(Tape& tape, Var logits, const Batch& batch);

/// Same quantity computed on plain matrices.
double loss_value(const Matrix& logits, const Batch& batch);

}  // namespace lora
