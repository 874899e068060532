#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lora/forward.hpp"
#include "lora/model_config.hpp"

namespace lora {

// Reserved token ids; content tokens start at kFirstContentToken.
inline constexpr int kSeparator = 0;
inline constexpr int kQuery = 1;
inline constexpr int kFirstContentToken = 2;

/// One (context x, target y) pair.
struct TaskExample {
  std::vector<int> context;
  std::vector<int> target;
};

/// Synthetic desk-scale task. All pairs share the same context and target
/// lengths so they batch without padding.
struct TaskDataset {
  std::string name;
  std::vector<TaskExample> pairs;

  std::size_t context_len() const;
  std::size_t target_len() const;
  std::size_t seq_len() const { return context_len() + target_len(); }

  /// Throws ConfigError on ragged pairs, tokens outside the vocabulary, or
  /// sequences longer than max_seq_len - reserved_slots.
  void validate(const ModelConfig& config, std::size_t reserved_slots = 0) const;

  Batch batch(std::span<const std::size_t> indices) const;
};

/// Pre-training corpus with local-copy structure: x SEP x.
TaskDataset copy_corpus(std::size_t vocab, std::size_t length, std::size_t count, std::uint64_t seed);
/// Downstream task (a): x SEP reverse(x). With label_noise > 0 each target
/// token is independently replaced by a uniform content token.
TaskDataset reverse_task(std::size_t vocab, std::size_t length, std::size_t count,
                         std::uint64_t seed, double label_noise = 0.0);
/// Downstream task (b): k1 v1 ... kn vn SEP QUERY k -> v.
TaskDataset kv_lookup_task(std::size_t vocab, std::size_t pairs, std::size_t count,
                           std::uint64_t seed);

/// Builds a task by name ("copy", "reverse", "kv"). `length` is the sequence
/// length for copy/reverse and the pair count for kv.
TaskDataset make_task(const std::string& name, std::size_t vocab, std::size_t length,
                      std::size_t count, std::uint64_t seed, double label_noise = 0.0);

/// Entropy (nats per target token) of the noisy reverse task: the best
/// achievable loss for any model.
double label_noise_floor(std::size_t vocab, double label_noise);

}  // namespace lora
