#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lora/adapters.hpp"
#include "lora/forward.hpp"
#include "lora/model.hpp"
#include "lora/tape.hpp"
#include "lora/tasks.hpp"
#include "lora/training.hpp"

namespace lora {

enum class BenchVariant { kBase, kLoraMerged, kLoraUnmerged, kAdapterH, kAdapterL };

const char* variant_name(BenchVariant v);  // "base", "lora_merged", ...
/// Throws ConfigError for unknown names.
BenchVariant parse_variant(const std::string& name);

struct LatencyRecord {
  BenchVariant variant = BenchVariant::kBase;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  /// Adapter bottleneck or LoRA rank; 0 for the base model.
  std::size_t size = 0;
  std::size_t trials = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  /// Median over ten equal blocks of per-block means.
  double median_of_means_ms = 0.0;
  /// Median over trials of this pass's time over the base pass of the same
  /// round, as a percentage above 1.
  double slowdown_pct = 0.0;
};

struct BenchOptions {
  ModelConfig config;
  /// (batch, seq_len) grid points.
  std::vector<std::pair<std::size_t, std::size_t>> points;
  std::vector<BenchVariant> variants{BenchVariant::kLoraMerged, BenchVariant::kAdapterH,
                                     BenchVariant::kAdapterL};
  std::vector<std::size_t> sizes{64};
  std::size_t trials = 100;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
};

/// Keeps large activation buffers on the heap instead of fresh mmap pages,
/// whose page faults otherwise cost about a third of a forward pass on the
/// bench model. Process-wide; a no-op outside glibc.
void tune_allocator();

/// Every combination of batches and sequence lengths.
std::vector<std::pair<std::size_t, std::size_t>> grid_points(
    const std::vector<std::size_t>& batches, const std::vector<std::size_t>& seq_lens);

/// Times single forward passes. Variants at one grid point are interleaved
/// trial by trial so drift hits all of them alike. The base model is always
/// measured. Throws BenchmarkError for a model without layers, fewer than 100
/// trials, or a workload too small for the clock.
std::vector<LatencyRecord> run_latency(const BenchOptions& options);

/// variant,batch,seq_len,size,trials,mean_ms,std_ms,slowdown_pct,median_of_means_ms
std::string latency_csv(const std::vector<LatencyRecord>& records);
/// Slowdown grid for one variant and size: rows are batches, columns seq_lens.
std::string slowdown_grid_csv(const std::vector<LatencyRecord>& records, BenchVariant variant,
                              std::size_t size);

/// Attachments realizing a variant on `model` (merging when required).
/// The model is modified for kLoraMerged.
Attachments make_variant(TransformerModel& model, BenchVariant variant, std::size_t size,
                         std::uint64_t seed);

/// Per-kind op counts of one forward pass.
struct OpProfile {
  std::array<std::size_t, static_cast<std::size_t>(OpKind::kCount_)> counts{};
  std::size_t total = 0;
  std::size_t matmuls() const;
  friend bool operator==(const OpProfile&, const OpProfile&) = default;
};
OpProfile op_profile(const TransformerModel& model, const Batch& batch,
                     const Attachments* attachments);

struct ThroughputResult {
  AdaptationStrategy strategy;
  std::size_t steps = 0;
  std::size_t tokens = 0;
  double seconds = 0.0;
  double tokens_per_sec = 0.0;
  /// Scalars that received a gradient in one backward pass.
  std::size_t gradient_scalars = 0;
};

/// Trains a private copy of `model` for `steps` steps and times it.
/// Throws BenchmarkError when steps == 0.
ThroughputResult throughput_probe(const TransformerModel& model, const TaskDataset& dataset,
                                  const AdaptationStrategy& strategy, std::size_t steps,
                                  const TrainHyper& hyper);

}  // namespace lora
