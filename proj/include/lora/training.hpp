#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lora/adamw.hpp"
#include "lora/adapters.hpp"
#include "lora/model.hpp"
#include "lora/strategy.hpp"
#include "lora/tasks.hpp"

namespace lora {

enum class LrSchedule { kConstant, kLinear };

struct TrainHyper {
  AdamWHyper adam;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 0;
  LrSchedule schedule = LrSchedule::kLinear;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::size_t trainable_params = 0;
  double wall_ms = 0.0;
};

/// "epoch,loss,trainable_params,wall_ms" rows with a header line.
std::string metrics_csv(const std::vector<EpochMetrics>& metrics);

struct PretrainResult {
  TransformerModel model;
  std::vector<EpochMetrics> metrics;
  double initial_loss = 0.0;
};

/// Trains a freshly initialized model (seeded by hyper.seed) with every
/// parameter trainable. Throws TrainingError if the loss becomes non-finite.
PretrainResult pretrain(const ModelConfig& config, const TaskDataset& dataset,
                        const TrainHyper& hyper);

struct AdaptResult {
  Attachments attachments;
  std::vector<EpochMetrics> metrics;
  std::size_t trainable_params = 0;
  /// Scalars that received a gradient in the final step.
  std::size_t gradient_scalars = 0;
  std::size_t optimizer_state_scalars = 0;
};

/// Attaches `strategy` to `model` (seeded by hyper.seed) and trains only the
/// parameters the strategy owns. Base weights outside the strategy are never
/// written.
AdaptResult adapt(TransformerModel& model, const TaskDataset& dataset,
                  const AdaptationStrategy& strategy, const TrainHyper& hyper);

/// Continues training existing attachments. Throws ContractError when any
/// LoRA module is merged.
std::vector<EpochMetrics> train(TransformerModel& model, Attachments& attachments,
                                const TaskDataset& dataset, const TrainHyper& hyper,
                                AdamWState* state_out = nullptr,
                                std::size_t* gradient_scalars_out = nullptr);

struct EvalResult {
  double loss = 0.0;
  /// Fraction of target tokens predicted exactly by argmax.
  double accuracy = 0.0;
};

EvalResult evaluate(const TransformerModel& model, const TaskDataset& dataset,
                    const Attachments* attachments = nullptr, std::size_t batch_size = 64);

}  // namespace lora
