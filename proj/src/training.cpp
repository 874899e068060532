#include "lora/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "lora/errors.hpp"
#include "lora/forward.hpp"

namespace lora {
namespace {

double lr_factor(const TrainHyper& h, std::size_t step, std::size_t total) {
  if (h.warmup_steps > 0 && step < h.warmup_steps) {
    return static_cast<double>(step + 1) / static_cast<double>(h.warmup_steps);
  }
  if (h.schedule == LrSchedule::kConstant || total <= h.warmup_steps) return 1.0;
  const double span = static_cast<double>(total - h.warmup_steps);
  return std::max(0.0, 1.0 - static_cast<double>(step - h.warmup_steps) / span);
}

}  // namespace

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,loss,trainable_params,wall_ms\n";
  for (const EpochMetrics& m : metrics)
    os << m.epoch << ',' << m.loss << ',' << m.trainable_params << ',' << m.wall_ms << '\n';
  return os.str();
}

std::vector<EpochMetrics> train(TransformerModel& model, Attachments& attachments,
                                const TaskDataset& dataset, const TrainHyper& hyper,
                                AdamWState* state_out, std::size_t* gradient_scalars_out) {
  if (attachments.any_merged()) {
    throw ContractError("train: LoRA modules are merged; unmerge before further training");
  }
  dataset.validate(model.config, attachments.strategy.reserved_slots());
  if (hyper.batch_size == 0) throw ConfigError("train: batch_size must be positive");

  std::vector<NamedParam> params = trainable_parameters(model, attachments);
  std::set<std::string> names;
  std::size_t trainable = 0;
  for (const NamedParam& p : params) {
    names.insert(p.name);
    trainable += p.value->size();
  }

  ForwardOptions opt;
  opt.attachments = &attachments;
  opt.trainable = &names;

  AdamWState local_state;
  AdamWState& state = state_out != nullptr ? *state_out : local_state;
  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(dataset.pairs.size());
  std::iota(order.begin(), order.end(), 0);

  const std::size_t steps_per_epoch = (order.size() + hyper.batch_size - 1) / hyper.batch_size;
  const std::size_t total_steps = steps_per_epoch * hyper.epochs;
  std::size_t step = 0;
  std::vector<EpochMetrics> metrics;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t begin = s * hyper.batch_size;
      const std::size_t end = std::min(order.size(), begin + hyper.batch_size);
      const Batch batch = dataset.batch(std::span(order).subspan(begin, end - begin));
      Tape tape;
      const ForwardPass fp = forward(tape, model, batch, opt);
      const Var l = loss(tape, fp.logits, batch);
      const double lv = tape.value(l)(0, 0);
      if (!std::isfinite(lv)) {
        throw TrainingError("train: loss became non-finite at step " + std::to_string(step), step);
      }
      GradientMap grads = tape.backward(l);
      if (gradient_scalars_out != nullptr) {
        std::size_t n = 0;
        for (const auto& [name, g] : grads) n += g.size();
        *gradient_scalars_out = n;
      }
      adamw_step(params, grads, state, hyper.adam, lr_factor(hyper, step, total_steps));
      loss_sum += lv;
    }
    const auto t1 = std::chrono::steady_clock::now();
    metrics.push_back({epoch, loss_sum / static_cast<double>(steps_per_epoch), trainable,
                       std::chrono::duration<double, std::milli>(t1 - t0).count()});
  }
  return metrics;
}

PretrainResult pretrain(const ModelConfig& config, const TaskDataset& dataset,
                        const TrainHyper& hyper) {
  dataset.validate(config);
  PretrainResult out{TransformerModel::initialize(config, hyper.seed), {}, 0.0};
  out.initial_loss = evaluate(out.model, dataset).loss;
  Attachments none;
  none.strategy = AdaptationStrategy::full_fine_tune();
  out.metrics = train(out.model, none, dataset, hyper);
  return out;
}

AdaptResult adapt(TransformerModel& model, const TaskDataset& dataset,
                  const AdaptationStrategy& strategy, const TrainHyper& hyper) {
  strategy.validate(model.config);
  dataset.validate(model.config, strategy.reserved_slots());
  AdaptResult out;
  out.attachments = attach_strategy(model, strategy, hyper.seed);
  out.trainable_params = trainable_scalar_count(model, out.attachments);
  AdamWState state;
  out.metrics = train(model, out.attachments, dataset, hyper, &state, &out.gradient_scalars);
  out.optimizer_state_scalars = state.scalar_count();
  return out;
}

EvalResult evaluate(const TransformerModel& model, const TaskDataset& dataset,
                    const Attachments* attachments, std::size_t batch_size) {
  const std::size_t reserved = attachments != nullptr ? attachments->strategy.reserved_slots() : 0;
  dataset.validate(model.config, reserved);
  std::vector<std::size_t> idx(dataset.pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  double loss_sum = 0.0;
  double weight_sum = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - begin);
    const Batch batch = dataset.batch(std::span(idx).subspan(begin, n));
    const Matrix z = logits(model, batch, attachments);
    const LossTargets lt = loss_targets(batch);
    const double w = std::accumulate(lt.weights.begin(), lt.weights.end(), 0.0);
    loss_sum += loss_value(z, batch) * w;
    weight_sum += w;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      if (lt.weights[r] == 0.0) continue;
      const auto row = z.row(r);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == lt.targets[r] ? 1 : 0;
      ++total;
    }
  }
  return {loss_sum / weight_sum, total > 0 ? static_cast<double>(correct) / total : 0.0};
}

}  // namespace lora
