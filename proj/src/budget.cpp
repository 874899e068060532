#include "lora/budget.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <vector>

#include "lora/model.hpp"

namespace lora {
namespace {

std::size_t adapter_count(std::size_t adapters, std::size_t norms, std::size_t d, std::size_t r) {
  return adapters * (2 * d * r + r + d) + 2 * norms * d;
}

std::size_t block_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  return 4 * d + 4 * (d * d + d) + f * d + f + d * f + d;
}

}  // namespace

std::size_t precision_width(Precision p) { return p == Precision::kFp16 ? 2 : 4; }

std::size_t bias_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  // q/k/v/o biases, MLP biases, two LN shifts per block; final LN shift.
  return c.n_layers * (4 * d + c.d_ffn + d + 2 * d) + d;
}

ParamBudget count(const ModelConfig& config, const AdaptationStrategy& strategy) {
  strategy.validate(config);
  const std::size_t L = config.n_layers;
  const std::size_t d = config.d_model;
  std::size_t n = 0;
  switch (strategy.kind) {
    case StrategyKind::kFullFineTune:
      n = total_parameter_count(config);
      break;
    case StrategyKind::kFineTuneTop2:
      n = std::min<std::size_t>(2, L) * block_parameter_count(config) + 2 * d +
          config.vocab_size * d;
      break;
    case StrategyKind::kBitFit:
      n = bias_parameter_count(config);
      break;
    case StrategyKind::kAdapterH:
      n = adapter_count(2 * L, 0, d, strategy.adapter->bottleneck);
      break;
    case StrategyKind::kAdapterL:
      n = adapter_count(L, L, d, strategy.adapter->bottleneck);
      break;
    default:
      break;
  }
  if (strategy.lora) {
    const std::size_t modules = L * strategy.lora->targets.size();
    n += 2 * modules * d * strategy.lora->rank;
    if (strategy.lora->train_bias) n += modules * d;
  }
  if (strategy.prefix) {
    const bool every_layer = strategy.kind == StrategyKind::kPrefixLayer ||
                             strategy.kind == StrategyKind::kLoraPrefixLayer;
    n += (every_layer ? L : 1) * d * strategy.prefix->slots();
  }
  ParamBudget b;
  b.strategy = strategy;
  b.trainable_params = n;
  b.checkpoint_bytes_fp16 = checkpoint_size(b, Precision::kFp16);
  b.checkpoint_bytes_fp32 = checkpoint_size(b, Precision::kFp32);
  b.optimizer_state_scalars = 2 * n;
  return b;
}

std::size_t checkpoint_size(const ParamBudget& budget, Precision precision) {
  return precision_width(precision) * budget.trainable_params + kCheckpointPrefixBytes;
}

std::string format_millions(std::size_t n) {
  char buf[32];
  const double v = static_cast<double>(n);
  if (n >= 50'000) {
    std::snprintf(buf, sizeof buf, "%.1fM", v / 1e6);
  } else if (n >= 1'000) {
    std::snprintf(buf, sizeof buf, "%.1fK", v / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%zu", n);
  }
  return buf;
}

std::string budget_table_csv(const ModelConfig& config,
                             std::span<const AdaptationStrategy> strategies) {
  std::ostringstream os;
  os << "strategy,trainable_params,display,checkpoint_bytes_fp16,checkpoint_bytes_fp32,"
        "optimizer_state_scalars\n";
  for (const AdaptationStrategy& s : strategies) {
    const ParamBudget b = count(config, s);
    os << s.to_string() << ',' << b.trainable_params << ',' << format_millions(b.trainable_params)
       << ',' << b.checkpoint_bytes_fp16 << ',' << b.checkpoint_bytes_fp32 << ','
       << b.optimizer_state_scalars << '\n';
  }
  return os.str();
}

std::string budget_table_text(const ModelConfig& config,
                              std::span<const AdaptationStrategy> strategies) {
  std::vector<std::vector<std::string>> rows{
      {"strategy", "trainable", "params", "fp16 bytes", "fp32 bytes", "adam state"}};
  for (const AdaptationStrategy& s : strategies) {
    const ParamBudget b = count(config, s);
    rows.push_back({s.to_string(), format_millions(b.trainable_params),
                    std::to_string(b.trainable_params), std::to_string(b.checkpoint_bytes_fp16),
                    std::to_string(b.checkpoint_bytes_fp32),
                    std::to_string(b.optimizer_state_scalars)});
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      const std::string pad(width[c] - r[c].size(), ' ');
      // Strategy names left-aligned, numbers right-aligned.
      os << (c == 0 ? r[c] + pad : pad + r[c]) << (c + 1 < r.size() ? "  " : "\n");
    }
  }
  return os.str();
}

}  // namespace lora
