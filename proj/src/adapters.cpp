#include "lora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lora/errors.hpp"

namespace lora {

Matrix LoraModule::delta() const { return scaling() * matmul(B, A); }

std::string LoraModule::param_prefix() const {
  return "lora." + std::to_string(target.layer) + "." + weight_name(target.weight);
}

bool lora_rank_is_large(std::size_t rank, std::size_t d_model) { return 4 * rank > d_model; }

std::vector<LoraModule> lora_attach(const TransformerModel& model,
                                    const std::vector<AttnWeight>& targets, std::size_t rank,
                                    double alpha, std::uint64_t seed) {
  if (targets.empty()) throw ConfigError("lora_attach: empty target set");
  std::vector<AttnWeight> sorted = targets;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("lora_attach: duplicate target weight");
  }
  const std::size_t d = model.config.d_model;
  if (rank == 0 || rank > d) {
    throw ConfigError("lora_attach: rank " + std::to_string(rank) + " outside [1, " +
                      std::to_string(d) + "]");
  }
  if (!(alpha > 0.0)) throw ConfigError("lora_attach: alpha must be positive");

  std::mt19937_64 rng(seed);
  const double a_std = 1.0 / std::sqrt(static_cast<double>(rank));
  std::vector<LoraModule> out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    for (AttnWeight w : sorted) {
      const Matrix& host = model.blocks[l].attention_weight(w);
      LoraModule m;
      m.target = {l, w};
      m.rank = rank;
      m.alpha = alpha;
      m.A = Matrix::gaussian(rank, host.cols(), a_std, rng);
      m.B = Matrix(host.rows(), rank);
      out.push_back(std::move(m));
    }
  }
  return out;
}

Matrix lora_forward(const LoraModule& module, const Matrix& W0, const Matrix& x) {
  if (module.merged) {
    throw ContractError("lora_forward: module " + module.param_prefix() +
                        " is merged; the host weight already carries the update");
  }
  Matrix h = matmul(W0, x);
  Matrix side = matmul(module.B, matmul(module.A, x));
  side *= module.scaling();
  return h += side;
}

void lora_merge(LoraModule& module, Matrix& host_weight) {
  if (module.merged) throw ContractError("lora_merge: " + module.param_prefix() + " already merged");
  host_weight += module.delta();
  module.merged = true;
}

void lora_unmerge(LoraModule& module, Matrix& host_weight) {
  if (!module.merged) throw ContractError("lora_unmerge: " + module.param_prefix() + " not merged");
  host_weight -= module.delta();
  module.merged = false;
}

std::string AdapterModule::param_prefix() const {
  return "adapter." + std::to_string(layer) +
         (placement == AdapterPlacement::kAfterAttention ? ".attn" : ".mlp");
}

std::size_t AdapterModule::parameter_count() const {
  std::size_t n = W_down.size() + b_down.size() + W_up.size() + b_up.size();
  if (has_norm) n += norm_gain.size() + norm_shift.size();
  return n;
}

std::vector<AdapterModule> adapter_attach(const TransformerModel& model, AdapterVariant variant,
                                          std::size_t bottleneck, std::uint64_t seed) {
  const std::size_t d = model.config.d_model;
  if (bottleneck == 0 || bottleneck >= d) {
    throw ConfigError("adapter_attach: bottleneck " + std::to_string(bottleneck) +
                      " outside [1, d_model)");
  }
  std::mt19937_64 rng(seed);
  const double down_std = 1.0 / std::sqrt(static_cast<double>(d));
  auto make = [&](std::size_t layer, AdapterPlacement p, bool norm) {
    AdapterModule a;
    a.layer = layer;
    a.placement = p;
    a.W_down = Matrix::gaussian(d, bottleneck, down_std, rng);
    a.b_down = Matrix(1, bottleneck);
    a.W_up = Matrix(bottleneck, d);
    a.b_up = Matrix(1, d);
    a.has_norm = norm;
    if (norm) {
      a.norm_gain = Matrix(1, d, 1.0);
      a.norm_shift = Matrix(1, d);
    }
    return a;
  };
  std::vector<AdapterModule> out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    if (variant == AdapterVariant::kHoulsby) {
      out.push_back(make(l, AdapterPlacement::kAfterAttention, false));
      out.push_back(make(l, AdapterPlacement::kAfterMlp, false));
    } else {
      out.push_back(make(l, AdapterPlacement::kAfterMlp, true));
    }
  }
  return out;
}

std::string PrefixState::param_name(std::size_t index) const {
  return kind == PrefixKind::kEmbedding ? std::string("prefix.embed")
                                        : "prefix.layer." + std::to_string(index);
}

std::size_t PrefixState::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix& m : activations) n += m.size();
  return n;
}

PrefixState prefix_attach(const TransformerModel& model, PrefixKind kind, std::size_t l_p,
                          std::size_t l_i, std::uint64_t seed) {
  const std::size_t slots = l_p + l_i;
  if (slots >= model.config.max_seq_len) {
    throw ConfigError("prefix_attach: l_p + l_i = " + std::to_string(slots) +
                      " exhausts max_seq_len " + std::to_string(model.config.max_seq_len));
  }
  std::mt19937_64 rng(seed);
  PrefixState s;
  s.kind = kind;
  s.prefix_len = l_p;
  s.infix_len = l_i;
  const std::size_t count = kind == PrefixKind::kEmbedding ? 1 : model.config.n_layers;
  for (std::size_t i = 0; i < count; ++i)
    s.activations.push_back(Matrix::gaussian(slots, model.config.d_model, 1.0, rng));
  return s;
}

const LoraModule* Attachments::find_lora(std::size_t layer, AttnWeight w) const {
  for (const LoraModule& m : lora)
    if (m.target.layer == layer && m.target.weight == w) return &m;
  return nullptr;
}

const AdapterModule* Attachments::find_adapter(std::size_t layer, AdapterPlacement p) const {
  for (const AdapterModule& a : adapters)
    if (a.layer == layer && a.placement == p) return &a;
  return nullptr;
}

bool Attachments::any_merged() const {
  return std::any_of(lora.begin(), lora.end(), [](const LoraModule& m) { return m.merged; });
}

bool Attachments::all_merged() const {
  return !lora.empty() &&
         std::all_of(lora.begin(), lora.end(), [](const LoraModule& m) { return m.merged; });
}

std::vector<NamedParam> Attachments::trainable_parameters() {
  std::vector<NamedParam> out;
  for (LoraModule& m : lora) {
    if (m.merged) continue;
    out.push_back({m.param_prefix() + ".A", &m.A});
    out.push_back({m.param_prefix() + ".B", &m.B});
  }
  for (AdapterModule& a : adapters) {
    const std::string p = a.param_prefix();
    out.push_back({p + ".W_down", &a.W_down});
    out.push_back({p + ".b_down", &a.b_down});
    out.push_back({p + ".W_up", &a.W_up});
    out.push_back({p + ".b_up", &a.b_up});
    if (a.has_norm) {
      out.push_back({p + ".ln.gain", &a.norm_gain});
      out.push_back({p + ".ln.shift", &a.norm_shift});
    }
  }
  if (prefix) {
    for (std::size_t i = 0; i < prefix->activations.size(); ++i)
      out.push_back({prefix->param_name(i), &prefix->activations[i]});
  }
  return out;
}

Attachments attach_strategy(const TransformerModel& model, const AdaptationStrategy& strategy,
                            std::uint64_t seed) {
  strategy.validate(model.config);
  Attachments at;
  at.strategy = strategy;
  if (strategy.lora) {
    at.lora = lora_attach(model, strategy.lora->targets, strategy.lora->rank,
                          strategy.lora->alpha, seed);
  }
  if (strategy.adapter) {
    const AdapterVariant v = strategy.kind == StrategyKind::kAdapterH ? AdapterVariant::kHoulsby
                                                                      : AdapterVariant::kLin;
    at.adapters = adapter_attach(model, v, strategy.adapter->bottleneck, seed);
  }
  if (strategy.prefix) {
    const bool layer = strategy.kind == StrategyKind::kPrefixLayer ||
                       strategy.kind == StrategyKind::kLoraPrefixLayer;
    // Offset the seed so prefix draws do not mirror the LoRA draws.
    at.prefix = prefix_attach(model, layer ? PrefixKind::kEveryLayer : PrefixKind::kEmbedding,
                              strategy.prefix->prefix_len, strategy.prefix->infix_len,
                              seed ^ 0x9e3779b97f4a7c15ULL);
  }
  return at;
}

bool base_parameter_trainable(const AdaptationStrategy& strategy, const ParamInfo& param,
                              std::size_t n_layers) {
  switch (strategy.kind) {
    case StrategyKind::kFullFineTune:
      return true;
    case StrategyKind::kFineTuneTop2:
      if (param.layer >= 0) return static_cast<std::size_t>(param.layer) + 2 >= n_layers;
      return param.name == "head.W" || param.name.rfind("ln_f.", 0) == 0;
    case StrategyKind::kBitFit:
      return param.role == ParamRole::kBias || param.role == ParamRole::kNormShift;
    default:
      break;
  }
  if (strategy.lora && strategy.lora->train_bias && param.layer >= 0 &&
      param.role == ParamRole::kBias) {
    for (AttnWeight w : strategy.lora->targets) {
      const std::string suffix = std::string(".attn.b_") + weight_name(w)[2];
      if (param.name.size() > suffix.size() &&
          param.name.compare(param.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return true;
      }
    }
  }
  return false;
}

std::vector<NamedParam> trainable_parameters(TransformerModel& model, Attachments& attachments) {
  std::vector<NamedParam> out;
  for (const ParamInfo& p : model.parameters())
    if (base_parameter_trainable(attachments.strategy, p, model.config.n_layers))
      out.push_back({p.name, p.value});
  for (NamedParam& p : attachments.trainable_parameters()) out.push_back(std::move(p));
  return out;
}

std::size_t trainable_scalar_count(TransformerModel& model, Attachments& attachments) {
  std::size_t n = 0;
  for (const NamedParam& p : trainable_parameters(model, attachments)) n += p.value->size();
  return n;
}

void merge_all(TransformerModel& model, Attachments& attachments) {
  for (LoraModule& m : attachments.lora) {
    if (m.merged) continue;
    lora_merge(m, model.blocks.at(m.target.layer).attention_weight(m.target.weight));
  }
}

void unmerge_all(TransformerModel& model, Attachments& attachments) {
  for (LoraModule& m : attachments.lora) {
    if (!m.merged) continue;
    lora_unmerge(m, model.blocks.at(m.target.layer).attention_weight(m.target.weight));
  }
}

void switch_task(TransformerModel& model, Attachments& from, Attachments& to) {
  unmerge_all(model, from);
  merge_all(model, to);
}

}  // namespace lora
