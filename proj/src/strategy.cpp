#include "lora/strategy.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include "lora/errors.hpp"

namespace lora {
namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t parse_count(const std::string& text, const std::string& field) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("strategy: bad integer for " + field + ": '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& text, const std::string& field) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("strategy: bad number for " + field + ": '" + text + "'");
  }
}

std::vector<AttnWeight> canonical(std::vector<AttnWeight> targets) {
  std::sort(targets.begin(), targets.end());
  return targets;
}

std::string target_letters(const std::vector<AttnWeight>& targets) {
  std::string s;
  for (AttnWeight w : targets) {
    switch (w) {
      case AttnWeight::kQuery: s += 'q'; break;
      case AttnWeight::kKey: s += 'k'; break;
      case AttnWeight::kValue: s += 'v'; break;
      case AttnWeight::kOutput: s += 'o'; break;
    }
  }
  return s;
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const char* weight_name(AttnWeight w) {
  switch (w) {
    case AttnWeight::kQuery: return "W_q";
    case AttnWeight::kKey: return "W_k";
    case AttnWeight::kValue: return "W_v";
    case AttnWeight::kOutput: return "W_o";
  }
  return "?";
}

AttnWeight parse_weight(const std::string& name) {
  if (name == "W_q" || name == "q") return AttnWeight::kQuery;
  if (name == "W_k" || name == "k") return AttnWeight::kKey;
  if (name == "W_v" || name == "v") return AttnWeight::kValue;
  if (name == "W_o" || name == "o") return AttnWeight::kOutput;
  throw ConfigError("unknown attention weight '" + name + "'");
}

const char* kind_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kFullFineTune: return "ft";
    case StrategyKind::kFineTuneTop2: return "ft-top2";
    case StrategyKind::kBitFit: return "bitfit";
    case StrategyKind::kPrefixEmbed: return "pre-embed";
    case StrategyKind::kPrefixLayer: return "pre-layer";
    case StrategyKind::kAdapterH: return "adapter-h";
    case StrategyKind::kAdapterL: return "adapter-l";
    case StrategyKind::kLora: return "lora";
    case StrategyKind::kLoraPrefixEmbed: return "lora+pe";
    case StrategyKind::kLoraPrefixLayer: return "lora+pl";
  }
  return "?";
}

AdaptationStrategy AdaptationStrategy::full_fine_tune() { return {}; }

AdaptationStrategy AdaptationStrategy::fine_tune_top2() {
  AdaptationStrategy s;
  s.kind = StrategyKind::kFineTuneTop2;
  return s;
}

AdaptationStrategy AdaptationStrategy::bitfit() {
  AdaptationStrategy s;
  s.kind = StrategyKind::kBitFit;
  return s;
}

AdaptationStrategy AdaptationStrategy::prefix_embed(std::size_t l_p, std::size_t l_i) {
  AdaptationStrategy s;
  s.kind = StrategyKind::kPrefixEmbed;
  s.prefix = PrefixConfig{l_p, l_i};
  return s;
}

AdaptationStrategy AdaptationStrategy::prefix_layer(std::size_t l_p, std::size_t l_i) {
  AdaptationStrategy s;
  s.kind = StrategyKind::kPrefixLayer;
  s.prefix = PrefixConfig{l_p, l_i};
  return s;
}

AdaptationStrategy AdaptationStrategy::adapter_h(std::size_t bottleneck) {
  AdaptationStrategy s;
  s.kind = StrategyKind::kAdapterH;
  s.adapter = AdapterConfig{bottleneck};
  return s;
}

AdaptationStrategy AdaptationStrategy::adapter_l(std::size_t bottleneck) {
  AdaptationStrategy s;
  s.kind = StrategyKind::kAdapterL;
  s.adapter = AdapterConfig{bottleneck};
  return s;
}

AdaptationStrategy AdaptationStrategy::low_rank(std::size_t rank, std::vector<AttnWeight> targets,
                                                double alpha) {
  AdaptationStrategy s;
  s.kind = StrategyKind::kLora;
  s.lora = LoraConfig{rank, alpha > 0.0 ? alpha : static_cast<double>(rank),
                      canonical(std::move(targets)), false};
  return s;
}

AdaptationStrategy compose(const LoraConfig& lora_cfg, const PrefixConfig& prefix_cfg,
                           bool prefix_layer) {
  AdaptationStrategy s;
  s.kind = prefix_layer ? StrategyKind::kLoraPrefixLayer : StrategyKind::kLoraPrefixEmbed;
  s.lora = lora_cfg;
  s.lora->targets = canonical(s.lora->targets);
  s.prefix = prefix_cfg;
  return s;
}

void AdaptationStrategy::validate(const ModelConfig& config) const {
  config.validate();
  const bool wants_lora =
      kind == StrategyKind::kLora || kind == StrategyKind::kLoraPrefixEmbed ||
      kind == StrategyKind::kLoraPrefixLayer;
  const bool wants_prefix =
      kind == StrategyKind::kPrefixEmbed || kind == StrategyKind::kPrefixLayer ||
      kind == StrategyKind::kLoraPrefixEmbed || kind == StrategyKind::kLoraPrefixLayer;
  const bool wants_adapter = kind == StrategyKind::kAdapterH || kind == StrategyKind::kAdapterL;
  if (wants_lora != lora.has_value() || wants_prefix != prefix.has_value() ||
      wants_adapter != adapter.has_value()) {
    throw ConfigError(std::string("strategy ") + kind_name(kind) +
                      ": hyperparameter blocks do not match the kind");
  }
  if (lora) {
    if (lora->rank == 0 || lora->rank > config.d_model) {
      throw ConfigError("lora: rank " + std::to_string(lora->rank) + " outside [1, " +
                        std::to_string(config.d_model) + "]");
    }
    if (!(lora->alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
    if (lora->targets.empty()) throw ConfigError("lora: no target weights");
    auto sorted = canonical(lora->targets);
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("lora: duplicate target weight");
    }
  }
  if (prefix) {
    const bool pure = kind == StrategyKind::kPrefixEmbed || kind == StrategyKind::kPrefixLayer;
    if (pure && prefix->slots() == 0) throw ConfigError("prefix: l_p + l_i must be positive");
    if (prefix->slots() >= config.max_seq_len) {
      throw ConfigError("prefix: l_p + l_i = " + std::to_string(prefix->slots()) +
                        " exhausts max_seq_len " + std::to_string(config.max_seq_len));
    }
  }
  if (adapter) {
    if (adapter->bottleneck == 0 || adapter->bottleneck >= config.d_model) {
      throw ConfigError("adapter: bottleneck " + std::to_string(adapter->bottleneck) +
                        " outside [1, d_model)");
    }
  }
}

std::string AdaptationStrategy::to_string() const {
  std::string s = kind_name(kind);
  if (lora) {
    s += ":r=" + std::to_string(lora->rank) + ":" + target_letters(lora->targets) +
         ":alpha=" + format_real(lora->alpha);
    if (lora->train_bias) s += ":bias";
  }
  if (prefix) {
    s += ":lp=" + std::to_string(prefix->prefix_len) + ":li=" + std::to_string(prefix->infix_len);
  }
  if (adapter) s += ":r=" + std::to_string(adapter->bottleneck);
  return s;
}

AdaptationStrategy parse_strategy(const std::string& text) {
  const auto parts = split(text, ':');
  const std::string& head = parts[0];
  static const std::map<std::string, StrategyKind> kinds = {
      {"ft", StrategyKind::kFullFineTune},        {"ft-top2", StrategyKind::kFineTuneTop2},
      {"bitfit", StrategyKind::kBitFit},          {"pre-embed", StrategyKind::kPrefixEmbed},
      {"pre-layer", StrategyKind::kPrefixLayer},  {"adapter-h", StrategyKind::kAdapterH},
      {"adapter-l", StrategyKind::kAdapterL},     {"lora", StrategyKind::kLora},
      {"lora+pe", StrategyKind::kLoraPrefixEmbed}, {"lora+pl", StrategyKind::kLoraPrefixLayer},
  };
  auto k = kinds.find(head);
  if (k == kinds.end()) throw ConfigError("unknown strategy '" + head + "'");

  AdaptationStrategy s;
  s.kind = k->second;
  const bool has_lora = s.kind == StrategyKind::kLora || s.kind == StrategyKind::kLoraPrefixEmbed ||
                        s.kind == StrategyKind::kLoraPrefixLayer;
  const bool has_prefix = s.kind == StrategyKind::kPrefixEmbed ||
                          s.kind == StrategyKind::kPrefixLayer ||
                          s.kind == StrategyKind::kLoraPrefixEmbed ||
                          s.kind == StrategyKind::kLoraPrefixLayer;
  const bool has_adapter = s.kind == StrategyKind::kAdapterH || s.kind == StrategyKind::kAdapterL;

  std::optional<std::size_t> rank;
  std::optional<double> alpha;
  std::optional<std::string> targets;
  std::optional<std::size_t> lp;
  std::optional<std::size_t> li;
  bool bias = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    const auto eq = p.find('=');
    if (eq == std::string::npos) {
      if (p == "bias" && has_lora) {
        bias = true;
      } else if (has_lora && !p.empty() && p.find_first_not_of("qkvo") == std::string::npos) {
        targets = p;
      } else {
        throw ConfigError("strategy '" + text + "': unexpected field '" + p + "'");
      }
      continue;
    }
    const std::string key = p.substr(0, eq);
    const std::string val = p.substr(eq + 1);
    if (key == "r" && (has_lora || has_adapter)) {
      rank = parse_count(val, key);
    } else if (key == "alpha" && has_lora) {
      alpha = parse_real(val, key);
    } else if (key == "lp" && has_prefix) {
      lp = parse_count(val, key);
    } else if (key == "li" && has_prefix) {
      li = parse_count(val, key);
    } else {
      throw ConfigError("strategy '" + text + "': unexpected field '" + key + "'");
    }
  }

  if (has_lora) {
    if (!rank) throw ConfigError("strategy '" + text + "': missing r=");
    std::vector<AttnWeight> w;
    for (char c : targets.value_or("qv")) w.push_back(parse_weight(std::string(1, c)));
    s.lora = LoraConfig{*rank, alpha.value_or(static_cast<double>(*rank)), canonical(w), bias};
  }
  if (has_prefix) s.prefix = PrefixConfig{lp.value_or(0), li.value_or(0)};
  if (has_adapter) {
    if (!rank) throw ConfigError("strategy '" + text + "': missing r=");
    s.adapter = AdapterConfig{*rank};
  }
  return s;
}

}  // namespace lora
