#include "lora/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "lora/errors.hpp"

namespace lora {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

}  // namespace

const std::set<std::string>& run_config_keys() {
  static const std::set<std::string> keys = {
      "task",        "task_length", "label_noise", "train_examples", "eval_examples",
      "data_seed",   "model",       "n_layers",    "d_model",        "n_heads",
      "d_ffn",       "vocab_size",  "max_seq_len", "strategy",       "lr",
      "beta1",       "beta2",       "eps",         "weight_decay",   "batch_size",
      "epochs",      "warmup_steps", "schedule",   "seed",           "out",
      "base",        "dtype"};
  return keys;
}

TrainHyper default_pretrain_hyper() {
  TrainHyper h;
  h.adam.lr = 3e-3;
  h.epochs = 5;
  h.batch_size = 32;
  h.warmup_steps = 50;
  h.schedule = LrSchedule::kLinear;
  return h;
}

TrainHyper default_adapt_hyper(const AdaptationStrategy& strategy) {
  TrainHyper h;
  h.batch_size = 32;
  h.epochs = 8;
  h.warmup_steps = 20;
  h.schedule = LrSchedule::kLinear;
  switch (strategy.kind) {
    case StrategyKind::kFullFineTune:
    case StrategyKind::kFineTuneTop2:
      h.adam.lr = 1e-3;
      break;
    default:
      h.adam.lr = 2e-2;
      break;
  }
  return h;
}

TaskDataset RunConfig::train_set() const {
  return make_task(task, model_config.vocab_size, task_length, train_examples, data_seed,
                   label_noise);
}

TaskDataset RunConfig::eval_set() const {
  return make_task(task, model_config.vocab_size, task_length, eval_examples, data_seed + 1,
                   label_noise);
}

RunConfig parse_run_config(const std::string& text, RunPurpose purpose) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (run_config_keys().count(key) == 0) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (!kv.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }

  const bool pretraining = purpose == RunPurpose::kPretrain;
  RunConfig c;
  if (pretraining) {
    c.task = "copy";
    c.task_length = 8;
    c.label_noise = 0.0;
    c.strategy = AdaptationStrategy::full_fine_tune();
  }
  for (const auto& [k, v] : kv) c.explicit_keys.insert(k);
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };

  if (auto v = get("task")) c.task = *v;
  if (c.task != "copy" && c.task != "reverse" && c.task != "kv") {
    throw ConfigError("config: unknown task '" + c.task + "'");
  }
  if (c.task == "kv" && !get("task_length")) c.task_length = 4;
  if (auto v = get("task_length")) c.task_length = parse_uint("task_length", *v);
  if (auto v = get("label_noise")) c.label_noise = parse_real("label_noise", *v);
  if (c.task != "reverse" && !get("label_noise")) c.label_noise = 0.0;
  if (c.label_noise != 0.0 && c.task != "reverse") {
    throw ConfigError("config: label_noise applies only to the reverse task");
  }
  if (auto v = get("train_examples")) c.train_examples = parse_uint("train_examples", *v);
  if (auto v = get("eval_examples")) c.eval_examples = parse_uint("eval_examples", *v);
  if (auto v = get("data_seed")) c.data_seed = parse_uint("data_seed", *v);

  if (auto v = get("model")) c.model = *v;
  c.model_config = preset(c.model);
  if (auto v = get("n_layers")) c.model_config.n_layers = parse_uint("n_layers", *v);
  if (auto v = get("d_model")) {
    c.model_config.d_model = parse_uint("d_model", *v);
    c.model_config.d_ffn = 4 * c.model_config.d_model;
  }
  if (auto v = get("n_heads")) c.model_config.n_heads = parse_uint("n_heads", *v);
  if (auto v = get("d_ffn")) c.model_config.d_ffn = parse_uint("d_ffn", *v);
  if (auto v = get("vocab_size")) c.model_config.vocab_size = parse_uint("vocab_size", *v);
  if (auto v = get("max_seq_len")) c.model_config.max_seq_len = parse_uint("max_seq_len", *v);
  c.model_config.validate();

  if (auto v = get("strategy")) c.strategy = parse_strategy(*v);
  c.strategy.validate(c.model_config);

  if (pretraining && c.strategy.kind != StrategyKind::kFullFineTune) {
    throw ConfigError("config: pre-training trains every parameter; strategy must be ft");
  }
  c.hyper = pretraining ? default_pretrain_hyper() : default_adapt_hyper(c.strategy);
  if (auto v = get("lr")) c.hyper.adam.lr = parse_real("lr", *v);
  if (auto v = get("beta1")) c.hyper.adam.beta1 = parse_real("beta1", *v);
  if (auto v = get("beta2")) c.hyper.adam.beta2 = parse_real("beta2", *v);
  if (auto v = get("eps")) c.hyper.adam.eps = parse_real("eps", *v);
  if (auto v = get("weight_decay")) c.hyper.adam.weight_decay = parse_real("weight_decay", *v);
  if (auto v = get("batch_size")) c.hyper.batch_size = parse_uint("batch_size", *v);
  if (auto v = get("epochs")) c.hyper.epochs = parse_uint("epochs", *v);
  if (auto v = get("warmup_steps")) c.hyper.warmup_steps = parse_uint("warmup_steps", *v);
  if (auto v = get("schedule")) {
    if (*v == "linear") {
      c.hyper.schedule = LrSchedule::kLinear;
    } else if (*v == "constant") {
      c.hyper.schedule = LrSchedule::kConstant;
    } else {
      throw ConfigError("config: schedule must be 'linear' or 'constant'");
    }
  }
  if (c.hyper.adam.lr < 0.0) throw ConfigError("config: lr must be non-negative");
  if (c.hyper.batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (auto v = get("seed")) c.seed = parse_uint("seed", *v);
  c.hyper.seed = c.seed;
  if (auto v = get("out")) c.out_dir = *v;
  if (auto v = get("base")) c.base = *v;
  if (auto v = get("dtype")) {
    if (*v == "f64") {
      c.dtype = DType::kF64;
    } else if (*v == "f32") {
      c.dtype = DType::kF32;
    } else {
      throw ConfigError("config: dtype must be 'f64' or 'f32'");
    }
  }
  if (c.train_examples == 0) throw ConfigError("config: train_examples must be positive");
  return c;
}

RunConfig load_run_config(const std::string& path, RunPurpose purpose) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), purpose);
}

}  // namespace lora
