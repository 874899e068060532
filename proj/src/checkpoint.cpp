#include "lora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "lora/errors.hpp"

namespace lora {
namespace {

using Json = nlohmann::ordered_json;

template <typename T>
void append_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

std::size_t width(DType d) { return d == DType::kF64 ? 8 : 4; }

DType parse_dtype(const std::string& s) {
  if (s == "f64") return DType::kF64;
  if (s == "f32") return DType::kF32;
  throw ConfigError("checkpoint: unknown dtype '" + s + "'");
}

CheckpointKind parse_kind(const std::string& s) {
  if (s == "full_model") return CheckpointKind::kFullModel;
  if (s == "lora_delta") return CheckpointKind::kLoraDelta;
  throw ConfigError("checkpoint: unknown kind '" + s + "'");
}

Json config_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
              {"n_heads", c.n_heads},         {"d_ffn", c.d_ffn},
              {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

struct Header {
  Json json;
  std::size_t payload_begin = 0;
};

Header split_header(std::string_view bytes) {
  if (bytes.size() < 8) throw ConfigError("checkpoint: file shorter than its length prefix");
  const auto n = read_le<std::uint64_t>(bytes.data());
  if (n > bytes.size() - 8) throw ConfigError("checkpoint: header length exceeds file size");
  Header h;
  try {
    h.json = Json::parse(bytes.substr(8, n));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed header: ") + e.what());
  }
  h.payload_begin = 8 + n;
  return h;
}

std::vector<TensorEntry> index_from_json(const Json& j, std::size_t payload_size) {
  std::vector<TensorEntry> out;
  for (const Json& e : j.at("tensor_index")) {
    TensorEntry t{e.at("name").get<std::string>(), e.at("rows").get<std::size_t>(),
                  e.at("cols").get<std::size_t>(), parse_dtype(e.at("dtype").get<std::string>()),
                  e.at("byte_offset").get<std::size_t>()};
    out.push_back(std::move(t));
  }
  // Extents must lie inside the payload and must not overlap.
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const TensorEntry& t : out) {
    const std::size_t len = t.rows * t.cols * width(t.dtype);
    if (t.byte_offset > payload_size || len > payload_size - t.byte_offset) {
      throw ConfigError("checkpoint: tensor '" + t.name + "' extends past the end of the file");
    }
    spans.emplace_back(t.byte_offset, t.byte_offset + len);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw ConfigError("checkpoint: overlapping tensors");
  }
  return out;
}

void require_fit(const Matrix& expected, const Matrix& got, const std::string& name) {
  if (expected.rows() != got.rows() || expected.cols() != got.cols()) {
    throw ConfigError("checkpoint: tensor '" + name + "' is " + got.shape_string() +
                      " but the model expects " + expected.shape_string());
  }
}

}  // namespace

const char* checkpoint_kind_name(CheckpointKind k) {
  return k == CheckpointKind::kFullModel ? "full_model" : "lora_delta";
}

const char* dtype_name(DType d) { return d == DType::kF64 ? "f64" : "f32"; }

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Json index = Json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : ckpt.tensors) {
    index.push_back({{"name", name},
                     {"rows", m.rows()},
                     {"cols", m.cols()},
                     {"dtype", dtype_name(ckpt.dtype)},
                     {"byte_offset", offset}});
    offset += m.size() * width(ckpt.dtype);
  }
  Json header{{"format_version", kCheckpointFormatVersion},
              {"kind", checkpoint_kind_name(ckpt.kind)},
              {"model_config", config_json(ckpt.model_config)},
              {"strategy", ckpt.strategy.to_string()},
              {"seed", ckpt.seed},
              {"dtype", dtype_name(ckpt.dtype)}};
  if (ckpt.kind == CheckpointKind::kLoraDelta) {
    Json mods = Json::array();
    for (const LoraModuleMeta& m : ckpt.modules)
      mods.push_back({{"layer", m.target.layer},
                      {"target", weight_name(m.target.weight)},
                      {"r", m.rank},
                      {"alpha", m.alpha}});
    header["modules"] = std::move(mods);
  }
  header["tensor_index"] = std::move(index);

  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  append_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, m] : ckpt.tensors) {
    for (double v : m.values()) {
      if (ckpt.dtype == DType::kF64) {
        append_le<double>(out, v);
      } else {
        const auto f = static_cast<float>(v);
        if (std::isfinite(v) && !std::isfinite(f)) {
          throw ContractError("checkpoint: tensor '" + name + "' overflows f32");
        }
        append_le<float>(out, f);
      }
    }
  }
  return out;
}

std::string checkpoint_header_json(std::string_view bytes) {
  return split_header(bytes).json.dump();
}

std::vector<TensorEntry> checkpoint_index(std::string_view bytes) {
  const Header h = split_header(bytes);
  return index_from_json(h.json, bytes.size() - h.payload_begin);
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  const Header h = split_header(bytes);
  const Json& j = h.json;
  Checkpoint c;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw ConfigError("checkpoint: format_version " + std::to_string(version) +
                        " is not supported (expected " +
                        std::to_string(kCheckpointFormatVersion) + ")");
    }
    c.kind = parse_kind(j.at("kind").get<std::string>());
    c.model_config = config_from_json(j.at("model_config"));
    c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dtype = parse_dtype(j.at("dtype").get<std::string>());
    if (c.kind == CheckpointKind::kLoraDelta) {
      for (const Json& m : j.at("modules")) {
        c.modules.push_back({{m.at("layer").get<std::size_t>(),
                              parse_weight(m.at("target").get<std::string>())},
                             m.at("r").get<std::size_t>(),
                             m.at("alpha").get<double>()});
      }
    }
    const std::string_view payload = bytes.substr(h.payload_begin);
    for (const TensorEntry& t : index_from_json(j, payload.size())) {
      if (t.dtype != c.dtype) throw ConfigError("checkpoint: mixed dtypes are not supported");
      Matrix m(t.rows, t.cols);
      const char* p = payload.data() + t.byte_offset;
      for (double& v : m.values()) {
        v = t.dtype == DType::kF64 ? read_le<double>(p) : read_le<float>(p);
        p += width(t.dtype);
      }
      c.tensors.emplace_back(t.name, std::move(m));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return c;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("failed writing '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Checkpoint full_model_checkpoint(const TransformerModel& model, const Attachments* attachments,
                                 std::uint64_t seed, DType dtype) {
  Checkpoint c;
  c.kind = CheckpointKind::kFullModel;
  c.model_config = model.config;
  c.seed = seed;
  c.dtype = dtype;
  c.strategy = attachments != nullptr ? attachments->strategy : AdaptationStrategy::full_fine_tune();
  for (const ParamInfo& p : model.parameters()) c.tensors.emplace_back(p.name, *p.value);
  if (attachments != nullptr) {
    for (const LoraModule& m : attachments->lora) {
      if (!m.merged) {
        throw ContractError("full_model checkpoint: LoRA module " + m.param_prefix() +
                            " must be merged first");
      }
    }
    Attachments copy = *attachments;
    for (const NamedParam& p : copy.trainable_parameters()) c.tensors.emplace_back(p.name, *p.value);
  }
  return c;
}

Checkpoint lora_delta_checkpoint(const ModelConfig& config, const Attachments& attachments,
                                 std::uint64_t seed, DType dtype) {
  const AdaptationStrategy& s = attachments.strategy;
  if (s.kind != StrategyKind::kLora || !s.lora || s.lora->train_bias) {
    throw ContractError("lora_delta checkpoint: strategy " + s.to_string() +
                        " touches more than the LoRA factors");
  }
  Checkpoint c;
  c.kind = CheckpointKind::kLoraDelta;
  c.model_config = config;
  c.strategy = s;
  c.seed = seed;
  c.dtype = dtype;
  for (const LoraModule& m : attachments.lora) {
    c.modules.push_back({m.target, m.rank, m.alpha});
    c.tensors.emplace_back(m.param_prefix() + ".A", m.A);
    c.tensors.emplace_back(m.param_prefix() + ".B", m.B);
  }
  return c;
}

TransformerModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::kFullModel) {
    throw ConfigError("checkpoint: expected a full_model checkpoint, got lora_delta");
  }
  TransformerModel model = TransformerModel::initialize(ckpt.model_config, 0);
  for (const ParamInfo& p : model.parameters()) {
    const Matrix* m = ckpt.find(p.name);
    if (m == nullptr) throw ConfigError("checkpoint: missing tensor '" + p.name + "'");
    require_fit(*p.value, *m, p.name);
    *p.value = *m;
  }
  return model;
}

Attachments attachments_from_checkpoint(const Checkpoint& ckpt, const TransformerModel& model) {
  if (ckpt.model_config != model.config) {
    throw ConfigError("checkpoint: model_config does not match the base model");
  }
  if (ckpt.kind == CheckpointKind::kLoraDelta) {
    Attachments at;
    at.strategy = ckpt.strategy;
    for (const LoraModuleMeta& meta : ckpt.modules) {
      if (meta.target.layer >= model.config.n_layers) {
        throw ConfigError("checkpoint: LoRA target layer " + std::to_string(meta.target.layer) +
                          " does not exist in a " + std::to_string(model.config.n_layers) +
                          "-layer model");
      }
      LoraModule m;
      m.target = meta.target;
      m.rank = meta.rank;
      m.alpha = meta.alpha;
      const Matrix& host = model.blocks[meta.target.layer].attention_weight(meta.target.weight);
      const Matrix* A = ckpt.find(m.param_prefix() + ".A");
      const Matrix* B = ckpt.find(m.param_prefix() + ".B");
      if (A == nullptr || B == nullptr) {
        throw ConfigError("checkpoint: missing factors for " + m.param_prefix());
      }
      require_fit(Matrix(meta.rank, host.cols()), *A, m.param_prefix() + ".A");
      require_fit(Matrix(host.rows(), meta.rank), *B, m.param_prefix() + ".B");
      m.A = *A;
      m.B = *B;
      at.lora.push_back(std::move(m));
    }
    return at;
  }
  // Adapter and prefix tensors of a full model; any LoRA is already in the weights.
  Attachments at = attach_strategy(model, ckpt.strategy, ckpt.seed);
  at.lora.clear();
  for (const NamedParam& p : at.trainable_parameters()) {
    const Matrix* m = ckpt.find(p.name);
    if (m == nullptr) throw ConfigError("checkpoint: missing tensor '" + p.name + "'");
    require_fit(*p.value, *m, p.name);
    *p.value = *m;
  }
  return at;
}

}  // namespace lora
