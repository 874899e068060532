#include <cstring>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "helpers.hpp"
#include "lora/adapters.hpp"
#include "lora/checkpoint.hpp"
#include "lora/errors.hpp"
#include "lora/forward.hpp"
#include "lora/model.hpp"

namespace lora {
namespace {

using Json = nlohmann::ordered_json;

Attachments trained_lora(const TransformerModel& m, const char* strategy, std::uint64_t seed) {
  Attachments at = attach_strategy(m, parse_strategy(strategy), seed);
  std::mt19937_64 rng(seed);
  for (LoraModule& mod : at.lora) mod.B = test::random_matrix(mod.B.rows(), mod.B.cols(), rng, 0.1);
  return at;
}

// Replaces the JSON header of serialized bytes and fixes the length prefix.
std::string with_header(std::string_view bytes, const Json& header) {
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  const std::string text = header.dump();
  std::string out(8, '\0');
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  return out + text + std::string(bytes.substr(8 + n));
}

TEST(Checkpoint, LayoutHasLittleEndianPrefixAndJsonHeader) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 1);
  const std::string bytes = serialize_checkpoint(full_model_checkpoint(m, nullptr, 7));
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[i]);
  const Json h = Json::parse(bytes.substr(8, n));
  EXPECT_EQ(h.at("format_version"), kCheckpointFormatVersion);
  EXPECT_EQ(h.at("kind"), "full_model");
  EXPECT_EQ(h.at("seed"), 7);
  EXPECT_EQ(h.at("model_config").at("d_model"), test::tiny_config().d_model);
  EXPECT_EQ(bytes.size(), 8 + n + 8 * m.census());
  EXPECT_EQ(checkpoint_header_json(bytes), bytes.substr(8, n));
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  const Attachments lora = trained_lora(m, "lora:r=2:qv", 3);
  TransformerModel h_model = m;
  Attachments h = attach_strategy(h_model, parse_strategy("adapter-h:r=2"), 4);
  for (DType dt : {DType::kF64, DType::kF32}) {
    for (const Checkpoint& c : {full_model_checkpoint(m, nullptr, 1, dt),
                                lora_delta_checkpoint(m.config, lora, 3, dt),
                                full_model_checkpoint(h_model, &h, 4, dt)}) {
      const std::string first = serialize_checkpoint(c);
      const std::string second = serialize_checkpoint(parse_checkpoint(first));
      EXPECT_EQ(first, second) << checkpoint_kind_name(c.kind) << " " << dtype_name(dt);
    }
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "lora_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  write_checkpoint(p1, full_model_checkpoint(m, nullptr, 1));
  const Checkpoint back = read_checkpoint(p1);
  EXPECT_EQ(model_from_checkpoint(back), m);
  write_checkpoint(p2, back);
  EXPECT_EQ(serialize_checkpoint(read_checkpoint(p1)), serialize_checkpoint(read_checkpoint(p2)));
  EXPECT_THROW(read_checkpoint((dir / "missing.ckpt").string()), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, DeltaHoldsOnlyLoraFactors) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  const Attachments at = trained_lora(m, "lora:r=2:qkvo", 5);
  const std::string bytes = serialize_checkpoint(lora_delta_checkpoint(m.config, at, 5));
  const auto index = checkpoint_index(bytes);
  ASSERT_EQ(index.size(), 2 * 4 * m.config.n_layers);
  std::size_t scalars = 0;
  for (const TensorEntry& e : index) {
    EXPECT_EQ(e.name.rfind("lora.", 0), 0u) << e.name;
    const std::string tail = e.name.substr(e.name.size() - 2);
    EXPECT_TRUE(tail == ".A" || tail == ".B") << e.name;
    for (const ParamInfo& p : TransformerModel(m).parameters()) EXPECT_NE(e.name, p.name);
    scalars += e.rows * e.cols;
  }
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  EXPECT_EQ(bytes.size(), 8 + n + 8 * scalars);
  const Json h = Json::parse(checkpoint_header_json(bytes));
  EXPECT_EQ(h.at("modules").size(), 4 * m.config.n_layers);
  EXPECT_EQ(h.at("modules")[0].at("r"), 2);
}

TEST(Checkpoint, DeltaRestoresEquivalentAttachments) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  const Attachments at = trained_lora(m, "lora:r=3:qv", 6);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(lora_delta_checkpoint(m.config, at, 6)));
  const Attachments back = attachments_from_checkpoint(c, m);
  ASSERT_EQ(back.lora.size(), at.lora.size());
  for (std::size_t i = 0; i < at.lora.size(); ++i) {
    EXPECT_EQ(back.lora[i].A, at.lora[i].A);
    EXPECT_EQ(back.lora[i].B, at.lora[i].B);
    EXPECT_EQ(back.lora[i].alpha, at.lora[i].alpha);
    EXPECT_FALSE(back.lora[i].merged);
  }
}

TEST(Checkpoint, FullModelCarriesAdapterTensors) {
  TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  Attachments at = attach_strategy(m, parse_strategy("adapter-l:r=2"), 3);
  std::mt19937_64 rng(1);
  for (AdapterModule& a : at.adapters) a.W_up = test::random_matrix(a.W_up.rows(), a.W_up.cols(), rng);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(full_model_checkpoint(m, &at, 3)));
  const TransformerModel m2 = model_from_checkpoint(c);
  const Attachments at2 = attachments_from_checkpoint(c, m2);
  const Batch b{1, 6, 3, {2, 3, 4, 0, 4, 3}};
  EXPECT_EQ(logits(m2, b, &at2), logits(m, b, &at));
}

TEST(Checkpoint, StateContracts) {
  TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  Attachments at = trained_lora(m, "lora:r=2:qv", 3);
  EXPECT_THROW(full_model_checkpoint(m, &at, 0), ContractError);
  const Attachments h = attach_strategy(m, parse_strategy("adapter-h:r=2"), 0);
  EXPECT_THROW(lora_delta_checkpoint(m.config, h, 0), ContractError);
  const Attachments bias = attach_strategy(m, parse_strategy("lora:r=2:qv:bias"), 0);
  EXPECT_THROW(lora_delta_checkpoint(m.config, bias, 0), ContractError);
  TransformerModel big = m;
  big.head(0, 0) = 1e300;
  EXPECT_THROW(serialize_checkpoint(full_model_checkpoint(big, nullptr, 0, DType::kF32)),
               ContractError);
}

TEST(Checkpoint, RejectsMismatchedBase) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  const Attachments at = trained_lora(m, "lora:r=2:qv", 3);
  const Checkpoint c = lora_delta_checkpoint(m.config, at, 3);
  ModelConfig other = test::tiny_config();
  other.n_layers = 1;
  EXPECT_THROW(attachments_from_checkpoint(c, TransformerModel::initialize(other, 0)), ConfigError);
}

TEST(Checkpoint, RejectsMalformedFiles) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 2);
  const std::string good = serialize_checkpoint(lora_delta_checkpoint(m.config, trained_lora(m, "lora:r=1:q", 1), 1));
  const Json header = Json::parse(checkpoint_header_json(good));

  EXPECT_THROW(parse_checkpoint(good.substr(0, 5)), ConfigError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, 40)), ConfigError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 1)), ConfigError);

  std::string garbage = good;
  garbage[8] = '#';
  EXPECT_THROW(parse_checkpoint(garbage), ConfigError);

  Json h = header;
  h["format_version"] = kCheckpointFormatVersion + 1;
  EXPECT_THROW(parse_checkpoint(with_header(good, h)), ConfigError);

  h = header;
  h["tensor_index"][1]["byte_offset"] = 0;
  EXPECT_THROW(parse_checkpoint(with_header(good, h)), ConfigError);

  h = header;
  h["tensor_index"][0]["rows"] = 1000;
  EXPECT_THROW(parse_checkpoint(with_header(good, h)), ConfigError);

  h = header;
  h["kind"] = "weights";
  EXPECT_THROW(parse_checkpoint(with_header(good, h)), ConfigError);

  h = header;
  h.erase("model_config");
  EXPECT_THROW(parse_checkpoint(with_header(good, h)), ConfigError);

  EXPECT_NO_THROW(parse_checkpoint(with_header(good, header)));
}

}  // namespace
}  // namespace lora
