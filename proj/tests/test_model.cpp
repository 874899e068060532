#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lora/budget.hpp"
#include "lora/errors.hpp"
#include "lora/forward.hpp"
#include "lora/model.hpp"
#include "lora/tasks.hpp"

namespace lora {
namespace {

Batch random_batch(const ModelConfig& c, std::size_t b, std::size_t seq, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  Batch out{b, seq, seq / 2, std::vector<int>(b * seq)};
  for (int& t : out.tokens) t = tok(rng);
  return out;
}

TEST(Model, CensusMatchesClosedForm) {
  for (const ModelConfig& c : {test::tiny_config(), toy_config(), bench_config(),
                               ModelConfig::make(3, 12, 3, 7, 5)}) {
    const TransformerModel m = TransformerModel::initialize(c, 0);
    EXPECT_EQ(m.census(), total_parameter_count(c));
  }
}

TEST(Model, BiasCountMatchesCensusOfBiasesAndShifts) {
  for (const ModelConfig& c : {test::tiny_config(), toy_config(), bench_config()}) {
    const TransformerModel m = TransformerModel::initialize(c, 0);
    std::size_t n = 0;
    for (const ParamInfo& p : m.parameters()) {
      if (p.role == ParamRole::kBias || p.role == ParamRole::kNormShift) n += p.value->size();
    }
    EXPECT_EQ(bias_parameter_count(c), n);
  }
}

TEST(Model, ParameterNamesAreUniqueAndStable) {
  const TransformerModel m = TransformerModel::initialize(test::tiny_config(), 0);
  std::set<std::string> names;
  for (const ParamInfo& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_EQ(names.count(attention_weight_param_name(1, AttnWeight::kValue)), 1u);
}

TEST(Model, InitializationIsSeedDeterministic) {
  const ModelConfig c = test::tiny_config();
  EXPECT_EQ(TransformerModel::initialize(c, 3), TransformerModel::initialize(c, 3));
  EXPECT_NE(TransformerModel::initialize(c, 3), TransformerModel::initialize(c, 4));
}

TEST(Model, ConfigValidation) {
  ModelConfig c = test::tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_config();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(preset("gpt5"), ConfigError);
  EXPECT_EQ(preset("gpt3-175b").n_layers, 96u);
  EXPECT_EQ(preset("gpt3-175b").d_model, 12288u);
  EXPECT_EQ(preset("roberta-base").d_model, 768u);
  EXPECT_EQ(preset("bench").n_layers, 12u);
  EXPECT_EQ(preset("bench").d_model, 512u);
}

TEST(Forward, IsCausal) {
  // Changing token t must leave every logit row before t unchanged.
  const ModelConfig c = test::tiny_config();
  const TransformerModel m = TransformerModel::initialize(c, 1);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Batch b = random_batch(c, 2, 9, rng);
    const Matrix before = logits(m, b);
    const std::size_t t = 1 + static_cast<std::size_t>(trial % 8);
    b.tokens[t] = (b.tokens[t] + 1) % static_cast<int>(c.vocab_size);
    const Matrix after = logits(m, b);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t k = 0; k < c.vocab_size; ++k) EXPECT_EQ(before(r, k), after(r, k));
    }
    double moved = 0.0;
    for (std::size_t k = 0; k < c.vocab_size; ++k) moved += std::abs(before(t, k) - after(t, k));
    EXPECT_GT(moved, 0.0);
  }
}

TEST(Forward, BatchRowsAreIndependent) {
  const ModelConfig c = test::tiny_config();
  const TransformerModel m = TransformerModel::initialize(c, 1);
  std::mt19937_64 rng(4);
  const Batch b = random_batch(c, 3, 6, rng);
  const Matrix all = logits(m, b);
  for (std::size_t s = 0; s < 3; ++s) {
    Batch one{1, 6, 3, std::vector<int>(b.tokens.begin() + s * 6, b.tokens.begin() + (s + 1) * 6)};
    const Matrix single = logits(m, one);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t k = 0; k < c.vocab_size; ++k)
        EXPECT_NEAR(single(r, k), all(s * 6 + r, k), 1e-12);
  }
}

TEST(Forward, RejectsBadInputs) {
  const ModelConfig c = test::tiny_config();
  const TransformerModel m = TransformerModel::initialize(c, 1);
  Batch b{1, 3, 1, {0, 1, static_cast<int>(c.vocab_size)}};
  EXPECT_THROW(logits(m, b), DimensionError);
  Batch too_long{1, c.max_seq_len + 1, 1, std::vector<int>(c.max_seq_len + 1, 0)};
  EXPECT_THROW(logits(m, too_long), ConfigError);
}

TEST(Loss, MatchesHandComputedNll) {
  // Two positions with targets; check against log-softmax by hand.
  const Matrix lg{{0.0, 1.0, 2.0}, {1.0, 1.0, 1.0}, {3.0, 0.0, 0.0}};
  const Batch b{1, 3, 1, {0, 2, 1}};
  const LossTargets lt = loss_targets(b);
  ASSERT_EQ(lt.targets.size(), 3u);
  auto nll = [&](std::size_t r, int y) {
    double z = 0.0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(lg(r, k));
    return std::log(z) - lg(r, static_cast<std::size_t>(y));
  };
  // Row 0 predicts token 1 (=2), row 1 predicts token 2 (=1); row 2 has no target.
  const double expect = 0.5 * (nll(0, 2) + nll(1, 1));
  EXPECT_NEAR(loss_value(lg, b), expect, 1e-14);
  Tape t;
  const Var l = loss(t, t.constant(lg), b);
  EXPECT_NEAR(t.value(l)(0, 0), expect, 1e-14);
}

TEST(Loss, NoTargetsIsAContractError) {
  const Batch b{1, 2, 2, {0, 1}};
  EXPECT_THROW(loss_value(Matrix(2, 3), b), ContractError);
}

TEST(Tasks, ShapesAndDeterminism) {
  const TaskDataset r1 = reverse_task(16, 5, 20, 3);
  const TaskDataset r2 = reverse_task(16, 5, 20, 3);
  ASSERT_EQ(r1.pairs.size(), 20u);
  for (std::size_t i = 0; i < r1.pairs.size(); ++i) {
    EXPECT_EQ(r1.pairs[i].context, r2.pairs[i].context);
    EXPECT_EQ(r1.pairs[i].target, r2.pairs[i].target);
    const auto& x = r1.pairs[i].context;
    ASSERT_EQ(x.size(), 6u);
    EXPECT_EQ(x.back(), kSeparator);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r1.pairs[i].target[k], x[4 - k]);
  }
  const TaskDataset kv = kv_lookup_task(16, 3, 10, 4);
  for (const TaskExample& e : kv.pairs) {
    ASSERT_EQ(e.target.size(), 1u);
    const int key = e.context.back();
    bool found = false;
    for (std::size_t k = 0; k + 1 < 6; k += 2) {
      if (e.context[k] == key) {
        EXPECT_EQ(e.target[0], e.context[k + 1]);
        found = true;
      }
    }
    EXPECT_TRUE(found);
  }
  EXPECT_THROW(make_task("nope", 16, 3, 2, 0), ConfigError);
}

TEST(Tasks, LabelNoiseRateAndFloor) {
  const TaskDataset noisy = reverse_task(34, 6, 4000, 9, 0.1);
  std::size_t flipped = 0, total = 0;
  for (const TaskExample& e : noisy.pairs) {
    for (std::size_t k = 0; k < 6; ++k) {
      flipped += e.target[k] != e.context[5 - k];
      ++total;
    }
  }
  // A flip may land on the correct token (1 in 32), so the visible rate is 0.1 * 31/32.
  const double rate = static_cast<double>(flipped) / static_cast<double>(total);
  EXPECT_NEAR(rate, 0.1 * 31.0 / 32.0, 0.01);
  EXPECT_THROW(reverse_task(34, 6, 10, 9, 1.0), ConfigError);
  EXPECT_DOUBLE_EQ(label_noise_floor(34, 0.0), 0.0);
  const double keep = 0.9 + 0.1 / 32.0, other = 0.1 / 32.0;
  EXPECT_NEAR(label_noise_floor(34, 0.1), -(keep * std::log(keep) + 31.0 * other * std::log(other)),
              1e-12);
}

TEST(Tasks, ValidateCatchesVocabularyAndLength) {
  const ModelConfig c = test::tiny_config();
  EXPECT_THROW(reverse_task(64, 3, 2, 0).validate(c), ConfigError);
  EXPECT_THROW(reverse_task(c.vocab_size, 8, 2, 0).validate(c), ConfigError);
  EXPECT_NO_THROW(reverse_task(c.vocab_size, 7, 2, 0).validate(c));
  EXPECT_THROW(reverse_task(c.vocab_size, 7, 2, 0).validate(c, 2), ConfigError);
}

}  // namespace
}  // namespace lora
