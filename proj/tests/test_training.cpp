#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lora/adapters.hpp"
#include "lora/errors.hpp"
#include "lora/training.hpp"

namespace lora {
namespace {

TrainHyper quick(double lr, std::size_t epochs) {
  TrainHyper h;
  h.adam.lr = lr;
  h.epochs = epochs;
  h.batch_size = 8;
  h.seed = 3;
  return h;
}

TEST(Training, PretrainReducesLossAndIsDeterministic) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = copy_corpus(c.vocab_size, 3, 64, 1);
  const PretrainResult a = pretrain(c, d, quick(1e-2, 6));
  const PretrainResult b = pretrain(c, d, quick(1e-2, 6));
  EXPECT_LT(a.metrics.back().loss, 0.8 * a.initial_loss);
  EXPECT_EQ(a.model, b.model);
  ASSERT_EQ(a.metrics.size(), 6u);
  EXPECT_EQ(a.metrics.back().trainable_params, total_parameter_count(c));
  const std::string csv = metrics_csv(a.metrics);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,trainable_params,wall_ms");
}

// Base tensors outside a strategy are bit-identical after training.
class FrozenBase : public ::testing::TestWithParam<const char*> {};

TEST_P(FrozenBase, OnlyOwnedTensorsChange) {
  const ModelConfig c = test::tiny_config();
  const TransformerModel base = TransformerModel::initialize(c, 2);
  TransformerModel model = base;
  const AdaptationStrategy s = parse_strategy(GetParam());
  const TaskDataset d = reverse_task(c.vocab_size, 3, 32, 4);
  const AdaptResult r = adapt(model, d, s, quick(1e-2, 2));
  EXPECT_EQ(r.optimizer_state_scalars, 2 * r.trainable_params);
  EXPECT_EQ(r.gradient_scalars, r.trainable_params);

  std::size_t changed = 0;
  const auto before = base.parameters();
  const auto after = model.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool owned = base_parameter_trainable(s, before[i], c.n_layers);
    const bool same = *before[i].value == *after[i].value;
    if (!owned) {
      EXPECT_TRUE(same) << before[i].name;
    }
    changed += !same;
  }
  if (s.kind == StrategyKind::kLora || s.uses_adapter() || s.uses_prefix()) {
    if (!(s.lora && s.lora->train_bias)) {
      EXPECT_EQ(changed, 0u);
    }
  } else {
    EXPECT_GT(changed, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(Strategies, FrozenBase,
                         ::testing::Values("lora:r=2:qv", "lora:r=1:qk:bias", "adapter-h:r=2",
                                           "adapter-l:r=2", "pre-embed:lp=1:li=1",
                                           "pre-layer:lp=1:li=0", "bitfit", "ft-top2", "ft"),
                         [](const auto& info) {
                           std::string n = info.param;
                           for (char& ch : n) {
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           }
                           return n;
                         });

TEST(Training, AdaptIsDeterministic) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = reverse_task(c.vocab_size, 3, 32, 4);
  TransformerModel m1 = TransformerModel::initialize(c, 2), m2 = m1;
  const AdaptResult a = adapt(m1, d, parse_strategy("lora:r=2:qv"), quick(1e-2, 2));
  const AdaptResult b = adapt(m2, d, parse_strategy("lora:r=2:qv"), quick(1e-2, 2));
  EXPECT_EQ(a.attachments, b.attachments);
  EXPECT_EQ(a.metrics.back().loss, b.metrics.back().loss);
}

TEST(Training, LoraLearnsTheTask) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = reverse_task(c.vocab_size, 3, 64, 4);
  TransformerModel m = TransformerModel::initialize(c, 2);
  const double before = evaluate(m, d).loss;
  const AdaptResult r = adapt(m, d, parse_strategy("lora:r=4:qkvo"), quick(3e-2, 10));
  EXPECT_LT(evaluate(m, d, &r.attachments).loss, before);
}

TEST(Training, MergedModulesCannotTrain) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = reverse_task(c.vocab_size, 3, 16, 4);
  TransformerModel m = TransformerModel::initialize(c, 2);
  AdaptResult r = adapt(m, d, parse_strategy("lora:r=2:qv"), quick(1e-2, 1));
  merge_all(m, r.attachments);
  EXPECT_THROW(train(m, r.attachments, d, quick(1e-2, 1)), ContractError);
}

TEST(Training, DivergenceRaisesTrainingError) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = copy_corpus(c.vocab_size, 3, 64, 1);
  TrainHyper h = quick(1e300, 20);
  h.adam.eps = 1e-300;
  EXPECT_THROW(pretrain(c, d, h), TrainingError);
}

TEST(Training, EvaluateAccuracyBounds) {
  const ModelConfig c = test::tiny_config();
  const TaskDataset d = reverse_task(c.vocab_size, 3, 20, 4);
  const TransformerModel m = TransformerModel::initialize(c, 2);
  const EvalResult e = evaluate(m, d, nullptr, 7);
  EXPECT_GE(e.accuracy, 0.0);
  EXPECT_LE(e.accuracy, 1.0);
  EXPECT_NEAR(e.loss, evaluate(m, d, nullptr, 64).loss, 1e-12);
}

}  // namespace
}  // namespace lora
