#include <gtest/gtest.h>

#include "lora/errors.hpp"
#include "lora/run_config.hpp"

namespace lora {
namespace {

TEST(RunConfig, DefaultsForAdaptation) {
  const RunConfig c = parse_run_config("");
  EXPECT_EQ(c.task, "reverse");
  EXPECT_EQ(c.model_config, toy_config());
  EXPECT_EQ(c.strategy.to_string(), "lora:r=4:qv:alpha=4");
  EXPECT_DOUBLE_EQ(c.hyper.adam.lr, 2e-2);
  EXPECT_TRUE(c.explicit_keys.empty());
  EXPECT_DOUBLE_EQ(parse_run_config("strategy = ft").hyper.adam.lr, 1e-3);
}

TEST(RunConfig, DefaultsForPretraining) {
  const RunConfig c = parse_run_config("", RunPurpose::kPretrain);
  EXPECT_EQ(c.task, "copy");
  EXPECT_EQ(c.label_noise, 0.0);
  EXPECT_EQ(c.strategy.kind, StrategyKind::kFullFineTune);
  EXPECT_THROW(parse_run_config("strategy = lora:r=2:q", RunPurpose::kPretrain), ConfigError);
}

TEST(RunConfig, ParsesEveryKey) {
  const RunConfig c = parse_run_config(R"(
# comment line
task = kv            # trailing comment
task_length = 3
train_examples = 50
eval_examples = 20
data_seed = 4
model = toy
n_layers = 3
d_model = 32
n_heads = 2
vocab_size = 40
max_seq_len = 24
strategy = adapter-h:r=2
lr = 0.005
beta1 = 0.8
beta2 = 0.99
eps = 1e-6
weight_decay = 0.01
batch_size = 8
epochs = 2
warmup_steps = 3
schedule = constant
seed = 9
out = results
base = base.ckpt
dtype = f32
)");
  EXPECT_EQ(c.task, "kv");
  EXPECT_EQ(c.task_length, 3u);
  EXPECT_EQ(c.model_config.n_layers, 3u);
  EXPECT_EQ(c.model_config.d_ffn, 128u);
  EXPECT_EQ(c.model_config.vocab_size, 40u);
  EXPECT_DOUBLE_EQ(c.hyper.adam.lr, 0.005);
  EXPECT_DOUBLE_EQ(c.hyper.adam.beta1, 0.8);
  EXPECT_EQ(c.hyper.schedule, LrSchedule::kConstant);
  EXPECT_EQ(c.hyper.seed, 9u);
  EXPECT_EQ(c.out_dir, "results");
  EXPECT_EQ(c.dtype, DType::kF32);
  EXPECT_TRUE(c.has("lr"));
  EXPECT_FALSE(c.has("label_noise"));
  EXPECT_EQ(c.train_set().pairs.size(), 50u);
  EXPECT_EQ(c.eval_set().pairs.size(), 20u);
}

TEST(RunConfig, HeldOutSetDiffersFromTrainingSet) {
  const RunConfig c = parse_run_config("train_examples = 30\neval_examples = 30");
  const TaskDataset a = c.train_set(), b = c.eval_set();
  std::size_t same = 0;
  for (std::size_t i = 0; i < 30; ++i) same += a.pairs[i].context == b.pairs[i].context;
  EXPECT_LT(same, 3u);
}

TEST(RunConfig, KvDefaultsToFourPairs) {
  EXPECT_EQ(parse_run_config("task = kv").task_length, 4u);
  EXPECT_EQ(parse_run_config("task = kv").label_noise, 0.0);
}

TEST(RunConfig, RejectsBadInput) {
  for (const char* text : {"bogus = 1", "lr = 1\nlr = 2", "just words", "epochs = -1",
                           "epochs = 2.5", "lr = fast", "lr = nan", "task = sort",
                           "task = copy\nlabel_noise = 0.1", "schedule = cosine", "dtype = f16",
                           "n_heads = 5", "strategy = lora:r=0:q", "batch_size = 0",
                           "model = gpt9", "train_examples = 0", "label_noise = 1.5"}) {
    EXPECT_THROW(
        {
          RunConfig c = parse_run_config(text);
          (void)c.train_set();
        },
        ConfigError)
        << text;
  }
  EXPECT_THROW(load_run_config("/nonexistent/config.cfg"), ConfigError);
}

TEST(RunConfig, UnknownKeyMessageNamesKeyAndLine) {
  try {
    parse_run_config("lr = 1\n\nlearning_rate = 3");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("learning_rate"), std::string::npos);
    EXPECT_NE(m.find("line 3"), std::string::npos);
  }
}

TEST(RunConfig, ShippedConfigsMatchTheDefaults) {
  const std::string dir = LORA_CONFIG_DIR;
  const RunConfig pre = load_run_config(dir + "/pretrain.cfg", RunPurpose::kPretrain);
  EXPECT_EQ(pre.task, "copy");
  EXPECT_EQ(pre.hyper.adam.lr, default_pretrain_hyper().adam.lr);
  EXPECT_EQ(pre.hyper.epochs, default_pretrain_hyper().epochs);
  EXPECT_EQ(pre.hyper.warmup_steps, default_pretrain_hyper().warmup_steps);

  const RunConfig rev = load_run_config(dir + "/adapt_reverse.cfg");
  const RunConfig def = parse_run_config("");
  EXPECT_EQ(rev.strategy.to_string(), def.strategy.to_string());
  EXPECT_EQ(rev.hyper.adam.lr, def.hyper.adam.lr);
  EXPECT_EQ(rev.train_set().pairs.size(), def.train_set().pairs.size());
  EXPECT_EQ(rev.label_noise, def.label_noise);
  EXPECT_EQ(rev.base, "out/base.ckpt");

  const RunConfig kv = load_run_config(dir + "/adapt_kv.cfg");
  EXPECT_EQ(kv.task, "kv");
  EXPECT_NO_THROW(kv.train_set().validate(kv.model_config));
}

}  // namespace
}  // namespace lora
