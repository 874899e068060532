#include <cctype>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lora/adapters.hpp"
#include "lora/errors.hpp"
#include "lora/forward.hpp"
#include "lora/model.hpp"
#include "lora/tape.hpp"
#include "lora/tasks.hpp"

namespace lora {
namespace {

constexpr double kGradTol = 1e-4;

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Worst finite-difference error of d(weighted_sum(build(inputs)))/d(inputs).
double primitive_error(std::vector<Matrix> inputs, const Build& build) {
  auto run = [&](GradientMap* grads) {
    Tape t;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      vars.push_back(t.parameter("p" + std::to_string(i), inputs[i], true));
    }
    const Var l = test::weighted_sum(t, build(t, vars));
    if (grads != nullptr) *grads = t.backward(l);
    return t.value(l)(0, 0);
  };
  GradientMap g;
  run(&g);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    worst = std::max(worst, test::worst_fd_error(inputs[i], g.at("p" + std::to_string(i)),
                                                 [&] { return run(nullptr); }));
  }
  return worst;
}

Matrix away_from_zero(Matrix m) {
  for (double& v : m.values()) v += v >= 0.0 ? 0.1 : -0.1;
  return m;
}

class Primitive : public ::testing::Test {
 protected:
  std::mt19937_64 rng{17};
  Matrix rnd(std::size_t r, std::size_t c) { return test::random_matrix(r, c, rng); }
};

TEST_F(Primitive, MatMul) {
  EXPECT_LE(primitive_error({rnd(3, 4), rnd(4, 5)},
                            [](Tape& t, const auto& v) { return t.matmul(v[0], v[1]); }),
            kGradTol);
}

TEST_F(Primitive, MatMulNT) {
  EXPECT_LE(primitive_error({rnd(3, 4), rnd(5, 4)},
                            [](Tape& t, const auto& v) { return t.matmul_nt(v[0], v[1]); }),
            kGradTol);
}

TEST_F(Primitive, AddSubScale) {
  EXPECT_LE(primitive_error({rnd(3, 4), rnd(3, 4)},
                            [](Tape& t, const auto& v) {
                              return t.scale(t.sub(t.add(v[0], v[1]), t.scale(v[1], 3.0)), -0.7);
                            }),
            kGradTol);
}

TEST_F(Primitive, AddRow) {
  EXPECT_LE(primitive_error({rnd(5, 3), rnd(1, 3)},
                            [](Tape& t, const auto& v) { return t.add_row(v[0], v[1]); }),
            kGradTol);
}

TEST_F(Primitive, Relu) {
  EXPECT_LE(primitive_error({away_from_zero(rnd(4, 4))},
                            [](Tape& t, const auto& v) { return t.relu(v[0]); }),
            kGradTol);
}

TEST_F(Primitive, Gelu) {
  EXPECT_LE(primitive_error({rnd(4, 6)}, [](Tape& t, const auto& v) { return t.gelu(v[0]); }),
            kGradTol);
}

TEST_F(Primitive, LayerNorm) {
  EXPECT_LE(primitive_error({rnd(4, 6), rnd(1, 6), rnd(1, 6)},
                            [](Tape& t, const auto& v) { return t.layer_norm(v[0], v[1], v[2]); }),
            kGradTol);
}

TEST_F(Primitive, CausalSoftmax) {
  EXPECT_LE(primitive_error({rnd(5, 5)},
                            [](Tape& t, const auto& v) { return t.causal_softmax(v[0]); }),
            kGradTol);
}

TEST_F(Primitive, CrossEntropy) {
  const std::vector<int> targets{0, 3, 2, 1};
  const std::vector<double> weights{1.0, 0.0, 0.5, 2.0};
  EXPECT_LE(primitive_error({rnd(4, 5)},
                            [&](Tape& t, const auto& v) {
                              return t.cross_entropy(v[0], targets, weights);
                            }),
            kGradTol);
}

TEST_F(Primitive, Sum) {
  EXPECT_LE(primitive_error({rnd(3, 3)}, [](Tape& t, const auto& v) { return t.sum(v[0]); }),
            kGradTol);
}

TEST_F(Primitive, SlicesAndConcats) {
  EXPECT_LE(primitive_error({rnd(6, 5)},
                            [](Tape& t, const auto& v) {
                              return t.slice_cols(t.slice_rows(v[0], 1, 4), 2, 3);
                            }),
            kGradTol);
  EXPECT_LE(primitive_error({rnd(2, 3), rnd(4, 3)},
                            [](Tape& t, const auto& v) {
                              const std::vector<Var> parts{v[1], v[0], v[1]};
                              return t.concat_rows(parts);
                            }),
            kGradTol);
  EXPECT_LE(primitive_error({rnd(3, 2), rnd(3, 1)},
                            [](Tape& t, const auto& v) {
                              const std::vector<Var> parts{v[0], v[1]};
                              return t.concat_cols(parts);
                            }),
            kGradTol);
}

TEST_F(Primitive, GatherRowsWithRepeats) {
  const std::vector<std::size_t> idx{2, 0, 2, 1, 2};
  EXPECT_LE(primitive_error({rnd(4, 3)},
                            [&](Tape& t, const auto& v) { return t.gather_rows(v[0], idx); }),
            kGradTol);
}

TEST_F(Primitive, OverwriteRows) {
  const std::vector<std::size_t> rows{0, 3};
  EXPECT_LE(primitive_error({rnd(5, 3), rnd(2, 3)},
                            [&](Tape& t, const auto& v) {
                              return t.overwrite_rows(v[0], rows, v[1]);
                            }),
            kGradTol);
}

TEST(Tape, FrozenLeavesCarryNoAdjoint) {
  std::mt19937_64 rng(3);
  const Matrix w = test::random_matrix(4, 4, rng);
  const Matrix x = test::random_matrix(2, 4, rng);
  Tape t;
  const Var frozen = t.parameter("w0", w, false);
  const Var trained = t.parameter("x", x, true);
  const Var wx = t.matmul_nt(t.gelu(t.constant(x)), frozen);
  EXPECT_FALSE(t.requires_grad(frozen));
  EXPECT_FALSE(t.requires_grad(wx));
  const Var l = t.sum(t.add(wx, t.matmul_nt(trained, frozen)));
  const GradientMap g = t.backward(l);
  EXPECT_EQ(g.count("w0"), 0u);
  EXPECT_EQ(g.count("x"), 1u);
}

TEST(Tape, BackwardRequiresScalar) {
  Tape t;
  const Matrix m(2, 2, 1.0);
  const Var v = t.parameter("m", m, true);
  EXPECT_THROW(t.backward(v), ContractError);
}

// Whole-model checks: every trainable tensor of a strategy against central
// differences of the task loss.
class ModelGradient : public ::testing::TestWithParam<const char*> {};

TEST_P(ModelGradient, MatchesFiniteDifferences) {
  const ModelConfig config = test::tiny_config();
  TransformerModel model = TransformerModel::initialize(config, 4);
  const AdaptationStrategy s = parse_strategy(GetParam());
  Attachments at = attach_strategy(model, s, 5);
  // Non-zero B and W_up so that every factor has a non-trivial gradient.
  std::mt19937_64 rng(6);
  for (LoraModule& m : at.lora) m.B = test::random_matrix(m.B.rows(), m.B.cols(), rng, 0.3);
  for (AdapterModule& a : at.adapters) {
    a.W_up = test::random_matrix(a.W_up.rows(), a.W_up.cols(), rng, 0.3);
  }
  const TaskDataset data = reverse_task(config.vocab_size, 3, 3, 7);
  const std::vector<std::size_t> idx{0, 1, 2};
  const Batch batch = data.batch(idx);

  std::vector<NamedParam> params = trainable_parameters(model, at);
  std::set<std::string> names;
  for (const NamedParam& p : params) names.insert(p.name);
  auto run = [&](GradientMap* grads) {
    Tape t;
    const ForwardPass fp = forward(t, model, batch, ForwardOptions{&at, &names});
    const Var l = loss(t, fp.logits, batch);
    if (grads != nullptr) *grads = t.backward(l);
    return t.value(l)(0, 0);
  };
  GradientMap g;
  run(&g);

  std::set<std::string> got;
  for (const auto& [name, grad] : g) got.insert(name);
  EXPECT_EQ(got, names) << "gradients must exist for exactly the trainable tensors";

  for (NamedParam& p : params) {
    const double err = test::worst_fd_error(*p.value, g.at(p.name), [&] { return run(nullptr); });
    EXPECT_LE(err, kGradTol) << p.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Strategies, ModelGradient,
                         ::testing::Values("lora:r=2:qv", "lora:r=1:qkvo:bias", "adapter-h:r=2",
                                           "adapter-l:r=2", "pre-embed:lp=2:li=1",
                                           "pre-layer:lp=1:li=1", "lora+pl:r=2:q:lp=1:li=0",
                                           "bitfit", "ft"),
                         [](const auto& info) {
                           std::string n = info.param;
                           for (char& c : n) {
                             if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
                           }
                           return n;
                         });

TEST(ModelGradient, LoraLeavesBaseWeightsFrozen) {
  const ModelConfig config = test::tiny_config();
  TransformerModel model = TransformerModel::initialize(config, 1);
  Attachments at = attach_strategy(model, parse_strategy("lora:r=2:qv"), 2);
  std::vector<NamedParam> params = trainable_parameters(model, at);
  std::set<std::string> names;
  for (const NamedParam& p : params) names.insert(p.name);
  for (const ParamInfo& p : model.parameters()) EXPECT_EQ(names.count(p.name), 0u) << p.name;

  const TaskDataset data = reverse_task(config.vocab_size, 3, 2, 3);
  const std::vector<std::size_t> idx{0, 1};
  Tape t;
  const ForwardPass fp = forward(t, model, data.batch(idx), ForwardOptions{&at, &names});
  const GradientMap g = t.backward(loss(t, fp.logits, data.batch(idx)));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (AttnWeight w : {AttnWeight::kQuery, AttnWeight::kKey, AttnWeight::kValue,
                         AttnWeight::kOutput}) {
      EXPECT_EQ(g.count(attention_weight_param_name(l, w)), 0u);
    }
  }
  EXPECT_EQ(g.size(), 2 * 2 * config.n_layers);
}

}  // namespace
}  // namespace lora
