#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "lora/checkpoint.hpp"
#include "lora/commands.hpp"

namespace lora {
namespace {

namespace fs = std::filesystem;

const char* const kSmallConfig = R"(task_length = 3
train_examples = 64
eval_examples = 32
n_layers = 1
d_model = 16
n_heads = 2
vocab_size = 16
max_seq_len = 16
epochs = 1
batch_size = 16
)";

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("lora_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    write("small.cfg", kSmallConfig);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& f) const { return (dir / f).string(); }

  void write(const std::string& f, const std::string& text) const {
    std::ofstream(path(f)) << text;
  }

  std::string read(const std::string& f) const {
    std::ifstream in(path(f), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  int run(const std::string& args) const {
    const std::string cmd = std::string(LORA_CLI_PATH) + " " + args + " > " + path("stdout.txt") +
                            " 2> " + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string cfg() const { return "--config " + path("small.cfg"); }
};

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  write("bad.cfg", "learning_rate = 1\n");
  EXPECT_EQ(run("--config " + path("bad.cfg") + " pretrain"), kExitConfig);
  EXPECT_NE(read("stderr.txt").find("learning_rate"), std::string::npos);
  EXPECT_EQ(run("budget gpt9"), kExitConfig);
  EXPECT_EQ(run("budget gpt3-175b lora:r=2:xyz"), kExitConfig);
  EXPECT_EQ(run("--no-such-flag budget"), kExitConfig);
  EXPECT_EQ(run(""), kExitConfig);
  EXPECT_EQ(run("--config " + path("missing.cfg") + " pretrain"), kExitConfig);
  EXPECT_EQ(run("merge " + path("a") + " " + path("b") + " " + path("c")), kExitConfig);
  EXPECT_EQ(run(cfg() + " adapt"), kExitConfig);
  EXPECT_EQ(run("bench --trials 10 --points 1x4"), kExitConfig);
  EXPECT_EQ(run("bench --points 1by4"), kExitConfig);
  EXPECT_EQ(run("analyze --mode nope x"), kExitConfig);
}

TEST_F(Cli, DivergenceExitsWithThree) {
  write("wild.cfg", std::string(kSmallConfig) + "lr = 1e300\neps = 1e-300\n");
  EXPECT_EQ(run("--config " + path("wild.cfg") + " --out " + path("o") + " pretrain"), kExitNumeric);
  EXPECT_NE(read("stderr.txt").find("diverged"), std::string::npos);
}

TEST_F(Cli, BudgetPrintsPublishedCount) {
  EXPECT_EQ(run("--out " + path("b") + " budget gpt3-175b lora:r=8:qv"), kExitOk);
  const std::string out = read("stdout.txt");
  EXPECT_NE(out.find("37748736"), std::string::npos) << out;
  EXPECT_NE(out.find("37.7M"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(path("b/budget.csv")));
  EXPECT_EQ(run("budget roberta-base lora:r=8:qv"), kExitOk);
  EXPECT_NE(read("stdout.txt").find("294912"), std::string::npos);
}

TEST_F(Cli, PipelineIsDeterministicByteForByte) {
  for (const char* o : {"r1", "r2"}) {
    const std::string out = " --out " + path(o);
    ASSERT_EQ(run(cfg() + out + " pretrain"), kExitOk) << read("stderr.txt");
    const std::string base = path(std::string(o) + "/base.ckpt");
    ASSERT_EQ(run(cfg() + out + " adapt --base " + base + " --name a"), kExitOk) << read("stderr.txt");
    ASSERT_EQ(run(cfg() + out + " --seed 5 adapt --base " + base + " --name b"), kExitOk);
    ASSERT_EQ(run(cfg() + out + " adapt --base " + base + " --strategy adapter-h:r=2 --name h"),
              kExitOk);
    const std::string a = path(std::string(o) + "/a.ckpt"), b = path(std::string(o) + "/b.ckpt");
    ASSERT_EQ(run("merge " + base + " " + a + " " + path(std::string(o) + "/m.ckpt")), kExitOk);
    ASSERT_EQ(run("switch " + base + " " + a + " " + b + " " + path(std::string(o) + "/s.ckpt")),
              kExitOk);
    ASSERT_EQ(run(out + "/an analyze --mode seedpair " + a + " " + b), kExitOk);
    ASSERT_EQ(run(out + "/an analyze --mode projection " + base + " " + a + " --ranks 1,2"), kExitOk);
    ASSERT_EQ(run(out + "/an analyze --mode subspace " + a + " " + b), kExitOk);
  }
  for (const char* f : {"base.ckpt", "a.ckpt", "b.ckpt", "h.ckpt", "m.ckpt", "s.ckpt",
                        "a_summary.csv", "an/seedpair_summary.csv", "an/projection_L0_W_q.csv",
                        "an/subspace_L0_W_v.pgm"}) {
    const std::string x = read(std::string("r1/") + f), y = read(std::string("r2/") + f);
    EXPECT_FALSE(x.empty()) << f;
    EXPECT_EQ(x, y) << f;
  }
  EXPECT_NE(read("r1/a.ckpt"), read("r1/b.ckpt"));
}

TEST_F(Cli, CheckpointKindsFollowTheStrategy) {
  const std::string out = " --out " + path("o");
  ASSERT_EQ(run(cfg() + out + " pretrain"), kExitOk);
  ASSERT_EQ(run(cfg() + out + " adapt --base " + path("o/base.ckpt") + " --name lora"), kExitOk);
  ASSERT_EQ(run(cfg() + out + " adapt --base " + path("o/base.ckpt") +
                " --strategy lora:r=2:qv:bias --name biased"),
            kExitOk);
  EXPECT_EQ(read_checkpoint(path("o/lora.ckpt")).kind, CheckpointKind::kLoraDelta);
  EXPECT_EQ(read_checkpoint(path("o/biased.ckpt")).kind, CheckpointKind::kFullModel);
  EXPECT_LT(fs::file_size(path("o/lora.ckpt")), fs::file_size(path("o/base.ckpt")) / 10);
}

TEST_F(Cli, EvalMergedAndUnmergedAgree) {
  const std::string out = " --out " + path("o");
  ASSERT_EQ(run(cfg() + out + " pretrain"), kExitOk);
  ASSERT_EQ(run(cfg() + out + " adapt --base " + path("o/base.ckpt") + " --name a"), kExitOk);
  GlobalOptions g;
  g.config_path = path("small.cfg");
  const EvalResult un = cmd_eval(g, path("o/base.ckpt"), path("o/a.ckpt"), false);
  const EvalResult me = cmd_eval(g, path("o/base.ckpt"), path("o/a.ckpt"), true);
  EXPECT_NEAR(un.loss, me.loss, 1e-9);
  ASSERT_EQ(run("merge " + path("o/base.ckpt") + " " + path("o/a.ckpt") + " " + path("o/m.ckpt")),
            kExitOk);
  EXPECT_NEAR(cmd_eval(g, path("o/m.ckpt"), "", false).loss, un.loss, 1e-9);
  EXPECT_EQ(run(cfg() + " eval --model " + path("o/m.ckpt")), kExitOk);
  EXPECT_NE(read("stdout.txt").find("eval: loss"), std::string::npos);
}

TEST_F(Cli, RankSweepWritesGrid) {
  const std::string out = " --out " + path("o");
  ASSERT_EQ(run(cfg() + out + " pretrain"), kExitOk);
  ASSERT_EQ(run(cfg() + out + " --threads 2 ranksweep --base " + path("o/base.ckpt") +
                " --ranks 1,2 --targets q,qv"),
            kExitOk)
      << read("stderr.txt");
  const std::string grid = read("o/ranksweep_grid.csv");
  EXPECT_EQ(grid.substr(0, grid.find('\n')), "targets,r=1,r=2");
  EXPECT_EQ(std::count(grid.begin(), grid.end(), '\n'), 3);
}

}  // namespace
}  // namespace lora
