#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lora/bench.hpp"
#include "lora/commands.hpp"
#include "lora/errors.hpp"
#include "lora/model_config.hpp"
#include "lora/run_config.hpp"

namespace {

// "1x128,32x4" -> {(1,128), (32,4)}
std::vector<std::pair<std::size_t, std::size_t>> parse_points(const std::vector<std::string>& items) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& item : items) {
    const auto x = item.find('x');
    std::size_t used_b = 0, used_s = 0;
    try {
      if (x == std::string::npos) throw std::invalid_argument(item);
      const std::string b = item.substr(0, x), s = item.substr(x + 1);
      const unsigned long batch = std::stoul(b, &used_b);
      const unsigned long seq = std::stoul(s, &used_s);
      if (used_b != b.size() || used_s != s.size()) throw std::invalid_argument(item);
      out.emplace_back(batch, seq);
    } catch (const std::logic_error&) {
      throw lora::ConfigError("bench: point '" + item + "' is not BATCHxSEQ");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  lora::tune_allocator();
  CLI::App app{"Low-rank adaptation toolkit for a toy Transformer"};
  app.require_subcommand(1);

  lora::GlobalOptions g;
  g.log = &std::cout;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--config", g.config_path, "key = value run configuration")
      ->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Overrides the configured seed");
  auto* out_opt = app.add_option("--out", out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads for parallel sweeps")
      ->check(CLI::PositiveNumber);

  auto* pretrain = app.add_subcommand("pretrain", "Pre-train the base model on the copy corpus");

  lora::AdaptOverrides adapt_o;
  auto* adapt = app.add_subcommand("adapt", "Adapt a base checkpoint to a downstream task");
  adapt->add_option("--base", adapt_o.base, "Base full_model checkpoint");
  adapt->add_option("--strategy", adapt_o.strategy, "e.g. lora:r=4:qv, adapter-h:r=8, ft");
  adapt->add_option("--name", adapt_o.name, "Output file stem")->capture_default_str();

  std::string eval_model, eval_delta;
  bool eval_merge = false;
  auto* eval = app.add_subcommand("eval", "Held-out loss and accuracy of a checkpoint");
  eval->add_option("--model", eval_model, "full_model checkpoint (defaults to 'base')");
  eval->add_option("--delta", eval_delta, "lora_delta checkpoint applied on top");
  eval->add_flag("--merge", eval_merge, "Merge the delta before evaluating");

  std::string merge_base, merge_delta, merge_out;
  auto* merge = app.add_subcommand("merge", "Fold a LoRA delta into the base weights");
  merge->add_option("base", merge_base)->required();
  merge->add_option("delta", merge_delta)->required();
  merge->add_option("output", merge_out)->required();

  std::string sw_base, sw_old, sw_new, sw_out;
  auto* sw = app.add_subcommand("switch", "Swap one merged LoRA delta for another");
  sw->add_option("base", sw_base, "Unadapted base checkpoint")->required();
  sw->add_option("old", sw_old, "Delta currently merged")->required();
  sw->add_option("new", sw_new, "Delta to merge instead")->required();
  sw->add_option("output", sw_out)->required();

  lora::AnalyzeOptions an_o;
  std::string an_mode = "subspace";
  auto* analyze = app.add_subcommand("analyze", "Subspace, seed-pair and projection studies");
  analyze->add_option("--mode", an_mode, "subspace | seedpair | projection | ranksweep")
      ->capture_default_str();
  analyze->add_option("inputs", an_o.inputs, "Checkpoints")->required();
  analyze->add_option("--ranks", an_o.ranks, "Projection ranks or sweep ranks")->delimiter(',');
  analyze->add_option("--targets", an_o.target_variants, "Sweep target sets, e.g. q,v,qv")
      ->delimiter(',');
  analyze->add_option("--draws", an_o.baseline_draws, "Random baseline draws")
      ->capture_default_str();

  std::string budget_preset = "gpt3-175b";
  std::vector<std::string> budget_strategies;
  auto* budget = app.add_subcommand("budget", "Trainable parameters and checkpoint sizes");
  budget->add_option("preset", budget_preset, "Model preset")->capture_default_str();
  budget->add_option("strategies", budget_strategies, "Strategies (defaults to a standard set)");

  lora::BenchOptions bench_o;
  std::string bench_model = "bench";
  std::vector<std::string> bench_points{"1x128", "1x1", "32x1"};
  std::vector<std::string> bench_variants;
  auto* bench = app.add_subcommand("bench", "Forward latency against the base model");
  bench->add_option("--model", bench_model, "Model preset")->capture_default_str();
  bench->add_option("--points", bench_points, "BATCHxSEQ grid points")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--variants", bench_variants,
                    "lora_merged, lora_unmerged, adapter_H, adapter_L")
      ->delimiter(',');
  bench->add_option("--sizes", bench_o.sizes, "Adapter bottleneck / LoRA rank")
      ->delimiter(',');
  bench->add_option("--trials", bench_o.trials, "Timed trials per variant")
      ->capture_default_str();
  bench->add_option("--warmup", bench_o.warmup, "Untimed passes")->capture_default_str();

  std::vector<std::size_t> sweep_ranks;
  std::vector<std::string> sweep_targets;
  std::string sweep_base;
  auto* sweep = app.add_subcommand("ranksweep", "Validation loss across ranks and target sets");
  sweep->add_option("--base", sweep_base, "Base full_model checkpoint");
  sweep->add_option("--ranks", sweep_ranks, "Ranks")->delimiter(',');
  sweep->add_option("--targets", sweep_targets, "Target sets, e.g. q,v,qv,qkvo")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? lora::kExitOk : lora::kExitConfig;
  }
  if (*seed_opt) g.seed = seed;
  if (*out_opt) g.out_dir = out;

  try {
    if (*pretrain) {
      lora::cmd_pretrain(g);
    } else if (*adapt) {
      lora::cmd_adapt(g, adapt_o);
    } else if (*eval) {
      lora::cmd_eval(g, eval_model, eval_delta, eval_merge);
    } else if (*merge) {
      lora::cmd_merge(merge_base, merge_delta, merge_out);
      std::cout << "wrote " << merge_out << "\n";
    } else if (*sw) {
      lora::cmd_switch(sw_base, sw_old, sw_new, sw_out);
      std::cout << "wrote " << sw_out << "\n";
    } else if (*analyze) {
      an_o.mode = lora::parse_analyze_mode(an_mode);
      lora::cmd_analyze(g, an_o);
    } else if (*budget) {
      std::cout << lora::cmd_budget(g, budget_preset, budget_strategies);
    } else if (*bench) {
      bench_o.config = lora::preset(bench_model);
      bench_o.points = parse_points(bench_points);
      if (!bench_variants.empty()) {
        bench_o.variants.clear();
        for (const auto& v : bench_variants) bench_o.variants.push_back(lora::parse_variant(v));
      }
      if (g.seed) bench_o.seed = *g.seed;
      return lora::cmd_bench(g, bench_o);
    } else if (*sweep) {
      lora::RunConfig cfg = lora::resolve_config(g, lora::RunPurpose::kAdapt);
      an_o.mode = lora::AnalyzeMode::kRankSweep;
      an_o.inputs = {sweep_base.empty() ? cfg.base : sweep_base};
      if (an_o.inputs[0].empty()) throw lora::ConfigError("ranksweep: no base checkpoint");
      an_o.ranks = sweep_ranks;
      an_o.target_variants = sweep_targets;
      lora::cmd_analyze(g, an_o);
    }
  } catch (...) {
    return lora::exit_code_for_current_exception(std::cerr);
  }
  return lora::kExitOk;
}
