#include "lora/commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "lora/analysis.hpp"
#include "lora/budget.hpp"
#include "lora/errors.hpp"

namespace lora {
namespace {

namespace fs = std::filesystem;

std::ostream& log_of(const GlobalOptions& g) {
  static std::ostream null(nullptr);
  return g.log != nullptr ? *g.log : null;
}

std::string out_path(const std::string& dir, const std::string& file) {
  fs::create_directories(dir);
  return (fs::path(dir) / file).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
  if (!f) throw ConfigError("write failed for '" + path + "'");
}

const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys = {"model",    "n_layers",   "d_model",    "n_heads",
                                             "d_ffn",    "vocab_size", "max_seq_len"};
  return keys;
}

// A loaded checkpoint decides the architecture; explicit model keys must agree.
void adopt_model_config(RunConfig& cfg, const ModelConfig& actual) {
  for (const auto& k : model_keys()) {
    if (cfg.has(k) && cfg.model_config != actual) {
      throw ConfigError("config: model keys describe a different architecture than the checkpoint");
    }
  }
  cfg.model_config = actual;
  cfg.strategy.validate(actual);
}

Checkpoint read_kind(const std::string& path, CheckpointKind kind) {
  Checkpoint c = read_checkpoint(path);
  if (c.kind != kind) {
    throw ConfigError("'" + path + "' is a " + checkpoint_kind_name(c.kind) + " checkpoint, expected " +
                      checkpoint_kind_name(kind));
  }
  return c;
}

std::string module_label(const LoraModule& m) {
  return "L" + std::to_string(m.target.layer) + "_" + weight_name(m.target.weight);
}

std::vector<std::string> write_grid(const std::string& dir, const std::string& stem,
                                    const Matrix& grid) {
  const std::string csv = out_path(dir, stem + ".csv");
  const std::string pgm = out_path(dir, stem + ".pgm");
  write_text(csv, grid_csv(grid));
  write_text(pgm, grid_pgm(grid));
  return {csv, pgm};
}

std::vector<AttnWeight> parse_letters(const std::string& letters) {
  std::vector<AttnWeight> out;
  for (char ch : letters) out.push_back(parse_weight(std::string(1, ch)));
  if (out.empty()) throw ConfigError("empty target set");
  return out;
}

}  // namespace

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const TrainingError& e) {
    err << "training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const BenchmarkError& e) {
    err << "benchmark error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitFailure;
  }
}

RunConfig resolve_config(const GlobalOptions& g, RunPurpose purpose) {
  RunConfig c = g.config_path.empty() ? parse_run_config("", purpose)
                                      : load_run_config(g.config_path, purpose);
  if (g.seed) {
    c.seed = *g.seed;
    c.hyper.seed = *g.seed;
  }
  if (g.out_dir) c.out_dir = *g.out_dir;
  return c;
}

std::string cmd_pretrain(const GlobalOptions& g) {
  const RunConfig cfg = resolve_config(g, RunPurpose::kPretrain);
  const TaskDataset train_set = cfg.train_set();
  train_set.validate(cfg.model_config);
  auto& log = log_of(g);
  log << "pretrain: " << cfg.task << " length " << cfg.task_length << ", "
      << cfg.train_examples << " examples, " << total_parameter_count(cfg.model_config)
      << " parameters\n";
  PretrainResult r = pretrain(cfg.model_config, train_set, cfg.hyper);
  const EvalResult ev = evaluate(r.model, cfg.eval_set());
  log << "pretrain: loss " << r.initial_loss << " -> " << r.metrics.back().loss
      << ", held-out loss " << ev.loss << " accuracy " << ev.accuracy << "\n";

  const std::string ckpt = out_path(cfg.out_dir, "base.ckpt");
  write_checkpoint(ckpt, full_model_checkpoint(r.model, nullptr, cfg.seed, cfg.dtype));
  write_text(out_path(cfg.out_dir, "pretrain_metrics.csv"), metrics_csv(r.metrics));
  log << "wrote " << ckpt << "\n";
  return ckpt;
}

std::string cmd_adapt(const GlobalOptions& g, const AdaptOverrides& o) {
  RunConfig cfg = resolve_config(g, RunPurpose::kAdapt);
  if (!o.strategy.empty()) {
    cfg.strategy = parse_strategy(o.strategy);
    // Keys left at their defaults follow the new strategy's defaults.
    const TrainHyper d = default_adapt_hyper(cfg.strategy);
    if (!cfg.has("lr")) cfg.hyper.adam.lr = d.adam.lr;
    if (!cfg.has("epochs")) cfg.hyper.epochs = d.epochs;
    if (!cfg.has("batch_size")) cfg.hyper.batch_size = d.batch_size;
    if (!cfg.has("warmup_steps")) cfg.hyper.warmup_steps = d.warmup_steps;
  }
  const std::string base = o.base.empty() ? cfg.base : o.base;
  if (base.empty()) throw ConfigError("adapt: no base checkpoint (set 'base' or pass --base)");
  const Checkpoint base_ckpt = read_kind(base, CheckpointKind::kFullModel);
  adopt_model_config(cfg, base_ckpt.model_config);
  TransformerModel model = model_from_checkpoint(base_ckpt);

  const TaskDataset train_set = cfg.train_set();
  const TaskDataset eval_set = cfg.eval_set();
  train_set.validate(cfg.model_config, cfg.strategy.reserved_slots());

  auto& log = log_of(g);
  const ParamBudget budget = count(cfg.model_config, cfg.strategy);
  log << "adapt: " << cfg.strategy.to_string() << " on " << cfg.task << ", lr "
      << cfg.hyper.adam.lr << ", " << cfg.hyper.epochs << " epochs\n";
  AdaptResult r = adapt(model, train_set, cfg.strategy, cfg.hyper);
  log << "adapt: trainable " << r.trainable_params << " (formula " << budget.trainable_params
      << "), optimizer state " << r.optimizer_state_scalars << "\n";
  if (r.trainable_params != budget.trainable_params) {
    throw ContractError("adapt: live trainable count " + std::to_string(r.trainable_params) +
                        " disagrees with the closed form " +
                        std::to_string(budget.trainable_params));
  }
  const EvalResult ev = evaluate(model, eval_set, &r.attachments);
  log << "adapt: train loss " << r.metrics.back().loss << ", held-out loss " << ev.loss
      << " accuracy " << ev.accuracy << "\n";

  const std::string ckpt = out_path(cfg.out_dir, o.name + ".ckpt");
  const StrategyKind kind = cfg.strategy.kind;
  if (kind == StrategyKind::kLora && !cfg.strategy.lora->train_bias) {
    write_checkpoint(ckpt, lora_delta_checkpoint(cfg.model_config, r.attachments, cfg.seed, cfg.dtype));
  } else {
    merge_all(model, r.attachments);
    write_checkpoint(ckpt, full_model_checkpoint(model, &r.attachments, cfg.seed, cfg.dtype));
  }
  std::ostringstream summary;
  summary << "strategy,trainable_params,formula_params,train_loss,eval_loss,eval_accuracy\n"
          << cfg.strategy.to_string() << "," << r.trainable_params << ","
          << budget.trainable_params << "," << std::setprecision(10) << r.metrics.back().loss
          << "," << ev.loss << "," << ev.accuracy << "\n";
  write_text(out_path(cfg.out_dir, o.name + "_metrics.csv"), metrics_csv(r.metrics));
  write_text(out_path(cfg.out_dir, o.name + "_summary.csv"), summary.str());
  log << "wrote " << ckpt << "\n";
  return ckpt;
}

EvalResult cmd_eval(const GlobalOptions& g, const std::string& model_path,
                    const std::string& delta_path, bool merge) {
  RunConfig cfg = resolve_config(g, RunPurpose::kAdapt);
  const std::string path = model_path.empty() ? cfg.base : model_path;
  if (path.empty()) throw ConfigError("eval: no model checkpoint (set 'base' or pass --model)");
  const Checkpoint ckpt = read_kind(path, CheckpointKind::kFullModel);
  cfg.strategy = ckpt.strategy;
  adopt_model_config(cfg, ckpt.model_config);
  TransformerModel model = model_from_checkpoint(ckpt);
  Attachments at = attachments_from_checkpoint(ckpt, model);

  if (!delta_path.empty()) {
    if (ckpt.strategy.uses_adapter() || ckpt.strategy.uses_prefix()) {
      throw ConfigError("eval: a LoRA delta cannot be stacked on an adapter or prefix model");
    }
    const Checkpoint delta = read_kind(delta_path, CheckpointKind::kLoraDelta);
    at = attachments_from_checkpoint(delta, model);
    if (merge) merge_all(model, at);
  }
  const TaskDataset eval_set = cfg.eval_set();
  eval_set.validate(cfg.model_config, at.strategy.reserved_slots());
  const EvalResult r = evaluate(model, eval_set, &at);
  log_of(g) << "eval: loss " << std::setprecision(10) << r.loss << " accuracy " << r.accuracy
            << "\n";
  return r;
}

void cmd_merge(const std::string& base, const std::string& delta, const std::string& out) {
  const Checkpoint base_ckpt = read_kind(base, CheckpointKind::kFullModel);
  const Checkpoint delta_ckpt = read_kind(delta, CheckpointKind::kLoraDelta);
  if (base_ckpt.strategy.kind != StrategyKind::kFullFineTune) {
    throw ConfigError("merge: '" + base + "' already carries a " + base_ckpt.strategy.to_string() +
                      " adaptation");
  }
  TransformerModel model = model_from_checkpoint(base_ckpt);
  Attachments at = attachments_from_checkpoint(delta_ckpt, model);
  merge_all(model, at);
  write_checkpoint(out, full_model_checkpoint(model, &at, delta_ckpt.seed, base_ckpt.dtype));
}

void cmd_switch(const std::string& base, const std::string& delta_old,
                const std::string& delta_new, const std::string& out) {
  const Checkpoint base_ckpt = read_kind(base, CheckpointKind::kFullModel);
  const Checkpoint old_ckpt = read_kind(delta_old, CheckpointKind::kLoraDelta);
  const Checkpoint new_ckpt = read_kind(delta_new, CheckpointKind::kLoraDelta);
  if (base_ckpt.strategy.kind != StrategyKind::kFullFineTune) {
    throw ConfigError("switch: '" + base + "' must be the unadapted base model");
  }
  TransformerModel model = model_from_checkpoint(base_ckpt);
  Attachments from = attachments_from_checkpoint(old_ckpt, model);
  Attachments to = attachments_from_checkpoint(new_ckpt, model);
  merge_all(model, from);
  switch_task(model, from, to);
  write_checkpoint(out, full_model_checkpoint(model, &to, new_ckpt.seed, base_ckpt.dtype));
}

AnalyzeMode parse_analyze_mode(const std::string& s) {
  if (s == "subspace") return AnalyzeMode::kSubspace;
  if (s == "seedpair") return AnalyzeMode::kSeedPair;
  if (s == "projection") return AnalyzeMode::kProjection;
  if (s == "ranksweep") return AnalyzeMode::kRankSweep;
  throw ConfigError("unknown analysis mode '" + s + "' (subspace, seedpair, projection, ranksweep)");
}

std::vector<std::string> cmd_analyze(const GlobalOptions& g, const AnalyzeOptions& o) {
  RunConfig cfg = resolve_config(g, RunPurpose::kAdapt);
  const std::string& dir = cfg.out_dir;
  auto& log = log_of(g);
  std::vector<std::string> written;
  auto need_inputs = [&](std::size_t n, const char* what) {
    if (o.inputs.size() != n) {
      throw ConfigError(std::string("analyze: expected ") + what);
    }
  };
  auto append = [&](const std::vector<std::string>& paths) {
    written.insert(written.end(), paths.begin(), paths.end());
  };

  switch (o.mode) {
    case AnalyzeMode::kSubspace: {
      need_inputs(2, "two lora_delta checkpoints");
      const Checkpoint ca = read_kind(o.inputs[0], CheckpointKind::kLoraDelta);
      const Checkpoint cb = read_kind(o.inputs[1], CheckpointKind::kLoraDelta);
      if (ca.model_config != cb.model_config) {
        throw ConfigError("analyze: the deltas belong to different architectures");
      }
      TransformerModel shape = TransformerModel::initialize(ca.model_config, 0);
      const Attachments a = attachments_from_checkpoint(ca, shape);
      const Attachments b = attachments_from_checkpoint(cb, shape);
      std::ostringstream summary;
      summary << "module,r_a,r_b,phi_1_1,phi_full\n";
      for (const LoraModule& ma : a.lora) {
        const LoraModule* mb = b.find_lora(ma.target.layer, ma.target.weight);
        if (mb == nullptr) continue;
        const SubspaceReport rep = subspace_report(ma.A, mb->A, ma.rank, mb->rank, "a", "b");
        append(write_grid(dir, "subspace_" + module_label(ma), rep.grid));
        summary << module_label(ma) << "," << ma.rank << "," << mb->rank << ","
                << rep.grid(0, 0) << "," << rep.grid(rep.i_max - 1, rep.j_max - 1) << "\n";
        log << module_label(ma) << ": phi(1,1) = " << rep.grid(0, 0) << "\n";
      }
      const std::string p = out_path(dir, "subspace_summary.csv");
      write_text(p, summary.str());
      written.push_back(p);
      break;
    }
    case AnalyzeMode::kSeedPair: {
      need_inputs(2, "two lora_delta checkpoints trained with different seeds");
      const Checkpoint ca = read_kind(o.inputs[0], CheckpointKind::kLoraDelta);
      const Checkpoint cb = read_kind(o.inputs[1], CheckpointKind::kLoraDelta);
      if (ca.model_config != cb.model_config) {
        throw ConfigError("analyze: the deltas belong to different architectures");
      }
      TransformerModel shape = TransformerModel::initialize(ca.model_config, 0);
      const Attachments a = attachments_from_checkpoint(ca, shape);
      const Attachments b = attachments_from_checkpoint(cb, shape);
      const auto entries = seed_pair_study(a, b, o.baseline_draws, cfg.seed);
      std::ostringstream summary;
      summary << "module,top1,baseline_p99,exceeds_baseline\n";
      for (const SeedPairEntry& e : entries) {
        std::string stem = e.target;
        for (char& ch : stem) {
          if (ch == '.') ch = '_';
        }
        append(write_grid(dir, "seedpair_" + stem, e.trained.grid));
        append(write_grid(dir, "seedpair_baseline_" + stem, e.baseline_mean.grid));
        summary << e.target << "," << e.top1 << "," << e.baseline_p99 << ","
                << (e.exceeds_baseline() ? 1 : 0) << "\n";
        log << e.target << ": top1 " << e.top1 << " vs random p99 " << e.baseline_p99 << "\n";
      }
      const std::string p = out_path(dir, "seedpair_summary.csv");
      write_text(p, summary.str());
      written.push_back(p);
      break;
    }
    case AnalyzeMode::kProjection: {
      need_inputs(2, "a full_model base checkpoint and a lora_delta checkpoint");
      const Checkpoint cbase = read_kind(o.inputs[0], CheckpointKind::kFullModel);
      const Checkpoint cdelta = read_kind(o.inputs[1], CheckpointKind::kLoraDelta);
      const TransformerModel model = model_from_checkpoint(cbase);
      const Attachments at = attachments_from_checkpoint(cdelta, model);
      for (const LoraModule& m : at.lora) {
        const Matrix& W = model.blocks[m.target.layer].attention_weight(m.target.weight);
        const Matrix dW = m.delta();
        std::vector<std::size_t> ranks = o.ranks.empty() ? std::vector<std::size_t>{m.rank} : o.ranks;
        std::vector<ProjectionReport> reps;
        for (std::size_t r : ranks) reps.push_back(projection_study(W, dW, r, cfg.seed));
        const std::string p = out_path(dir, "projection_" + module_label(m) + ".csv");
        write_text(p, projection_csv(reps));
        written.push_back(p);
        for (const auto& rep : reps) {
          log << module_label(m) << " r=" << rep.rank << ": amplification " << rep.amplification
              << "\n";
        }
        const std::size_t k = std::min<std::size_t>(m.rank, std::min(W.rows(), W.cols()));
        const SubspaceReport grid = weight_delta_report(W, dW, k, k);
        append(write_grid(dir, "weight_delta_" + module_label(m), grid.grid));
      }
      break;
    }
    case AnalyzeMode::kRankSweep: {
      need_inputs(1, "a full_model base checkpoint");
      const Checkpoint cbase = read_kind(o.inputs[0], CheckpointKind::kFullModel);
      adopt_model_config(cfg, cbase.model_config);
      const TransformerModel model = model_from_checkpoint(cbase);
      RankSweepOptions so;
      if (!o.ranks.empty()) so.ranks = o.ranks;
      if (!o.target_variants.empty()) {
        so.target_variants.clear();
        for (const auto& t : o.target_variants) so.target_variants.push_back(parse_letters(t));
      }
      so.hyper = cfg.hyper;
      so.workers = std::max<std::size_t>(1, g.threads);
      const TaskDataset train_set = cfg.train_set();
      const TaskDataset eval_set = cfg.eval_set();
      train_set.validate(cfg.model_config);
      const auto cells = rank_sweep(model, train_set, eval_set, so);
      for (const SweepCell& c : cells) {
        log << target_letters(c.targets) << " r=" << c.rank << ": eval loss " << c.eval_loss
            << "\n";
      }
      const std::string p1 = out_path(dir, "ranksweep.csv");
      const std::string p2 = out_path(dir, "ranksweep_grid.csv");
      write_text(p1, sweep_csv(cells));
      write_text(p2, sweep_grid_csv(cells));
      written.push_back(p1);
      written.push_back(p2);
      break;
    }
  }
  for (const auto& p : written) log << "wrote " << p << "\n";
  return written;
}

std::string cmd_budget(const GlobalOptions& g, const std::string& preset_name,
                       const std::vector<std::string>& strategies) {
  const ModelConfig config = preset(preset_name);
  std::vector<std::string> names = strategies;
  if (names.empty()) {
    names = {"ft",          "ft-top2",     "bitfit",      "pre-embed:lp=8:li=8",
             "pre-layer:lp=8:li=8", "adapter-h:r=8", "adapter-l:r=8",
             "lora:r=4:qv", "lora:r=8:qv"};
  }
  std::vector<AdaptationStrategy> parsed;
  for (const auto& n : names) parsed.push_back(parse_strategy(n));
  for (const auto& s : parsed) s.validate(config);
  if (g.out_dir) {
    const std::string p = out_path(*g.out_dir, "budget.csv");
    write_text(p, budget_table_csv(config, parsed));
  }
  return budget_table_text(config, parsed);
}

int cmd_bench(const GlobalOptions& g, const BenchOptions& options) {
  const std::string dir = g.out_dir.value_or("out");
  auto& log = log_of(g);
  const auto records = run_latency(options);
  const std::string csv = out_path(dir, "latency.csv");
  write_text(csv, latency_csv(records));
  for (BenchVariant v : options.variants) {
    for (std::size_t size : options.sizes) {
      write_text(out_path(dir, std::string("slowdown_") + variant_name(v) + "_" +
                                   std::to_string(size) + ".csv"),
                 slowdown_grid_csv(records, v, size));
    }
  }
  int code = kExitOk;
  for (const LatencyRecord& r : records) {
    log << std::left << std::setw(16) << variant_name(r.variant) << " batch " << std::setw(3)
        << r.batch << " seq " << std::setw(4) << r.seq_len << " size " << std::setw(3) << r.size
        << std::right << std::fixed << std::setprecision(3) << " mean " << r.mean_ms << " ms"
        << " median-of-means " << r.median_of_means_ms << " ms slowdown " << std::setprecision(2)
        << r.slowdown_pct << "%\n";
    log.unsetf(std::ios::fixed);
    if (r.variant == BenchVariant::kLoraMerged &&
        std::abs(r.slowdown_pct) > kMergedSlowdownBoundPct) {
      log << "merged LoRA exceeds the " << kMergedSlowdownBoundPct << "% bound at batch "
          << r.batch << " seq " << r.seq_len << "\n";
      code = kExitBenchBound;
    }
  }
  log << "wrote " << csv << "\n";
  return code;
}

}  // namespace lora
