#include "lora/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "lora/errors.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif
#ifdef __linux__
#include <pthread.h>
#include <sched.h>
#endif

namespace lora {

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}
namespace {

using Clock = std::chrono::steady_clock;

constexpr std::size_t kMinTrials = 100;
constexpr std::size_t kMeanBlocks = 10;

// Keep the measuring thread on the core it started on.
void pin_current_thread() {
#ifdef __linux__
  const int cpu = sched_getcpu();
  if (cpu < 0) return;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  pthread_setaffinity_np(pthread_self(), sizeof set, &set);
#endif
}

double clock_resolution_ms() {
  double best = 1e9;
  for (int i = 0; i < 64; ++i) {
    const auto t0 = Clock::now();
    auto t1 = Clock::now();
    while (t1 == t0) t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LatencyRecord summarize(BenchVariant variant, std::size_t batch, std::size_t seq,
                        std::size_t size, const std::vector<double>& ms) {
  LatencyRecord r{variant, batch, seq, size, ms.size()};
  const double n = static_cast<double>(ms.size());
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : ms) ss += (x - r.mean_ms) * (x - r.mean_ms);
  r.std_ms = ms.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  std::vector<double> means;
  const std::size_t block = ms.size() / kMeanBlocks;
  for (std::size_t b = 0; b < kMeanBlocks; ++b) {
    const auto first = ms.begin() + static_cast<std::ptrdiff_t>(b * block);
    const auto last = b + 1 == kMeanBlocks ? ms.end() : first + static_cast<std::ptrdiff_t>(block);
    means.push_back(std::accumulate(first, last, 0.0) / static_cast<double>(last - first));
  }
  r.median_of_means_ms = median(means);
  return r;
}

Batch random_batch(const ModelConfig& c, std::size_t batch, std::size_t seq, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  Batch b{batch, seq, seq, std::vector<int>(batch * seq)};
  for (int& t : b.tokens) t = tok(rng);
  return b;
}

// All variants run on the same base buffers. A merged variant differs only
// in the values copied into the host weights before each of its passes, so
// memory placement cannot masquerade as latency.
struct Subject {
  BenchVariant variant;
  std::size_t size;
  Attachments attachments;
  std::vector<Matrix> hosts;  // merged host values; empty means pristine
  std::vector<double> ms;
};

}  // namespace

const char* variant_name(BenchVariant v) {
  switch (v) {
    case BenchVariant::kBase: return "base";
    case BenchVariant::kLoraMerged: return "lora_merged";
    case BenchVariant::kLoraUnmerged: return "lora_unmerged";
    case BenchVariant::kAdapterH: return "adapter_H";
    case BenchVariant::kAdapterL: return "adapter_L";
  }
  return "?";
}

BenchVariant parse_variant(const std::string& name) {
  for (BenchVariant v : {BenchVariant::kBase, BenchVariant::kLoraMerged,
                         BenchVariant::kLoraUnmerged, BenchVariant::kAdapterH,
                         BenchVariant::kAdapterL}) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown bench variant '" + name + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> grid_points(
    const std::vector<std::size_t>& batches, const std::vector<std::size_t>& seq_lens) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b : batches)
    for (std::size_t s : seq_lens) out.emplace_back(b, s);
  return out;
}

Attachments make_variant(TransformerModel& model, BenchVariant variant, std::size_t size,
                         std::uint64_t seed) {
  const std::vector<AttnWeight> qv{AttnWeight::kQuery, AttnWeight::kValue};
  switch (variant) {
    case BenchVariant::kBase: {
      Attachments none;
      none.strategy = AdaptationStrategy::full_fine_tune();
      return none;
    }
    case BenchVariant::kLoraMerged:
    case BenchVariant::kLoraUnmerged: {
      Attachments at = attach_strategy(model, AdaptationStrategy::low_rank(size, qv), seed);
      // A nonzero B so the merge really changes the host weights.
      std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
      for (LoraModule& m : at.lora) m.B = Matrix::gaussian(m.B.rows(), m.B.cols(), 0.01, rng);
      if (variant == BenchVariant::kLoraMerged) merge_all(model, at);
      return at;
    }
    case BenchVariant::kAdapterH:
      return attach_strategy(model, AdaptationStrategy::adapter_h(size), seed);
    case BenchVariant::kAdapterL:
      return attach_strategy(model, AdaptationStrategy::adapter_l(size), seed);
  }
  throw ConfigError("bench: unhandled variant");
}

std::vector<LatencyRecord> run_latency(const BenchOptions& options) {
  if (options.config.n_layers == 0) {
    throw BenchmarkError("bench: the model has no layers, so there is nothing to time");
  }
  options.config.validate();
  if (options.trials < kMinTrials) {
    throw BenchmarkError("bench: at least " + std::to_string(kMinTrials) + " trials are required");
  }
  if (options.points.empty()) throw BenchmarkError("bench: empty grid");
  pin_current_thread();
  const double resolution = clock_resolution_ms();

  TransformerModel base = TransformerModel::initialize(options.config, options.seed);
  std::vector<Matrix*> slots;
  for (BlockWeights& blk : base.blocks) {
    slots.push_back(&blk.attention_weight(AttnWeight::kQuery));
    slots.push_back(&blk.attention_weight(AttnWeight::kValue));
  }
  std::vector<Matrix> pristine;
  for (const Matrix* m : slots) pristine.push_back(*m);

  std::vector<Subject> subjects;
  subjects.push_back({BenchVariant::kBase, 0, make_variant(base, BenchVariant::kBase, 0, 0), {}, {}});
  for (std::size_t size : options.sizes) {
    for (BenchVariant v : options.variants) {
      if (v == BenchVariant::kBase) continue;
      Subject s{v, size, {}, {}, {}};
      if (v == BenchVariant::kLoraMerged) {
        TransformerModel merged = base;
        s.attachments = make_variant(merged, v, size, options.seed + size);
        for (BlockWeights& blk : merged.blocks) {
          s.hosts.push_back(std::move(blk.attention_weight(AttnWeight::kQuery)));
          s.hosts.push_back(std::move(blk.attention_weight(AttnWeight::kValue)));
        }
      } else {
        s.attachments = make_variant(base, v, size, options.seed + size);
      }
      subjects.push_back(std::move(s));
    }
  }
  // Untimed, and done identically before every pass of every subject.
  auto load = [&](const Subject& s) {
    const std::vector<Matrix>& src = s.hosts.empty() ? pristine : s.hosts;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      std::copy_n(src[i].data(), src[i].size(), slots[i]->data());
    }
  };

  std::mt19937_64 rng(options.seed);
  std::vector<LatencyRecord> out;
  for (const auto& [batch, seq] : options.points) {
    const Batch input = random_batch(options.config, batch, seq, rng);
    for (Subject& s : subjects) {
      s.ms.clear();
      for (std::size_t w = 0; w < options.warmup; ++w) {
        load(s);
        logits(base, input, &s.attachments);
      }
    }
    for (std::size_t t = 0; t < options.trials; ++t) {
      // Rotate the starting subject so no variant always runs first.
      for (std::size_t k = 0; k < subjects.size(); ++k) {
        Subject& s = subjects[(k + t) % subjects.size()];
        load(s);
        const auto t0 = Clock::now();
        const Matrix z = logits(base, input, &s.attachments);
        const auto t1 = Clock::now();
        if (z.empty()) throw BenchmarkError("bench: empty output");
        s.ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
    }
    const LatencyRecord base_rec = summarize(BenchVariant::kBase, batch, seq, 0, subjects[0].ms);
    if (base_rec.median_of_means_ms < 100.0 * resolution) {
      throw BenchmarkError("bench: a forward pass takes " + std::to_string(base_rec.mean_ms) +
                           " ms, too close to the clock resolution of " +
                           std::to_string(resolution) +
                           " ms; use a larger model, batch or sequence length");
    }
    for (const Subject& s : subjects) {
      LatencyRecord r = summarize(s.variant, batch, seq, s.size, s.ms);
      // Paired against the base pass of the same round, so drift cancels.
      std::vector<double> ratios(options.trials);
      for (std::size_t t = 0; t < options.trials; ++t) ratios[t] = s.ms[t] / subjects[0].ms[t];
      r.slowdown_pct = 100.0 * (median(ratios) - 1.0);
      out.push_back(r);
    }
  }
  return out;
}

std::string latency_csv(const std::vector<LatencyRecord>& records) {
  std::ostringstream os;
  os.precision(8);
  os << "variant,batch,seq_len,size,trials,mean_ms,std_ms,slowdown_pct,median_of_means_ms\n";
  for (const LatencyRecord& r : records)
    os << variant_name(r.variant) << ',' << r.batch << ',' << r.seq_len << ',' << r.size << ','
       << r.trials << ',' << r.mean_ms << ',' << r.std_ms << ',' << r.slowdown_pct << ','
       << r.median_of_means_ms << '\n';
  return os.str();
}

std::string slowdown_grid_csv(const std::vector<LatencyRecord>& records, BenchVariant variant,
                              std::size_t size) {
  std::set<std::size_t> batches;
  std::set<std::size_t> seqs;
  std::map<std::pair<std::size_t, std::size_t>, double> cell;
  for (const LatencyRecord& r : records) {
    if (r.variant != variant || r.size != size) continue;
    batches.insert(r.batch);
    seqs.insert(r.seq_len);
    cell[{r.batch, r.seq_len}] = r.slowdown_pct;
  }
  std::ostringstream os;
  os.precision(4);
  os << "batch\\seq_len";
  for (std::size_t s : seqs) os << ',' << s;
  os << '\n';
  for (std::size_t b : batches) {
    os << b;
    for (std::size_t s : seqs) {
      os << ',';
      if (auto it = cell.find({b, s}); it != cell.end()) os << it->second;
    }
    os << '\n';
  }
  return os.str();
}

std::size_t OpProfile::matmuls() const {
  return counts[static_cast<std::size_t>(OpKind::kMatMul)] +
         counts[static_cast<std::size_t>(OpKind::kMatMulNT)];
}

OpProfile op_profile(const TransformerModel& model, const Batch& batch,
                     const Attachments* attachments) {
  Tape tape;
  ForwardOptions opt;
  opt.attachments = attachments;
  forward(tape, model, batch, opt);
  OpProfile p;
  for (std::size_t k = 0; k < p.counts.size(); ++k) p.counts[k] = tape.count(static_cast<OpKind>(k));
  p.total = tape.node_count();
  return p;
}

ThroughputResult throughput_probe(const TransformerModel& model, const TaskDataset& dataset,
                                  const AdaptationStrategy& strategy, std::size_t steps,
                                  const TrainHyper& hyper) {
  if (steps == 0) throw BenchmarkError("throughput probe: zero steps requested");
  if (dataset.pairs.empty() || hyper.batch_size == 0) {
    throw BenchmarkError("throughput probe: empty dataset or batch");
  }
  TransformerModel copy = model;
  Attachments at = attach_strategy(copy, strategy, hyper.seed);
  TrainHyper h = hyper;
  // Exactly `steps` batches in one epoch, cycling through the data if needed.
  TaskDataset subset{dataset.name, {}};
  const std::size_t want = steps * hyper.batch_size;
  for (std::size_t i = 0; i < want; ++i) subset.pairs.push_back(dataset.pairs[i % dataset.pairs.size()]);
  h.epochs = 1;

  ThroughputResult r;
  r.strategy = strategy;
  const auto t0 = Clock::now();
  train(copy, at, subset, h, nullptr, &r.gradient_scalars);
  const auto t1 = Clock::now();
  r.steps = steps;
  r.tokens = want * dataset.seq_len();
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  r.tokens_per_sec = r.seconds > 0.0 ? static_cast<double>(r.tokens) / r.seconds : 0.0;
  return r;
}

}  // namespace lora
