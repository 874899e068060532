#include "lora/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lora/errors.hpp"

namespace lora {
namespace {

std::vector<int> random_content(std::size_t vocab, std::size_t length, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(kFirstContentToken, static_cast<int>(vocab) - 1);
  std::vector<int> out(length);
  for (int& t : out) t = dist(rng);
  return out;
}

void require_vocab(std::size_t vocab, std::size_t needed) {
  if (vocab < static_cast<std::size_t>(kFirstContentToken) + needed) {
    throw ConfigError("task: vocabulary of " + std::to_string(vocab) + " is too small");
  }
}

}  // namespace

std::size_t TaskDataset::context_len() const {
  return pairs.empty() ? 0 : pairs.front().context.size();
}

std::size_t TaskDataset::target_len() const {
  return pairs.empty() ? 0 : pairs.front().target.size();
}

void TaskDataset::validate(const ModelConfig& config, std::size_t reserved_slots) const {
  if (pairs.empty()) throw ConfigError("dataset '" + name + "' is empty");
  const std::size_t c = context_len();
  const std::size_t t = target_len();
  if (c == 0 || t == 0) throw ConfigError("dataset '" + name + "': empty context or target");
  if (reserved_slots >= config.max_seq_len || c + t > config.max_seq_len - reserved_slots) {
    throw ConfigError("dataset '" + name + "': sequence length " + std::to_string(c + t) +
                      " exceeds the usable length " +
                      std::to_string(config.max_seq_len > reserved_slots
                                         ? config.max_seq_len - reserved_slots
                                         : 0));
  }
  for (const TaskExample& ex : pairs) {
    if (ex.context.size() != c || ex.target.size() != t) {
      throw ConfigError("dataset '" + name + "': ragged pairs");
    }
    for (const auto* part : {&ex.context, &ex.target})
      for (int tok : *part)
        if (tok < 0 || static_cast<std::size_t>(tok) >= config.vocab_size)
          throw ConfigError("dataset '" + name + "': token " + std::to_string(tok) +
                            " outside vocabulary");
  }
}

Batch TaskDataset::batch(std::span<const std::size_t> indices) const {
  Batch b;
  b.batch_size = indices.size();
  b.context_len = context_len();
  b.seq_len = seq_len();
  b.tokens.reserve(b.batch_size * b.seq_len);
  for (std::size_t i : indices) {
    const TaskExample& ex = pairs.at(i);
    b.tokens.insert(b.tokens.end(), ex.context.begin(), ex.context.end());
    b.tokens.insert(b.tokens.end(), ex.target.begin(), ex.target.end());
  }
  return b;
}

TaskDataset copy_corpus(std::size_t vocab, std::size_t length, std::size_t count,
                        std::uint64_t seed) {
  require_vocab(vocab, 2);
  std::mt19937_64 rng(seed);
  TaskDataset ds{"copy", {}};
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> x = random_content(vocab, length, rng);
    TaskExample ex{x, x};
    ex.context.push_back(kSeparator);
    ds.pairs.push_back(std::move(ex));
  }
  return ds;
}

TaskDataset reverse_task(std::size_t vocab, std::size_t length, std::size_t count,
                         std::uint64_t seed, double label_noise) {
  require_vocab(vocab, 2);
  if (!(label_noise >= 0.0 && label_noise < 1.0)) {
    throw ConfigError("reverse task: label noise must lie in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(label_noise);
  std::uniform_int_distribution<int> any(kFirstContentToken, static_cast<int>(vocab) - 1);
  TaskDataset ds{"reverse", {}};
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> x = random_content(vocab, length, rng);
    TaskExample ex{x, std::vector<int>(x.rbegin(), x.rend())};
    // Noisy labels give the task an entropy floor, so relative loss gaps stay meaningful.
    if (label_noise > 0.0)
      for (int& t : ex.target)
        if (flip(rng)) t = any(rng);
    ex.context.push_back(kSeparator);
    ds.pairs.push_back(std::move(ex));
  }
  return ds;
}

TaskDataset kv_lookup_task(std::size_t vocab, std::size_t pairs, std::size_t count,
                           std::uint64_t seed) {
  require_vocab(vocab, pairs + 1);
  std::mt19937_64 rng(seed);
  std::vector<int> pool(vocab - kFirstContentToken);
  std::iota(pool.begin(), pool.end(), kFirstContentToken);
  std::uniform_int_distribution<int> value_dist(kFirstContentToken, static_cast<int>(vocab) - 1);
  std::uniform_int_distribution<std::size_t> pick(0, pairs - 1);
  TaskDataset ds{"kv", {}};
  for (std::size_t i = 0; i < count; ++i) {
    std::shuffle(pool.begin(), pool.end(), rng);
    TaskExample ex;
    std::vector<int> values(pairs);
    for (std::size_t p = 0; p < pairs; ++p) {
      values[p] = value_dist(rng);
      ex.context.push_back(pool[p]);
      ex.context.push_back(values[p]);
    }
    const std::size_t q = pick(rng);
    ex.context.push_back(kSeparator);
    ex.context.push_back(kQuery);
    ex.context.push_back(pool[q]);
    ex.target.push_back(values[q]);
    ds.pairs.push_back(std::move(ex));
  }
  return ds;
}

TaskDataset make_task(const std::string& name, std::size_t vocab, std::size_t length,
                      std::size_t count, std::uint64_t seed, double label_noise) {
  if (name == "copy") return copy_corpus(vocab, length, count, seed);
  if (name == "reverse") return reverse_task(vocab, length, count, seed, label_noise);
  if (name == "kv") return kv_lookup_task(vocab, length, count, seed);
  throw ConfigError("unknown task '" + name + "'");
}

double label_noise_floor(std::size_t vocab, double label_noise) {
  const double k = static_cast<double>(vocab - kFirstContentToken);
  const double hit = 1.0 - label_noise + label_noise / k;
  const double miss = label_noise / k;
  double h = -hit * std::log(hit);
  if (miss > 0.0) h -= (k - 1.0) * miss * std::log(miss);
  return h;
}

}  // namespace lora
