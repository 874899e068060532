#include "lora/forward.hpp"

#include <cmath>

#include "lora/errors.hpp"

namespace lora {
namespace {

class ForwardBuilder {
 public:
  ForwardBuilder(Tape& tape, const TransformerModel& model, const ForwardOptions& options)
      : tape_(tape), model_(model), opt_(options) {}

  Var param(const std::string& name, const Matrix& value) {
    const bool trainable = opt_.trainable != nullptr && opt_.trainable->count(name) > 0;
    return tape_.parameter(name, value, trainable);
  }

  Var linear(Var h, std::size_t layer, AttnWeight w) {
    const BlockWeights& blk = model_.blocks[layer];
    const std::string base = "blocks." + std::to_string(layer) + ".attn.";
    Var W = param(base + weight_name(w), blk.attention_weight(w));
    Var b = param(base + "b_" + weight_name(w)[2], blk.attention_bias(w));
    Var y = tape_.add_row(tape_.matmul_nt(h, W), b);
    if (opt_.attachments != nullptr) {
      const LoraModule* m = opt_.attachments->find_lora(layer, w);
      if (m != nullptr && !m->merged) {
        Var A = param(m->param_prefix() + ".A", m->A);
        Var B = param(m->param_prefix() + ".B", m->B);
        Var side = tape_.matmul_nt(tape_.matmul_nt(h, A), B);
        y = tape_.add(y, tape_.scale(side, m->scaling()));
      }
    }
    return y;
  }

  Var adapter(Var x, std::size_t layer, AdapterPlacement placement) {
    if (opt_.attachments == nullptr) return x;
    const AdapterModule* a = opt_.attachments->find_adapter(layer, placement);
    if (a == nullptr) return x;
    const std::string p = a->param_prefix();
    Var in = x;
    if (a->has_norm) {
      in = tape_.layer_norm(x, param(p + ".ln.gain", a->norm_gain),
                            param(p + ".ln.shift", a->norm_shift));
    }
    Var hidden = tape_.relu(
        tape_.add_row(tape_.matmul(in, param(p + ".W_down", a->W_down)), param(p + ".b_down", a->b_down)));
    Var up = tape_.add_row(tape_.matmul(hidden, param(p + ".W_up", a->W_up)),
                           param(p + ".b_up", a->b_up));
    return tape_.add(x, up);
  }

  Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t len) {
    const std::size_t heads = model_.config.n_heads;
    const std::size_t dh = model_.config.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> per_seq;
    per_seq.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      Var qb = tape_.slice_rows(q, b * len, len);
      Var kb = tape_.slice_rows(k, b * len, len);
      Var vb = tape_.slice_rows(v, b * len, len);
      std::vector<Var> per_head;
      per_head.reserve(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        Var qh = tape_.slice_cols(qb, h * dh, dh);
        Var kh = tape_.slice_cols(kb, h * dh, dh);
        Var vh = tape_.slice_cols(vb, h * dh, dh);
        Var p = tape_.causal_softmax(tape_.scale(tape_.matmul_nt(qh, kh), inv_sqrt));
        per_head.push_back(tape_.matmul(p, vh));
      }
      per_seq.push_back(tape_.concat_cols(per_head));
    }
    return tape_.concat_rows(per_seq);
  }

  Var block(Var x, std::size_t layer, std::size_t batch, std::size_t len) {
    const BlockWeights& blk = model_.blocks[layer];
    const std::string p = "blocks." + std::to_string(layer) + ".";
    Var h = tape_.layer_norm(x, param(p + "ln1.gain", blk.ln1_gain),
                             param(p + "ln1.shift", blk.ln1_shift));
    Var q = linear(h, layer, AttnWeight::kQuery);
    Var k = linear(h, layer, AttnWeight::kKey);
    Var v = linear(h, layer, AttnWeight::kValue);
    Var o = linear(attention(q, k, v, batch, len), layer, AttnWeight::kOutput);
    o = adapter(o, layer, AdapterPlacement::kAfterAttention);
    x = tape_.add(x, o);

    Var h2 = tape_.layer_norm(x, param(p + "ln2.gain", blk.ln2_gain),
                              param(p + "ln2.shift", blk.ln2_shift));
    Var hidden = tape_.gelu(
        tape_.add_row(tape_.matmul_nt(h2, param(p + "mlp.W_in", blk.W_in)), param(p + "mlp.b_in", blk.b_in)));
    Var m = tape_.add_row(tape_.matmul_nt(hidden, param(p + "mlp.W_out", blk.W_out)),
                          param(p + "mlp.b_out", blk.b_out));
    m = adapter(m, layer, AdapterPlacement::kAfterMlp);
    return tape_.add(x, m);
  }

 private:
  Tape& tape_;
  const TransformerModel& model_;
  const ForwardOptions& opt_;
};

}  // namespace

ForwardPass forward(Tape& tape, const TransformerModel& model, const Batch& batch,
                    const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  if (batch.batch_size == 0 || batch.seq_len == 0) throw DimensionError("forward: empty batch");
  if (batch.tokens.size() != batch.batch_size * batch.seq_len) {
    throw DimensionError("forward: token buffer does not match batch shape");
  }
  if (batch.context_len > batch.seq_len) throw DimensionError("forward: context exceeds sequence");
  if (model.blocks.size() != cfg.n_layers) throw ConfigError("forward: model has no blocks");

  const PrefixState* prefix =
      options.attachments != nullptr && options.attachments->prefix ? &*options.attachments->prefix
                                                                    : nullptr;
  const std::size_t l_p = prefix ? prefix->prefix_len : 0;
  const std::size_t l_i = prefix ? prefix->infix_len : 0;
  const std::size_t full = l_p + batch.seq_len + l_i;
  if (full > cfg.max_seq_len) {
    throw ConfigError("forward: sequence of " + std::to_string(batch.seq_len) + " tokens plus " +
                      std::to_string(l_p + l_i) + " reserved slots exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  for (int t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw DimensionError("forward: token " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(cfg.vocab_size));
    }
  }

  const std::size_t B = batch.batch_size;
  std::vector<std::size_t> ids(B * full, 0);
  std::vector<std::size_t> positions(B * full);
  std::vector<std::size_t> real_rows;
  std::vector<std::size_t> slot_rows;
  real_rows.reserve(B * batch.seq_len);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < full; ++p) positions[b * full + p] = p;
    for (std::size_t p = 0; p < l_p; ++p) slot_rows.push_back(b * full + p);
    for (std::size_t p = 0; p < l_i; ++p) slot_rows.push_back(b * full + l_p + batch.context_len + p);
    const auto seq = batch.sequence(b);
    for (std::size_t t = 0; t < batch.seq_len; ++t) {
      const std::size_t p = l_p + t + (t >= batch.context_len ? l_i : 0);
      ids[b * full + p] = static_cast<std::size_t>(seq[t]);
      real_rows.push_back(b * full + p);
    }
  }

  ForwardBuilder fb(tape, model, options);
  Var x = tape.add(tape.gather_rows(fb.param("tok_emb", model.tok_emb), ids),
                   tape.gather_rows(fb.param("pos_emb", model.pos_emb), positions));

  auto overwrite_slots = [&](Var h, std::size_t index) {
    if (prefix == nullptr || prefix->slots() == 0) return h;
    Var values = fb.param(prefix->param_name(index), prefix->activations[index]);
    std::vector<Var> copies(B, values);
    return tape.overwrite_rows(h, slot_rows, tape.concat_rows(copies));
  };

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (prefix != nullptr && (l == 0 || prefix->kind == PrefixKind::kEveryLayer)) {
      x = overwrite_slots(x, prefix->kind == PrefixKind::kEmbedding ? 0 : l);
    }
    x = fb.block(x, l, B, full);
  }
  Var h = tape.layer_norm(x, fb.param("ln_f.gain", model.lnf_gain),
                          fb.param("ln_f.shift", model.lnf_shift));
  if (prefix != nullptr && prefix->slots() > 0) h = tape.gather_rows(h, real_rows);
  return ForwardPass{tape.matmul_nt(h, fb.param("head.W", model.head))};
}

Matrix logits(const TransformerModel& model, const Batch& batch, const Attachments* attachments) {
  Tape tape;
  ForwardOptions opt;
  opt.attachments = attachments;
  return tape.value(forward(tape, model, batch, opt).logits);
}

Matrix logits_per_sample(const TransformerModel& model, const Batch& batch,
                         std::span<const Attachments* const> per_sample) {
  if (per_sample.size() != batch.batch_size) {
    throw DimensionError("logits_per_sample: " + std::to_string(per_sample.size()) +
                         " selections for a batch of " + std::to_string(batch.batch_size));
  }
  Matrix out(batch.batch_size * batch.seq_len, model.config.vocab_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    const Attachments* at = per_sample[b];
    if (at != nullptr && at->any_merged()) {
      throw ContractError("logits_per_sample: per-sample selection requires unmerged LoRA modules");
    }
    Batch one{1, batch.seq_len, batch.context_len,
              std::vector<int>(batch.sequence(b).begin(), batch.sequence(b).end())};
    const Matrix part = logits(model, one, at);
    std::copy_n(part.data(), part.size(), out.data() + b * part.size());
  }
  return out;
}

LossTargets loss_targets(const Batch& batch) {
  LossTargets lt;
  lt.targets.assign(batch.batch_size * batch.seq_len, 0);
  lt.weights.assign(batch.batch_size * batch.seq_len, 0.0);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    const auto seq = batch.sequence(b);
    for (std::size_t t = 0; t + 1 < batch.seq_len; ++t) {
      if (t + 1 < batch.context_len) continue;
      lt.targets[b * batch.seq_len + t] = seq[t + 1];
      lt.weights[b * batch.seq_len + t] = 1.0;
    }
  }
  return lt;
}

Var loss(Tape& tape, Var logits, const Batch& batch) {
  const LossTargets lt = loss_targets(batch);
  return tape.cross_entropy(logits, lt.targets, lt.weights);
}

double loss_value(const Matrix& logits, const Batch& batch) {
  Tape tape;
  Var z = tape.constant(logits);
  return tape.value(loss(tape, z, batch))(0, 0);
}

}  // namespace lora
