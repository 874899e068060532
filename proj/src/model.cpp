#include "lora/model.hpp"

#include <cmath>
#include <random>

namespace lora {

Matrix& BlockWeights::attention_weight(AttnWeight w) {
  switch (w) {
    case AttnWeight::kQuery: return W_q;
    case AttnWeight::kKey: return W_k;
    case AttnWeight::kValue: return W_v;
    case AttnWeight::kOutput: return W_o;
  }
  return W_q;
}

const Matrix& BlockWeights::attention_weight(AttnWeight w) const {
  return const_cast<BlockWeights*>(this)->attention_weight(w);
}

Matrix& BlockWeights::attention_bias(AttnWeight w) {
  switch (w) {
    case AttnWeight::kQuery: return b_q;
    case AttnWeight::kKey: return b_k;
    case AttnWeight::kValue: return b_v;
    case AttnWeight::kOutput: return b_o;
  }
  return b_q;
}

const Matrix& BlockWeights::attention_bias(AttnWeight w) const {
  return const_cast<BlockWeights*>(this)->attention_bias(w);
}

TransformerModel TransformerModel::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  const std::size_t f = config.d_ffn;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ffn_std = 1.0 / std::sqrt(static_cast<double>(f));
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  TransformerModel m;
  m.config = config;
  m.tok_emb = Matrix::gaussian(config.vocab_size, d, 1.0, rng);
  m.pos_emb = Matrix::gaussian(config.max_seq_len, d, 1.0, rng);
  m.blocks.reserve(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.ln1_gain = Matrix(1, d, 1.0);
    b.ln1_shift = Matrix(1, d);
    b.W_q = Matrix::gaussian(d, d, in_std, rng);
    b.b_q = Matrix(1, d);
    b.W_k = Matrix::gaussian(d, d, in_std, rng);
    b.b_k = Matrix(1, d);
    b.W_v = Matrix::gaussian(d, d, in_std, rng);
    b.b_v = Matrix(1, d);
    b.W_o = Matrix::gaussian(d, d, in_std * resid_scale, rng);
    b.b_o = Matrix(1, d);
    b.ln2_gain = Matrix(1, d, 1.0);
    b.ln2_shift = Matrix(1, d);
    b.W_in = Matrix::gaussian(f, d, in_std, rng);
    b.b_in = Matrix(1, f);
    b.W_out = Matrix::gaussian(d, f, ffn_std * resid_scale, rng);
    b.b_out = Matrix(1, d);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = Matrix(1, d, 1.0);
  m.lnf_shift = Matrix(1, d);
  m.head = Matrix::gaussian(config.vocab_size, d, in_std, rng);
  return m;
}

std::vector<ParamInfo> TransformerModel::parameters() {
  std::vector<ParamInfo> out;
  out.push_back({"tok_emb", &tok_emb, ParamRole::kEmbedding, -1});
  out.push_back({"pos_emb", &pos_emb, ParamRole::kEmbedding, -1});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    BlockWeights& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    const int li = static_cast<int>(l);
    out.push_back({p + "ln1.gain", &b.ln1_gain, ParamRole::kNormGain, li});
    out.push_back({p + "ln1.shift", &b.ln1_shift, ParamRole::kNormShift, li});
    out.push_back({p + "attn.W_q", &b.W_q, ParamRole::kMatrix, li});
    out.push_back({p + "attn.b_q", &b.b_q, ParamRole::kBias, li});
    out.push_back({p + "attn.W_k", &b.W_k, ParamRole::kMatrix, li});
    out.push_back({p + "attn.b_k", &b.b_k, ParamRole::kBias, li});
    out.push_back({p + "attn.W_v", &b.W_v, ParamRole::kMatrix, li});
    out.push_back({p + "attn.b_v", &b.b_v, ParamRole::kBias, li});
    out.push_back({p + "attn.W_o", &b.W_o, ParamRole::kMatrix, li});
    out.push_back({p + "attn.b_o", &b.b_o, ParamRole::kBias, li});
    out.push_back({p + "ln2.gain", &b.ln2_gain, ParamRole::kNormGain, li});
    out.push_back({p + "ln2.shift", &b.ln2_shift, ParamRole::kNormShift, li});
    out.push_back({p + "mlp.W_in", &b.W_in, ParamRole::kMatrix, li});
    out.push_back({p + "mlp.b_in", &b.b_in, ParamRole::kBias, li});
    out.push_back({p + "mlp.W_out", &b.W_out, ParamRole::kMatrix, li});
    out.push_back({p + "mlp.b_out", &b.b_out, ParamRole::kBias, li});
  }
  out.push_back({"ln_f.gain", &lnf_gain, ParamRole::kNormGain, -1});
  out.push_back({"ln_f.shift", &lnf_shift, ParamRole::kNormShift, -1});
  out.push_back({"head.W", &head, ParamRole::kMatrix, -1});
  return out;
}

std::vector<ParamInfo> TransformerModel::parameters() const {
  return const_cast<TransformerModel*>(this)->parameters();
}

std::size_t TransformerModel::census() const {
  std::size_t n = 0;
  for (const ParamInfo& p : parameters()) n += p.value->size();
  return n;
}

std::size_t total_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  const std::size_t per_block = 2 * d            // ln1
                                + 4 * (d * d + d)  // q, k, v, o
                                + 2 * d            // ln2
                                + f * d + f        // mlp in
                                + d * f + d;       // mlp out
  return c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_block + 2 * d +
         c.vocab_size * d;
}

std::string attention_weight_param_name(std::size_t layer, AttnWeight w) {
  return "blocks." + std::to_string(layer) + ".attn." + weight_name(w);
}

}  // namespace lora
