#include "lora/tape.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lora/errors.hpp"

namespace lora {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kScale: return "scale";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kRelu: return "relu";
    case OpKind::kGelu: return "gelu";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kCausalSoftmax: return "causal_softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kSum: return "sum";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kOverwriteRows: return "overwrite_rows";
    case OpKind::kCount_: break;
  }
  return "?";
}

Var Tape::push(OpKind kind, Matrix value, bool requires_grad, Pullback pullback) {
  Node node;
  node.kind = kind;
  node.requires_grad = requires_grad;
  node.value = std::move(value);
  if (requires_grad) node.pullback = std::move(pullback);
  nodes_.push_back(std::move(node));
  ++counts_[static_cast<std::size_t>(kind)];
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(const std::string& name, const Matrix& value, bool trainable) {
  Node node;
  node.kind = OpKind::kLeaf;
  node.requires_grad = trainable;
  node.trainable = trainable;
  node.external = &value;
  node.name = name;
  nodes_.push_back(std::move(node));
  ++counts_[static_cast<std::size_t>(OpKind::kLeaf)];
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return push(OpKind::kLeaf, std::move(value), false, {}); }

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external != nullptr ? *n.external : n.value;
}

void Tape::accumulate(std::size_t id, Matrix grad) {
  if (!nodes_[id].requires_grad) return;
  Matrix& slot = adjoints_[id];
  if (slot.empty()) {
    slot = std::move(grad);
  } else {
    slot += grad;
  }
}

Var Tape::matmul(Var a, Var b) {
  Matrix out = lora::matmul(value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(OpKind::kMatMul, std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a.id, lora::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b.id, lora::matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  Matrix out = lora::matmul_nt(value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(OpKind::kMatMulNT, std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a.id, lora::matmul(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b.id, lora::matmul_tn(g, t.value(a)));
  });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a) + value(b);
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(OpKind::kAdd, std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Matrix out = value(a) - value(b);
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(OpKind::kSub, std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, -1.0 * g);
  });
}

Var Tape::scale(Var a, double s) {
  Matrix out = s * value(a);
  return push(OpKind::kScale, std::move(out), requires_grad(a),
              [a, s](Tape& t, const Matrix& g) { t.accumulate(a.id, s * g); });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& x = value(a);
  const Matrix& r = value(row);
  if (r.rows() != 1 || r.cols() != x.cols()) {
    throw DimensionError("add_row: cannot broadcast " + r.shape_string() + " over " +
                         x.shape_string());
  }
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
  const bool rg = requires_grad(a) || requires_grad(row);
  return push(OpKind::kAddRow, std::move(out), rg, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.requires_grad(row)) {
      Matrix col_sum(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) col_sum(0, j) += g(i, j);
      t.accumulate(row.id, std::move(col_sum));
    }
  });
}

Var Tape::relu(Var a) {
  Matrix out = value(a);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push(OpKind::kRelu, std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d = g;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(x.data()[i] > 0.0)) d.data()[i] = 0.0;
    t.accumulate(a.id, std::move(d));
  });
}

Var Tape::gelu(Var a) {
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return push(OpKind::kGelu, std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      d.data()[i] = g.data()[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
    t.accumulate(a.id, std::move(d));
  });
}

Var Tape::layer_norm(Var x, Var gain, Var shift, double eps) {
  const Matrix& in = value(x);
  const Matrix& g = value(gain);
  const Matrix& b = value(shift);
  if (g.rows() != 1 || b.rows() != 1 || g.cols() != in.cols() || b.cols() != in.cols()) {
    throw DimensionError("layer_norm: gain " + g.shape_string() + " / shift " + b.shape_string() +
                         " do not fit " + in.shape_string());
  }
  const std::size_t n = in.cols();
  Matrix xhat(in.rows(), n);
  std::vector<double> inv_std(in.rows());
  Matrix out(in.rows(), n);
  for (std::size_t i = 0; i < in.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in(i, j) - mean) * (in(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (in(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * g(0, j) + b(0, j);
    }
  }
  const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(shift);
  return push(OpKind::kLayerNorm, std::move(out), rg,
              [x, gain, shift, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                  Tape& t, const Matrix& dy) {
                const Matrix& g = t.value(gain);
                const std::size_t rows = dy.rows();
                const std::size_t n = dy.cols();
                if (t.requires_grad(gain) || t.requires_grad(shift)) {
                  Matrix dg(1, n);
                  Matrix db(1, n);
                  for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      dg(0, j) += dy(i, j) * xhat(i, j);
                      db(0, j) += dy(i, j);
                    }
                  t.accumulate(gain.id, std::move(dg));
                  t.accumulate(shift.id, std::move(db));
                }
                if (t.requires_grad(x)) {
                  Matrix dx(rows, n);
                  for (std::size_t i = 0; i < rows; ++i) {
                    double mean_d = 0.0;
                    double mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = dy(i, j) * g(0, j);
                      mean_d += d;
                      mean_dx += d * xhat(i, j);
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = dy(i, j) * g(0, j);
                      dx(i, j) = inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
                    }
                  }
                  t.accumulate(x.id, std::move(dx));
                }
              });
}

Var Tape::causal_softmax(Var scores) {
  const Matrix& s = value(scores);
  if (s.rows() != s.cols()) {
    throw DimensionError("causal_softmax: scores must be square, got " + s.shape_string());
  }
  Matrix p(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double mx = s(i, 0);
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      p(i, j) = std::exp(s(i, j) - mx);
      z += p(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
  }
  return push(OpKind::kCausalSoftmax, std::move(p), requires_grad(scores),
              [scores, self = nodes_.size()](Tape& t, const Matrix& g) {
                const Matrix& p = t.nodes_[self].value;
                Matrix d(p.rows(), p.cols());
                for (std::size_t i = 0; i < p.rows(); ++i) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j <= i; ++j) dot += g(i, j) * p(i, j);
                  for (std::size_t j = 0; j <= i; ++j) d(i, j) = p(i, j) * (g(i, j) - dot);
                }
                t.accumulate(scores.id, std::move(d));
              });
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  const Matrix& z = value(logits);
  if (targets.size() != z.rows() || weights.size() != z.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights for logits " +
                         z.shape_string());
  }
  double total_weight = 0.0;
  for (double w : weights) total_weight += w;
  if (!(total_weight > 0.0)) throw ContractError("cross_entropy: empty target span");

  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (weights[i] == 0.0) continue;
    const int tgt = targets[i];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= z.cols()) {
      throw DimensionError("cross_entropy: target " + std::to_string(tgt) + " out of range");
    }
    double mx = z(i, 0);
    for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) {
      probs(i, j) = std::exp(z(i, j) - mx);
      sum += probs(i, j);
    }
    for (std::size_t j = 0; j < z.cols(); ++j) probs(i, j) /= sum;
    loss += weights[i] * (std::log(sum) + mx - z(i, static_cast<std::size_t>(tgt)));
  }
  loss /= total_weight;

  std::vector<int> tgt_copy(targets.begin(), targets.end());
  std::vector<double> w_copy(weights.begin(), weights.end());
  return push(OpKind::kCrossEntropy, Matrix(1, 1, loss), requires_grad(logits),
              [logits, probs = std::move(probs), tgt_copy = std::move(tgt_copy),
               w_copy = std::move(w_copy), total_weight](Tape& t, const Matrix& g) {
                Matrix d(probs.rows(), probs.cols());
                const double up = g(0, 0) / total_weight;
                for (std::size_t i = 0; i < probs.rows(); ++i) {
                  if (w_copy[i] == 0.0) continue;
                  const double s = up * w_copy[i];
                  for (std::size_t j = 0; j < probs.cols(); ++j) d(i, j) = s * probs(i, j);
                  d(i, static_cast<std::size_t>(tgt_copy[i])) -= s;
                }
                t.accumulate(logits.id, std::move(d));
              });
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  return push(OpKind::kSum, Matrix(1, 1, s), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a.id, Matrix(x.rows(), x.cols(), g(0, 0)));
  });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Matrix& x = value(a);
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + x.shape_string());
  }
  Matrix out(count, x.cols());
  std::copy_n(x.data() + begin * x.cols(), count * x.cols(), out.data());
  return push(OpKind::kSliceRows, std::move(out), requires_grad(a),
              [a, begin](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                std::copy_n(g.data(), g.size(), d.data() + begin * x.cols());
                t.accumulate(a.id, std::move(d));
              });
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& x = value(a);
  if (begin + count > x.cols()) {
    throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + x.shape_string());
  }
  Matrix out(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    std::copy_n(x.data() + i * x.cols() + begin, count, out.data() + i * count);
  return push(OpKind::kSliceCols, std::move(out), requires_grad(a),
              [a, begin, count](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                  std::copy_n(g.data() + i * count, count, d.data() + i * x.cols() + begin);
                t.accumulate(a.id, std::move(d));
              });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (value(p).cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += value(p).rows();
    rg = rg || requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& v = value(p);
    std::copy_n(v.data(), v.size(), out.data() + offset);
    offset += v.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(OpKind::kConcatRows, std::move(out), rg, [ins](Tape& t, const Matrix& g) {
    std::size_t offset = 0;
    for (Var p : ins) {
      const Matrix& v = t.value(p);
      if (t.requires_grad(p)) {
        Matrix d(v.rows(), v.cols());
        std::copy_n(g.data() + offset, v.size(), d.data());
        t.accumulate(p.id, std::move(d));
      }
      offset += v.size();
    }
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += value(p).cols();
    rg = rg || requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t c0 = 0;
  for (Var p : parts) {
    const Matrix& v = value(p);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(v.data() + i * v.cols(), v.cols(), out.data() + i * cols + c0);
    c0 += v.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(OpKind::kConcatCols, std::move(out), rg, [ins](Tape& t, const Matrix& g) {
    std::size_t c0 = 0;
    for (Var p : ins) {
      const Matrix& v = t.value(p);
      if (t.requires_grad(p)) {
        Matrix d(v.rows(), v.cols());
        for (std::size_t i = 0; i < v.rows(); ++i)
          std::copy_n(g.data() + i * g.cols() + c0, v.cols(), d.data() + i * v.cols());
        t.accumulate(p.id, std::move(d));
      }
      c0 += v.cols();
    }
  });
}

Var Tape::gather_rows(Var table, std::span<const std::size_t> indices) {
  const Matrix& tab = value(table);
  Matrix out(indices.size(), tab.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tab.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " outside " +
                           tab.shape_string());
    }
    std::copy_n(tab.data() + indices[i] * tab.cols(), tab.cols(), out.data() + i * tab.cols());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return push(OpKind::kGatherRows, std::move(out), requires_grad(table),
              [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
                const Matrix& tab = t.value(table);
                Matrix d(tab.rows(), tab.cols());
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::size_t j = 0; j < tab.cols(); ++j) d(idx[i], j) += g(i, j);
                t.accumulate(table.id, std::move(d));
              });
}

Var Tape::overwrite_rows(Var x, std::span<const std::size_t> rows, Var values) {
  const Matrix& in = value(x);
  const Matrix& vals = value(values);
  if (vals.rows() != rows.size() || vals.cols() != in.cols()) {
    throw DimensionError("overwrite_rows: values " + vals.shape_string() + " for " +
                         std::to_string(rows.size()) + " rows of " + in.shape_string());
  }
  std::set<std::size_t> seen;
  for (std::size_t r : rows) {
    if (r >= in.rows() || !seen.insert(r).second) {
      throw DimensionError("overwrite_rows: invalid or repeated row " + std::to_string(r));
    }
  }
  Matrix out = in;
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(vals.data() + i * vals.cols(), vals.cols(), out.data() + rows[i] * out.cols());
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const bool rg = requires_grad(x) || requires_grad(values);
  return push(OpKind::kOverwriteRows, std::move(out), rg,
              [x, values, idx = std::move(idx)](Tape& t, const Matrix& g) {
                if (t.requires_grad(x)) {
                  Matrix d = g;
                  for (std::size_t r : idx)
                    std::fill_n(d.data() + r * d.cols(), d.cols(), 0.0);
                  t.accumulate(x.id, std::move(d));
                }
                if (t.requires_grad(values)) {
                  Matrix d(idx.size(), g.cols());
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    std::copy_n(g.data() + idx[i] * g.cols(), g.cols(), d.data() + i * g.cols());
                  t.accumulate(values.id, std::move(d));
                }
              });
}

GradientMap Tape::backward(Var loss) {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + lv.shape_string());
  }
  adjoints_.assign(nodes_.size(), Matrix());
  adjoint_count_ = 0;
  if (requires_grad(loss)) adjoints_[loss.id] = Matrix(1, 1, 1.0);

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || adjoints_[id].empty()) continue;
    ++adjoint_count_;
    if (n.pullback) n.pullback(*this, adjoints_[id]);
  }

  GradientMap grads;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind != OpKind::kLeaf || !n.trainable) continue;
    const Matrix& v = value(Var{id});
    Matrix g = adjoints_[id].empty() ? Matrix(v.rows(), v.cols()) : std::move(adjoints_[id]);
    auto it = grads.find(n.name);
    if (it == grads.end()) {
      grads.emplace(n.name, std::move(g));
    } else {
      it->second += g;
    }
  }
  adjoints_.clear();
  return grads;
}

}  // namespace lora
