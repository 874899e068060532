#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lora/tensor.hpp"

namespace lora {

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class OpKind : std::size_t {
  kLeaf,
  kMatMul,
  kMatMulNT,
  kAdd,
  kSub,
  kScale,
  kAddRow,
  kRelu,
  kGelu,
  kLayerNorm,
  kCausalSoftmax,
  kCrossEntropy,
  kSum,
  kSliceRows,
  kSliceCols,
  kConcatRows,
  kConcatCols,
  kGatherRows,
  kOverwriteRows,
  kCount_
};

const char* op_name(OpKind kind);

/// Adjoints keyed by parameter name. Only trainable parameters appear.
using GradientMap = std::map<std::string, Matrix>;

/// Reverse-mode tape. Built fresh for every forward pass.
///
/// Parameters are referenced, not copied: a Matrix passed to `parameter()`
/// must outlive the tape. A node requires a gradient only when one of its
/// inputs does, so frozen weights and everything computed purely from them
/// never get adjoint storage.
class Tape {
 public:
  Var parameter(const std::string& name, const Matrix& value, bool trainable);
  Var constant(Matrix value);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  OpKind kind(Var v) const { return nodes_[v.id].kind; }

  Var matmul(Var a, Var b);
  /// a * b^T; the layout used for `x W^T` with W stored as (out x in).
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  /// Adds a 1 x n row vector to every row of a.
  Var add_row(Var a, Var row);
  Var relu(Var a);
  /// tanh-approximated GELU.
  Var gelu(Var a);
  /// Row-wise layer normalization with 1 x n gain and shift.
  Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5);
  /// Row-wise softmax over a square score block where column j > row i is masked.
  Var causal_softmax(Var scores);
  /// Mean of -log softmax(logits)[i, targets[i]] over rows with weights[i] != 0,
  /// weighted by weights[i].
  Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights);
  Var sum(Var a);
  Var slice_rows(Var a, std::size_t begin, std::size_t count);
  Var slice_cols(Var a, std::size_t begin, std::size_t count);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  /// Row lookup: out.row(i) = table.row(indices[i]).
  Var gather_rows(Var table, std::span<const std::size_t> indices);
  /// Copy of x with x.row(rows[i]) replaced by values.row(i).
  Var overwrite_rows(Var x, std::span<const std::size_t> rows, Var values);

  /// Reverse sweep from a 1x1 node. Returns an adjoint for every trainable
  /// parameter (zero when the loss does not depend on it).
  GradientMap backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t count(OpKind kind) const { return counts_[static_cast<std::size_t>(kind)]; }
  /// Number of nodes that carried adjoint storage in the last backward().
  std::size_t adjoint_count() const { return adjoint_count_; }

 private:
  using Pullback = std::function<void(Tape&, const Matrix& adjoint)>;
  struct Node {
    OpKind kind;
    bool requires_grad = false;
    bool trainable = false;
    Matrix value;
    const Matrix* external = nullptr;
    std::string name;
    Pullback pullback;
  };

  Var push(OpKind kind, Matrix value, bool requires_grad, Pullback pullback);
  void accumulate(std::size_t id, Matrix grad);

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  std::array<std::size_t, static_cast<std::size_t>(OpKind::kCount_)> counts_{};
  std::size_t adjoint_count_ = 0;
};

}  // namespace lora
