#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lora/adapters.hpp"
#include "lora/tasks.hpp"
#include "lora/tensor.hpp"
#include "lora/training.hpp"

namespace lora {

/// Orthonormal basis of the row space of `a` (the right-singular vectors),
/// ordered by singular value: cols(a) x min(rows, cols).
Matrix right_singular_basis(const Matrix& a);

/// phi = ||U1[:, :i]^T U2[:, :j]||_F^2 / min(i, j) for orthonormal bases.
/// Throws DimensionError when i or j exceeds the available columns or is 0.
double basis_similarity(const Matrix& U1, const Matrix& U2, std::size_t i, std::size_t j);

/// phi between the top-i right-singular directions of A1 and the top-j of A2.
double subspace_similarity(const Matrix& A1, const Matrix& A2, std::size_t i, std::size_t j);

struct SubspaceReport {
  std::string left_label;
  std::string right_label;
  Matrix grid;  ///< grid(i-1, j-1) = phi(i, j)
  std::size_t i_max = 0;
  std::size_t j_max = 0;
};

SubspaceReport subspace_report(const Matrix& A1, const Matrix& A2, std::size_t i_max,
                               std::size_t j_max, std::string left_label = "a",
                               std::string right_label = "b");
/// Same grid from precomputed orthonormal bases.
SubspaceReport basis_report(const Matrix& U1, const Matrix& U2, std::size_t i_max,
                            std::size_t j_max, std::string left_label = "a",
                            std::string right_label = "b");

struct ProjectionMetric {
  double distance = 0.0;  ///< sqrt(p - sum sigma^2)
  double phi = 0.0;       ///< sum sigma^2 / p
};

/// Both quantities from the singular values of U1^T U2. Throws NumericError
/// if phi and (p - d^2) / p disagree by more than 1e-10.
ProjectionMetric projection_metric_check(const Matrix& A1, const Matrix& A2, std::size_t i,
                                         std::size_t j);

struct SeedPairEntry {
  std::string target;           ///< e.g. "blocks.0.W_q"
  SubspaceReport trained;       ///< seed a vs seed b
  SubspaceReport baseline_mean; ///< mean grid over the random draws
  std::vector<double> baseline_top1;
  double top1 = 0.0;
  double baseline_p99 = 0.0;
  bool exceeds_baseline() const { return top1 > baseline_p99; }
};

/// Compares A factors of two runs module by module against a Gaussian
/// baseline of identical shape. Throws ContractError when the runs have
/// different targets or ranks.
std::vector<SeedPairEntry> seed_pair_study(const Attachments& run_a, const Attachments& run_b,
                                           std::size_t baseline_draws = 100,
                                           std::uint64_t seed = 0);

/// Empirical quantile with linear interpolation, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct ProjectionReport {
  std::size_t rank = 0;
  double norm_W = 0.0;
  double norm_dW = 0.0;
  double proj_delta = 0.0;   ///< ||U^T W V|| with U, V from dW
  double proj_weight = 0.0;  ///< ... from the top-r of W
  double proj_random = 0.0;  ///< ... from a random orthonormal pair
  /// ||dW||_F / proj_delta; +infinity when proj_delta is zero.
  double amplification = 0.0;
};

/// ||U^T M V||_F for orthonormal U (rows x r) and V (cols x r).
double projected_norm(const Matrix& M, const Matrix& U, const Matrix& V);

/// Throws DimensionError on shape mismatch or r outside [1, min(rows, cols)].
ProjectionReport projection_study(const Matrix& W, const Matrix& dW, std::size_t r,
                                  std::uint64_t seed = 0);

/// phi grid between the left-singular directions of dW (rows) and W (cols).
SubspaceReport weight_delta_report(const Matrix& W, const Matrix& dW, std::size_t i_max,
                                   std::size_t j_max);

struct SweepCell {
  std::size_t rank = 0;
  std::vector<AttnWeight> targets;
  std::size_t trainable_params = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_accuracy = 0.0;
};

struct RankSweepOptions {
  std::vector<std::size_t> ranks{1, 2, 4, 8, 64};
  std::vector<std::vector<AttnWeight>> target_variants{{AttnWeight::kQuery, AttnWeight::kValue}};
  /// Held fixed across ranks so (alpha / r) shrinks as r grows; 0 means alpha = r.
  double alpha = 4.0;
  TrainHyper hyper;
  std::size_t workers = 1;
};

/// Trains one LoRA adaptation of a private copy of `base` per (targets, rank)
/// cell. Cells are ordered targets-major.
std::vector<SweepCell> rank_sweep(const TransformerModel& base, const TaskDataset& train_set,
                                  const TaskDataset& eval_set, const RankSweepOptions& options);

/// Long form: targets,rank,trainable_params,train_loss,eval_loss,eval_accuracy.
std::string sweep_csv(const std::vector<SweepCell>& cells);
/// Grid form: one row per target set, one eval-loss column per rank.
std::string sweep_grid_csv(const std::vector<SweepCell>& cells);

/// Letters for a target set, e.g. {W_q, W_v} -> "qv".
std::string target_letters(const std::vector<AttnWeight>& targets);

std::string grid_csv(const Matrix& grid);
/// Binary 8-bit PGM; entries are clamped to [0, 1] and scaled to 0..255.
std::string grid_pgm(const Matrix& grid);
/// Rows: proj_delta, proj_weight, proj_random, norm_W, norm_dW, amplification;
/// one column per report.
std::string projection_csv(const std::vector<ProjectionReport>& reports);

}  // namespace lora
