#pragma once

#include <cstddef>
#include <vector>

#include "lora/tensor.hpp"

namespace lora {

/// Thin SVD: input (m x n) = U * diag(S) * V^T with p = min(m, n).
struct SvdResult {
  Matrix U;               ///< m x p, orthonormal columns
  std::vector<double> S;  ///< p values, non-increasing, >= 0
  Matrix V;               ///< n x p, orthonormal columns
};

struct SvdOptions {
  double tolerance = 1e-12;
  /// Sweep cap is `sweep_cap_factor * n^2` where n is the narrow dimension.
  std::size_t sweep_cap_factor = 10;
};

/// One-sided Jacobi SVD. Deterministic; each column of U has its
/// largest-magnitude entry non-negative. Throws NumericError on non-finite
/// input or when the sweep cap is reached.
SvdResult svd(const Matrix& m, const SvdOptions& options = {});

/// U * diag(S) * V^T.
Matrix reconstruct(const SvdResult& f);

}  // namespace lora
