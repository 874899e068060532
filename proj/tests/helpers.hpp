#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lora/model_config.hpp"
#include "lora/tape.hpp"
#include "lora/tensor.hpp"

namespace lora::test {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  return Matrix::gaussian(r, c, sd, rng);
}

// Small model that keeps finite-difference checks fast.
inline ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::make(2, 8, 2, 12, 16);
  c.d_ffn = 16;
  return c;
}

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-7) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / scale;
}

// Central differences of `loss` with respect to every entry of `param`,
// compared against `analytic`. Returns the worst relative error.
inline double worst_fd_error(Matrix& param, const Matrix& analytic,
                             const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < param.rows(); ++i) {
    for (std::size_t j = 0; j < param.cols(); ++j) {
      const double saved = param(i, j);
      param(i, j) = saved + h;
      const double up = loss();
      param(i, j) = saved - h;
      const double down = loss();
      param(i, j) = saved;
      worst = std::max(worst, relative_error(analytic(i, j), (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// Reduces a matrix node to a scalar with fixed random row and column weights,
// so every output entry gets a distinct non-zero adjoint.
inline Var weighted_sum(Tape& t, Var out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Matrix& v = t.value(out);
  Var left = t.constant(Matrix::gaussian(1, v.rows(), 1.0, rng));
  Var right = t.constant(Matrix::gaussian(v.cols(), 1, 1.0, rng));
  return t.sum(t.matmul(t.matmul(left, out), right));
}

}  // namespace lora::test
