#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lora/errors.hpp"
#include "lora/svd.hpp"

namespace lora {
namespace {

double orthonormality_error(const Matrix& q) {
  return max_abs_diff(matmul_tn(q, q), Matrix::identity(q.cols()));
}

TEST(Svd, ReconstructsThousandRandomMatrices) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 24);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng);
    const Matrix a = test::random_matrix(m, n, rng);
    const SvdResult f = svd(a);
    const std::size_t p = std::min(m, n);
    ASSERT_EQ(f.U.rows(), m);
    ASSERT_EQ(f.U.cols(), p);
    ASSERT_EQ(f.V.rows(), n);
    ASSERT_EQ(f.V.cols(), p);
    ASSERT_EQ(f.S.size(), p);
    EXPECT_LE(frobenius_norm(reconstruct(f) - a), 1e-10 * frobenius_norm(a)) << m << "x" << n;
    EXPECT_LE(orthonormality_error(f.U), 1e-10);
    EXPECT_LE(orthonormality_error(f.V), 1e-10);
    for (std::size_t i = 0; i + 1 < p; ++i) EXPECT_GE(f.S[i], f.S[i + 1]);
    for (double s : f.S) EXPECT_GE(s, 0.0);
  }
}

TEST(Svd, SignConventionMakesLargestEntryNonNegative) {
  std::mt19937_64 rng(5);
  const SvdResult f = svd(test::random_matrix(9, 6, rng));
  for (std::size_t j = 0; j < f.U.cols(); ++j) {
    double best = 0.0;
    for (std::size_t i = 0; i < f.U.rows(); ++i) {
      if (std::abs(f.U(i, j)) > std::abs(best)) best = f.U(i, j);
    }
    EXPECT_GE(best, 0.0);
  }
}

TEST(Svd, DeterministicAcrossCalls) {
  std::mt19937_64 rng(6);
  const Matrix a = test::random_matrix(12, 5, rng);
  const SvdResult f = svd(a), g = svd(a);
  EXPECT_EQ(f.U, g.U);
  EXPECT_EQ(f.V, g.V);
  EXPECT_EQ(f.S, g.S);
}

TEST(Svd, KnownDiagonalSpectrum) {
  const Matrix a{{0, 3, 0}, {2, 0, 0}, {0, 0, 5}};
  const SvdResult f = svd(a);
  EXPECT_NEAR(f.S[0], 5.0, 1e-14);
  EXPECT_NEAR(f.S[1], 3.0, 1e-14);
  EXPECT_NEAR(f.S[2], 2.0, 1e-14);
}

TEST(Svd, RankDeficientAndZeroInputs) {
  std::mt19937_64 rng(8);
  const Matrix u = test::random_matrix(10, 2, rng);
  const Matrix v = test::random_matrix(2, 7, rng);
  const Matrix a = matmul(u, v);
  const SvdResult f = svd(a);
  EXPECT_LE(frobenius_norm(reconstruct(f) - a), 1e-10 * frobenius_norm(a));
  for (std::size_t i = 2; i < f.S.size(); ++i) EXPECT_LE(f.S[i], 1e-10 * f.S[0]);

  const SvdResult z = svd(Matrix(4, 3));
  for (double s : z.S) EXPECT_EQ(s, 0.0);
  EXPECT_LE(orthonormality_error(z.V), 1e-12);
}

TEST(Svd, NonFiniteInputThrows) {
  Matrix a(3, 3, 1.0);
  a(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svd(a), NumericError);
  a(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(svd(a), NumericError);
}

TEST(Svd, SweepCapReportsIterations) {
  std::mt19937_64 rng(9);
  const Matrix a = test::random_matrix(20, 20, rng);
  SvdOptions o;
  o.sweep_cap_factor = 0;
  o.tolerance = 0.0;
  try {
    svd(a, o);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.iterations(), 1u);
  }
}

}  // namespace
}  // namespace lora
