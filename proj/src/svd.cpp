#include "lora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lora/errors.hpp"

namespace lora {
namespace {

double column_dot(const Matrix& a, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) s += a(r, i) * a(r, j);
  return s;
}

void rotate_columns(Matrix& a, std::size_t i, std::size_t j, double c, double s) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double x = a(r, i);
    const double y = a(r, j);
    a(r, i) = c * x - s * y;
    a(r, j) = s * x + c * y;
  }
}

// Replace column `col` of `u` with a unit vector orthogonal to all columns in
// `basis_cols`, built by Gram-Schmidt over the standard basis.
void complete_column(Matrix& u, std::size_t col, const std::vector<std::size_t>& basis_cols) {
  const std::size_t m = u.rows();
  for (std::size_t e = 0; e < m; ++e) {
    std::vector<double> v(m, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t b : basis_cols) {
        double d = 0.0;
        for (std::size_t r = 0; r < m; ++r) d += u(r, b) * v[r];
        for (std::size_t r = 0; r < m; ++r) v[r] -= d * u(r, b);
      }
    }
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (n > 0.5) {
      for (std::size_t r = 0; r < m; ++r) u(r, col) = v[r] / n;
      return;
    }
  }
  throw NumericError("svd: could not complete orthonormal basis");
}

// Requires a.rows() >= a.cols().
SvdResult jacobi_tall(const Matrix& input, const SvdOptions& opt) {
  const std::size_t m = input.rows();
  const std::size_t n = input.cols();
  Matrix a = input;
  Matrix v = Matrix::identity(n);

  const double total = std::max(frobenius_norm(input), 1e-300);
  const double negligible = total * 1e-15;
  const std::size_t sweep_cap = std::max<std::size_t>(1, opt.sweep_cap_factor * n * n);

  bool converged = n < 2;
  std::size_t sweep = 0;
  while (!converged) {
    if (sweep >= sweep_cap) {
      throw NumericError("svd: Jacobi sweeps did not converge after " + std::to_string(sweep) +
                             " sweeps",
                         sweep);
    }
    ++sweep;
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double alpha = column_dot(a, i, i);
        const double beta = column_dot(a, j, j);
        const double gamma = column_dot(a, i, j);
        if (alpha <= negligible * negligible || beta <= negligible * negligible) continue;
        if (std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_columns(a, i, j, c, s);
        rotate_columns(v, i, j, c, s);
      }
    }
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(a, j, j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  const double smax = n > 0 ? sigma[order[0]] : 0.0;
  const double zero_cut = smax * 1e-13 * static_cast<double>(std::max(m, n));
  std::vector<std::size_t> filled;
  std::vector<std::size_t> deficient;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    for (std::size_t r = 0; r < n; ++r) out.V(r, k) = v(r, src);
    if (sigma[src] > zero_cut && sigma[src] > 0.0) {
      out.S[k] = sigma[src];
      for (std::size_t r = 0; r < m; ++r) out.U(r, k) = a(r, src) / sigma[src];
      filled.push_back(k);
    } else {
      out.S[k] = 0.0;
      deficient.push_back(k);
    }
  }
  for (std::size_t k : deficient) {
    complete_column(out.U, k, filled);
    filled.push_back(k);
  }

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t arg = 0;
    for (std::size_t r = 1; r < m; ++r)
      if (std::abs(out.U(r, k)) > std::abs(out.U(arg, k))) arg = r;
    if (out.U(arg, k) < 0.0) {
      for (std::size_t r = 0; r < m; ++r) out.U(r, k) = -out.U(r, k);
      for (std::size_t r = 0; r < n; ++r) out.V(r, k) = -out.V(r, k);
    }
  }
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m, const SvdOptions& options) {
  if (m.rows() == 0 || m.cols() == 0) throw DimensionError("svd: empty matrix " + m.shape_string());
  if (!m.all_finite()) throw NumericError("svd: input contains non-finite entries");
  if (m.rows() >= m.cols()) return jacobi_tall(m, options);

  SvdResult t = jacobi_tall(transpose(m), options);
  SvdResult out{std::move(t.V), std::move(t.S), std::move(t.U)};
  // Re-apply the sign convention to the new U.
  for (std::size_t k = 0; k < out.S.size(); ++k) {
    std::size_t arg = 0;
    for (std::size_t r = 1; r < out.U.rows(); ++r)
      if (std::abs(out.U(r, k)) > std::abs(out.U(arg, k))) arg = r;
    if (out.U(arg, k) < 0.0) {
      for (std::size_t r = 0; r < out.U.rows(); ++r) out.U(r, k) = -out.U(r, k);
      for (std::size_t r = 0; r < out.V.rows(); ++r) out.V(r, k) = -out.V(r, k);
    }
  }
  return out;
}

Matrix reconstruct(const SvdResult& f) {
  Matrix us = f.U;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t c = 0; c < us.cols(); ++c) us(r, c) *= f.S[c];
  return matmul_nt(us, f.V);
}

}  // namespace lora
