#ifndef ICK_LINALG_HPP
#define ICK_LINALG_HPP

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ick/errors.hpp"
#include "ick/rng.hpp"

namespace ick {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Jitter values tried in order until the factorization succeeds.
inline const std::vector<double>& default_jitter() {
  static const std::vector<double> schedule{0.0, 1e-8, 1e-6, 1e-4};
  return schedule;
}

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;  ///< epsilon added to the diagonal
};

namespace detail {

inline void require_square(const Matrix& a, const char* what) {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw ShapeMismatch(std::string(what) + ": expected a non-empty square matrix, got " +
                        std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
}

inline double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

}  // namespace detail

/// Lower Cholesky factor of A + eps*I for the first eps in `jitter` that works.
///
/// A pivot counts as failed when it is not strictly positive or when it falls
/// below n * machine-epsilon of the largest diagonal entry, since such a
/// factor is numerically meaningless.
inline CholeskyFactor cholesky(const Matrix& a,
                               std::span<const double> jitter = default_jitter()) {
  detail::require_square(a, "cholesky");
  const double scale = std::max(1.0, detail::max_abs(a));
  if (detail::max_abs(a - a.transpose()) > 1e-10 * scale) {
    throw ShapeMismatch("cholesky: matrix is not symmetric");
  }
  if (!a.allFinite()) throw NotPositiveDefinite("cholesky: non-finite entries");

  const Eigen::Index n = a.rows();
  const double diag_max = a.diagonal().cwiseAbs().maxCoeff();
  const double pivot_floor = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * diag_max;
  for (double eps : jitter) {
    Matrix shifted = a;
    shifted.diagonal().array() += eps;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) continue;
    Matrix l = llt.matrixL();
    const double min_pivot = l.diagonal().minCoeff();
    if (!(min_pivot > 0.0) || min_pivot * min_pivot <= pivot_floor || !l.allFinite()) continue;
    return {std::move(l), eps};
  }
  throw NotPositiveDefinite("cholesky: every jitter in the schedule failed (n = " +
                            std::to_string(n) + ")");
}

enum class Triangle {
  lower,             ///< solve L X = B
  upper_transposed,  ///< solve L^T X = B
};

inline Matrix triangular_solve(const Matrix& l, const Matrix& b, Triangle side = Triangle::lower) {
  detail::require_square(l, "triangular_solve");
  if (b.rows() != l.rows()) {
    throw ShapeMismatch("triangular_solve: factor is " + std::to_string(l.rows()) +
                        " rows, right-hand side has " + std::to_string(b.rows()));
  }
  if (l.diagonal().cwiseAbs().minCoeff() < 1e-300) {
    throw SingularFactor("triangular_solve: zero on the diagonal");
  }
  if (side == Triangle::lower) return l.triangularView<Eigen::Lower>().solve(b);
  return l.transpose().triangularView<Eigen::Upper>().solve(b);
}

/// Reverse-mode gradient of the Cholesky factorization.
///
/// Given L = chol(A) and the upstream gradient L_bar, returns the symmetric
/// A_bar = sym(L^-T Phi(L^T L_bar) L^-1), where Phi keeps the lower triangle
/// and halves the diagonal. Only the lower triangle of L_bar is read.
inline Matrix cholesky_vjp(const Matrix& l, const Matrix& l_bar) {
  detail::require_square(l, "cholesky_vjp");
  if (l_bar.rows() != l.rows() || l_bar.cols() != l.cols()) {
    throw ShapeMismatch("cholesky_vjp: L_bar shape differs from L");
  }
  Matrix phi = (l.transpose() * l_bar.triangularView<Eigen::Lower>()).triangularView<Eigen::Lower>();
  phi.diagonal() *= 0.5;
  // S = L^-T Phi L^-1, as two triangular solves.
  Matrix left = triangular_solve(l, phi, Triangle::upper_transposed);
  Matrix s = triangular_solve(l, left.transpose(), Triangle::upper_transposed).transpose();
  return 0.5 * (s + s.transpose());
}

/// Eigenvalues of a symmetric matrix, largest first.
inline Vector sym_eigvals(const Matrix& a) {
  detail::require_square(a, "sym_eigvals");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw NoConvergence("sym_eigvals: QR iteration did not converge");
  }
  Vector values = solver.eigenvalues();
  std::sort(values.data(), values.data() + values.size(), std::greater<>());
  return values;
}

/// n draws from N(mean, cov); column j is mean + L * eps_j.
inline Matrix mvn_sample(const Vector& mean, const Matrix& cov, std::size_t n, Rng& rng,
                         std::span<const double> jitter = default_jitter()) {
  if (cov.rows() != mean.size()) {
    throw ShapeMismatch("mvn_sample: mean and covariance sizes differ");
  }
  const CholeskyFactor factor = cholesky(cov, jitter);
  const Eigen::Index d = mean.size();
  Matrix eps(d, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < eps.cols(); ++j) {
    for (Eigen::Index i = 0; i < d; ++i) eps(i, j) = rng.normal();
  }
  Matrix out = factor.lower.triangularView<Eigen::Lower>() * eps;
  out.colwise() += mean;
  return out;
}

}  // namespace ick

#endif  // ICK_LINALG_HPP
