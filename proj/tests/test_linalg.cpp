#include <gtest/gtest.h>

#include <cmath>

#include "ick/linalg.hpp"
#include "test_util.hpp"

namespace ick {
namespace {

TEST(Cholesky, IdentityIsItsOwnFactor) {
  const Matrix eye = Matrix::Identity(2, 2);
  const double jitter[] = {0.0};
  const CholeskyFactor f = cholesky(eye, jitter);
  EXPECT_EQ(f.jitter, 0.0);
  EXPECT_TRUE(f.lower.isApprox(eye));
}

TEST(Cholesky, TwoByTwoReconstructs) {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const double jitter[] = {0.0};
  const CholeskyFactor f = cholesky(a, jitter);
  EXPECT_NEAR(f.lower(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(f.lower(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(f.lower(1, 1), std::sqrt(2.0), 1e-15);
  EXPECT_EQ(f.lower(0, 1), 0.0);
  EXPECT_LE(test::max_abs(f.lower * f.lower.transpose() - a), 1e-12);
}

TEST(Cholesky, RankDeficientNeedsJitter) {
  Matrix a = Matrix::Ones(2, 2);
  const double jitter[] = {0.0, 1e-6};
  const CholeskyFactor f = cholesky(a, jitter);
  EXPECT_EQ(f.jitter, 1e-6);
  const Matrix expect = a + 1e-6 * Matrix::Identity(2, 2);
  EXPECT_LE(test::max_abs(f.lower * f.lower.transpose() - expect), 1e-14);
}

TEST(Cholesky, FailsWhenScheduleExhausted) {
  Matrix a(2, 2);
  a << 1, 2, 2, 1;  // eigenvalues 3 and -1
  EXPECT_THROW(cholesky(a), NotPositiveDefinite);
}

TEST(Cholesky, RejectsAsymmetricAndNonSquare) {
  Matrix a(2, 2);
  a << 2, 1, 0, 2;
  EXPECT_THROW(cholesky(a), ShapeMismatch);
  EXPECT_THROW(cholesky(Matrix::Ones(2, 3)), ShapeMismatch);
}

TEST(Cholesky, RandomPdMatricesReconstruct) {
  Rng rng(11);
  for (int n = 1; n <= 64; n += 7) {
    const Matrix a = test::random_pd(n, rng);
    const CholeskyFactor f = cholesky(a);
    EXPECT_EQ(f.jitter, 0.0);
    EXPECT_LE(test::max_abs(f.lower * f.lower.transpose() - a), 1e-9 * test::max_abs(a)) << "n=" << n;
    EXPECT_GT(f.lower.diagonal().minCoeff(), 0.0);
  }
}

TEST(TriangularSolve, IdentityAndDiagonal) {
  Rng rng(3);
  const Matrix b = test::random_matrix(3, 2, rng);
  EXPECT_TRUE(triangular_solve(Matrix::Identity(3, 3), b).isApprox(b));

  Matrix l = Matrix::Zero(2, 2);
  l.diagonal() << 2, 4;
  Matrix rhs(2, 1);
  rhs << 2, 8;
  const Matrix x = triangular_solve(l, rhs);
  EXPECT_DOUBLE_EQ(x(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(x(1, 0), 2.0);
}

TEST(TriangularSolve, ResidualBothSides) {
  Matrix l(2, 2);
  l << 2, 0, 1, std::sqrt(2.0);
  Matrix b(2, 1);
  b << 4, 2;
  const Matrix x = triangular_solve(l, b);
  EXPECT_LE(test::max_abs(l * x - b), 1e-12);
  const Matrix xt = triangular_solve(l, b, Triangle::upper_transposed);
  EXPECT_LE(test::max_abs(l.transpose() * xt - b), 1e-12);
}

TEST(TriangularSolve, SingularAndShapeErrors) {
  Matrix l = Matrix::Identity(2, 2);
  l(1, 1) = 0.0;
  EXPECT_THROW(triangular_solve(l, Matrix::Ones(2, 1)), SingularFactor);
  EXPECT_THROW(triangular_solve(Matrix::Identity(2, 2), Matrix::Ones(3, 1)), ShapeMismatch);
}

// Scalar probe f(A) = sum of all entries of chol(A) and its finite-difference
// gradient under symmetric perturbations of A.
double chol_sum(const Matrix& a) { return cholesky(a).lower.sum(); }

Matrix chol_sum_fd(const Matrix& a, double h) {
  const Eigen::Index n = a.rows();
  Matrix g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      Matrix ap = a, am = a;
      ap(i, j) += h;
      am(i, j) -= h;
      if (i != j) {
        ap(j, i) += h;
        am(j, i) -= h;
      }
      const double d = (chol_sum(ap) - chol_sum(am)) / (2 * h);
      // A symmetric perturbation of an off-diagonal pair moves both entries.
      g(i, j) = g(j, i) = (i == j) ? d : 0.5 * d;
    }
  }
  return g;
}

TEST(CholeskyVjp, ZeroUpstreamGivesZero) {
  const Matrix eye = Matrix::Identity(3, 3);
  EXPECT_EQ(test::max_abs(cholesky_vjp(eye, Matrix::Zero(3, 3))), 0.0);
}

TEST(CholeskyVjp, TwoByTwoMatchesFiniteDifferences) {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const Matrix l = cholesky(a).lower;
  const Matrix got = cholesky_vjp(l, Matrix::Ones(2, 2));
  const Matrix fd = chol_sum_fd(a, 1e-5);
  EXPECT_LE(test::max_rel_err(got, fd), 1e-6) << got << "\n" << fd;
}

TEST(CholeskyVjp, RandomMatricesMatchFiniteDifferences) {
  Rng rng(5);
  for (int n = 2; n <= 8; ++n) {
    const Matrix a = test::random_pd(n, rng);
    const Matrix l = cholesky(a).lower;
    const Matrix got = cholesky_vjp(l, Matrix::Ones(n, n));
    const Matrix fd = chol_sum_fd(a, 1e-5);
    EXPECT_LE(test::max_rel_err(got, fd), 1e-5) << "n=" << n;
  }
}

TEST(CholeskyVjp, ResultIsSymmetric) {
  Rng rng(8);
  for (int n = 2; n <= 8; ++n) {
    const Matrix l = cholesky(test::random_pd(n, rng)).lower;
    const Matrix lbar = test::random_matrix(n, n, rng);
    const Matrix abar = cholesky_vjp(l, lbar);
    EXPECT_LE(test::max_abs(abar - abar.transpose()), 1e-12);
  }
  EXPECT_THROW(cholesky_vjp(Matrix::Identity(2, 2), Matrix::Ones(3, 3)), ShapeMismatch);
}

TEST(SymEigvals, SmallCases) {
  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 1, 2;
  const Vector ev = sym_eigvals(d);
  EXPECT_DOUBLE_EQ(ev(0), 2.0);
  EXPECT_DOUBLE_EQ(ev(1), 1.0);

  Matrix a(2, 2);
  a << 2, 1, 1, 2;
  const Vector e2 = sym_eigvals(a);
  EXPECT_NEAR(e2(0), 3.0, 1e-14);
  EXPECT_NEAR(e2(1), 1.0, 1e-14);
  EXPECT_NEAR(e2.sum(), a.trace(), 1e-14);
  EXPECT_NEAR(e2.prod(), a.determinant(), 1e-13);
  // each eigenvalue makes A - lambda I singular
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR((a - e2(i) * Matrix::Identity(2, 2)).determinant(), 0.0, 1e-13);
  }

  const Vector e3 = sym_eigvals(Matrix::Ones(3, 3));
  EXPECT_NEAR(e3(0), 3.0, 1e-14);
  EXPECT_NEAR(e3(1), 0.0, 1e-14);
  EXPECT_NEAR(e3(2), 0.0, 1e-14);
}

TEST(SymEigvals, DescendingAndTraceOnRandomMatrices) {
  Rng rng(21);
  for (int n = 2; n <= 40; n += 6) {
    const Matrix b = test::random_matrix(n, n, rng);
    const Matrix a = b + b.transpose();
    const Vector ev = sym_eigvals(a);
    for (int i = 1; i < n; ++i) EXPECT_GE(ev(i - 1), ev(i));
    EXPECT_NEAR(ev.sum(), a.trace(), 1e-8 * std::max(1.0, std::abs(a.trace())) + 1e-10);
  }
}

TEST(MvnSample, StandardNormalMoments) {
  Rng rng(2024);
  const Matrix s = mvn_sample(Vector::Zero(2), Matrix::Identity(2, 2), 10000, rng);
  for (int i = 0; i < 2; ++i) {
    const double mean = s.row(i).mean();
    const double var = (s.row(i).array() - mean).square().mean();
    EXPECT_LT(std::abs(mean), 0.05);
    EXPECT_GT(var, 0.9);
    EXPECT_LT(var, 1.1);
  }
}

TEST(MvnSample, DegenerateCovarianceCollapsesToMean) {
  Rng rng(1);
  Vector mean(3);
  mean << 1, -2, 0.5;
  const Matrix s = mvn_sample(mean, Matrix::Zero(3, 3), 100, rng);
  // jitter 1e-8 is the first that succeeds; samples stay within a few sqrt(jitter)
  EXPECT_LE(test::max_abs(s.colwise() - mean), 6.0 * std::sqrt(1e-8));
}

TEST(MvnSample, SameSeedSameDraws) {
  Rng a(77), b(77);
  const Matrix cov = Matrix::Identity(3, 3);
  EXPECT_EQ(mvn_sample(Vector::Zero(3), cov, 5, a), mvn_sample(Vector::Zero(3), cov, 5, b));
}

TEST(MvnSample, EmpiricalCovarianceMatches) {
  Rng rng(4);
  const Matrix cov = test::random_pd(4, rng);
  const Matrix s = mvn_sample(Vector::Zero(4), cov, 50000, rng);
  const Matrix centered = s.colwise() - s.rowwise().mean();
  const Matrix emp = centered * centered.transpose() / static_cast<double>(s.cols() - 1);
  EXPECT_LE((emp - cov).norm() / cov.norm(), 0.05);
}

TEST(Rng, DeterministicAndSerializable) {
  Rng a(9);
  for (int i = 0; i < 3; ++i) a.normal();
  Rng b = Rng::deserialize(a.serialize());
  EXPECT_EQ(a, b);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
  EXPECT_NE(Rng(1).split(0).next_u64(), Rng(1).split(1).next_u64());
  // The C++ standard fixes the 10000th output of mt19937_64 seeded with 5489.
  Rng ref(5489);
  for (int i = 0; i < 9999; ++i) ref.next_u64();
  EXPECT_EQ(ref.next_u64(), 9981545732273789042ULL);
}

}  // namespace
}  // namespace ick
