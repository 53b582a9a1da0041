#ifndef ICK_TEST_UTIL_HPP
#define ICK_TEST_UTIL_HPP

#include <algorithm>
#include <cmath>
#include <functional>

#include "ick/linalg.hpp"
#include "ick/rng.hpp"

namespace ick::test {

inline double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

/// Largest |a - b| / max(|b|, floor) over entries; floor guards near-zero references.
inline double max_rel_err(const Matrix& a, const Matrix& b, double floor = 1e-3) {
  double worst = 0.0;
  const double scale = std::max(floor, max_abs(b));
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(b(i)), floor * scale);
    worst = std::max(worst, std::abs(a(i) - b(i)) / denom);
  }
  return worst;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  return m;
}

inline Matrix random_pd(Eigen::Index n, Rng& rng) {
  const Matrix b = random_matrix(n, n, rng);
  return b * b.transpose() / static_cast<double>(n) + 0.5 * Matrix::Identity(n, n);
}

/// Central finite differences of f at x with step h.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2 * h);
  }
  return g;
}

}  // namespace ick::test

#endif  // ICK_TEST_UTIL_HPP
