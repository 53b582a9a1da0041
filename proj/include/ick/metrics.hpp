#ifndef ICK_METRICS_HPP
#define ICK_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/linalg.hpp"

namespace ick {

namespace detail {

inline void same_length(const Vector& a, const Vector& b, const char* what) {
  if (a.size() != b.size()) throw ShapeMismatch(std::string(what) + ": inputs differ in length");
}

}  // namespace detail

struct RegressionErrors {
  double rmse = 0.0;
  double mae = 0.0;
};

inline RegressionErrors regression_errors(const Vector& y, const Vector& yhat) {
  detail::same_length(y, yhat, "regression_errors");
  if (y.size() == 0) throw ShapeMismatch("regression_errors: empty input");
  const Vector r = yhat - y;
  const double n = static_cast<double>(y.size());
  return {std::sqrt(r.squaredNorm() / n), r.cwiseAbs().sum() / n};
}

/// 1-based fractional ranks; tied values share the mean of their positions.
inline Vector fractional_ranks(const Vector& v) {
  const Eigen::Index n = v.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return v(a) < v(b); });
  Vector ranks(n);
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && v(order[j + 1]) == v(order[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) ranks(order[k]) = avg;
    i = j + 1;
  }
  return ranks;
}

struct SpearmanResult {
  double value = 0.0;
  bool degenerate = false;  ///< a constant input; value is reported as 0
};

inline SpearmanResult spearman(const Vector& y, const Vector& yhat) {
  detail::same_length(y, yhat, "spearman");
  if (y.size() < 2) throw ShapeMismatch("spearman: needs at least two points");
  const Vector ra = fractional_ranks(y);
  const Vector rb = fractional_ranks(yhat);
  const Vector ca = ra.array() - ra.mean();
  const Vector cb = rb.array() - rb.mean();
  const double na = ca.norm(), nb = cb.norm();
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0), false};
}

inline constexpr double kDefaultVarianceFloor = 1e-6;

struct MsllResult {
  double value = 0.0;
  std::size_t floored = 0;  ///< points whose variance was raised to the floor
};

/// (1 / 2N) sum [log(2 pi s_i^2) + (y_i - mu_i)^2 / s_i^2] with s_i^2 = max(var_i, floor).
inline MsllResult msll(const Vector& y, const Vector& mean, const Vector& var,
                       double variance_floor = kDefaultVarianceFloor) {
  detail::same_length(y, mean, "msll");
  detail::same_length(y, var, "msll");
  if (y.size() == 0) throw ShapeMismatch("msll: empty input");
  if (!(variance_floor > 0.0)) throw ConfigError("msll: variance floor must be positive");
  MsllResult out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    double s2 = var(i);
    if (!(s2 >= variance_floor)) {
      s2 = variance_floor;
      ++out.floored;
    }
    const double r = y(i) - mean(i);
    total += std::log(2.0 * std::numbers::pi * s2) + r * r / s2;
  }
  out.value = total / (2.0 * static_cast<double>(y.size()));
  return out;
}

struct ReconError {
  double max_abs = 0.0;
  double frobenius_rel = 0.0;  ///< ||K_true - K_est||_F / ||K_true||_F
};

inline ReconError kernel_recon_error(const Matrix& k_true, const Matrix& k_est) {
  if (k_true.rows() != k_est.rows() || k_true.cols() != k_est.cols()) {
    throw ShapeMismatch("kernel_recon_error: matrices differ in shape");
  }
  const Matrix d = k_true - k_est;
  ReconError e;
  e.max_abs = d.size() == 0 ? 0.0 : d.cwiseAbs().maxCoeff();
  const double scale = k_true.norm();
  e.frobenius_rel = scale > 0.0 ? d.norm() / scale : d.norm();
  return e;
}

/// Mean of the `head` largest eigenvalues over the mean of the rest (floored at 1e-12).
inline double eigen_gap_ratio(const Matrix& k, int head) {
  if (head < 1 || head >= k.rows()) throw ConfigError("eigen_gap_ratio: head must lie in [1, n)");
  const Vector ev = sym_eigvals(k);
  const double top = ev.head(head).mean();
  const double rest = std::max(ev.tail(ev.size() - head).mean(), 1e-12);
  return top / rest;
}

/// 1-D Wasserstein-1 distance between equal-size empirical samples.
inline double empirical_w1(const Vector& a, const Vector& b) {
  detail::same_length(a, b, "empirical_w1");
  if (a.size() == 0) throw ShapeMismatch("empirical_w1: empty samples");
  std::vector<double> sa(a.data(), a.data() + a.size());
  std::vector<double> sb(b.data(), b.data() + b.size());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double total = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) total += std::abs(sa[i] - sb[i]);
  return total / static_cast<double>(sa.size());
}

/// Named metric values plus metadata. Serialized with sorted keys so output is stable.
struct MetricReport {
  std::map<std::string, double> values;
  std::map<std::string, nlohmann::json> meta;
  std::vector<std::string> flags;

  void set(const std::string& name, double v) {
    if (!std::isfinite(v)) {
      flags.push_back(name + ":non_finite");
      return;
    }
    values[name] = v;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["metrics"] = values;
    j["meta"] = meta;
    j["flags"] = flags;
    return j;
  }

  /// Header and a single data row, columns in key order.
  std::string to_csv() const {
    std::ostringstream head, row;
    row.precision(17);
    bool first = true;
    for (const auto& [k, v] : values) {
      head << (first ? "" : ",") << k;
      row << (first ? "" : ",") << v;
      first = false;
    }
    return head.str() + "\n" + row.str() + "\n";
  }
};

}  // namespace ick

#endif  // ICK_METRICS_HPP
