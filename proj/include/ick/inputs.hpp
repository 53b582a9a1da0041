#ifndef ICK_INPUTS_HPP
#define ICK_INPUTS_HPP

#include <string>
#include <utility>
#include <vector>

#include "ick/errors.hpp"
#include "ick/linalg.hpp"

namespace ick {

/// One multi-source point: x^(0), x^(1), ... each a vector of that source's features.
using MultiPoint = std::vector<Vector>;

/// A batch of multi-source points. Source m is an (n x D_m) matrix, one row per point.
class Inputs {
 public:
  Inputs() = default;
  explicit Inputs(std::vector<Matrix> sources) : sources_(std::move(sources)) { check(); }

  /// Batch of size one from a single point.
  static Inputs from_point(const MultiPoint& x) {
    std::vector<Matrix> s;
    s.reserve(x.size());
    for (const Vector& v : x) s.emplace_back(v.transpose());
    return Inputs(std::move(s));
  }

  /// Batch carrying only source m (other slots are empty), used for inducing points.
  static Inputs single(std::size_t m, Matrix values) {
    std::vector<Matrix> s(m + 1);
    for (std::size_t i = 0; i < m; ++i) s[i] = Matrix(values.rows(), 0);
    s[m] = std::move(values);
    return Inputs(std::move(s));
  }

  std::size_t num_sources() const noexcept { return sources_.size(); }
  Eigen::Index size() const noexcept { return sources_.empty() ? 0 : sources_.front().rows(); }

  bool has_source(std::size_t m) const noexcept {
    return m < sources_.size() && sources_[m].cols() > 0;
  }

  const Matrix& source(std::size_t m) const {
    if (!has_source(m)) throw MissingSource("source " + std::to_string(m) + " is not present");
    return sources_[m];
  }

  const std::vector<Matrix>& sources() const noexcept { return sources_; }

  MultiPoint point(Eigen::Index i) const {
    MultiPoint p;
    p.reserve(sources_.size());
    for (const Matrix& s : sources_) p.emplace_back(s.row(i).transpose());
    return p;
  }

  /// Rows selected by index, in the given order.
  template <typename Indices>
  Inputs rows(const Indices& idx) const {
    std::vector<Matrix> s;
    s.reserve(sources_.size());
    for (const Matrix& src : sources_) {
      Matrix out(static_cast<Eigen::Index>(idx.size()), src.cols());
      Eigen::Index r = 0;
      for (auto i : idx) out.row(r++) = src.row(static_cast<Eigen::Index>(i));
      s.push_back(std::move(out));
    }
    return Inputs(std::move(s));
  }

  /// All sources side by side as a single source (used by the plain-MLP baseline).
  Inputs concatenated() const {
    Eigen::Index cols = 0;
    for (const Matrix& s : sources_) cols += s.cols();
    Matrix out(size(), cols);
    Eigen::Index c = 0;
    for (const Matrix& s : sources_) {
      out.middleCols(c, s.cols()) = s;
      c += s.cols();
    }
    return Inputs({std::move(out)});
  }

 private:
  void check() const {
    for (const Matrix& s : sources_) {
      if (s.rows() != sources_.front().rows()) {
        throw ShapeMismatch("Inputs: sources disagree on the number of points");
      }
    }
  }

  std::vector<Matrix> sources_;
};

}  // namespace ick

#endif  // ICK_INPUTS_HPP
