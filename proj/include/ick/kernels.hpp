#ifndef ICK_KERNELS_HPP
#define ICK_KERNELS_HPP

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/inputs.hpp"
#include "ick/linalg.hpp"

namespace ick {

/// Declarative kernel description.
///
/// Leaves read columns [dim_begin, dim_begin + dim_count) of source `source`
/// (dim_count < 0 means "to the end"). Composites combine children that may
/// read different sources. Hyperparameters live outside the spec in a flat
/// unconstrained vector; see param_count() for the layout.
struct KernelSpec {
  enum class Kind { linear, rbf, exp_sine_squared, spectral_mixture, sum, product };

  Kind kind = Kind::rbf;
  std::size_t source = 0;
  Eigen::Index dim_begin = 0;
  Eigen::Index dim_count = -1;
  int components = 1;  ///< Q for spectral mixtures
  bool learn_period = false;
  std::vector<KernelSpec> children;

  static KernelSpec leaf(Kind k, std::size_t source) {
    KernelSpec s;
    s.kind = k;
    s.source = source;
    return s;
  }
  static KernelSpec linear(std::size_t source = 0) { return leaf(Kind::linear, source); }
  static KernelSpec rbf(std::size_t source = 0) { return leaf(Kind::rbf, source); }
  static KernelSpec periodic(std::size_t source = 0) { return leaf(Kind::exp_sine_squared, source); }
  static KernelSpec spectral_mixture(int q, std::size_t source = 0) {
    KernelSpec s = leaf(Kind::spectral_mixture, source);
    s.components = q;
    return s;
  }
  static KernelSpec sum(std::vector<KernelSpec> children) {
    KernelSpec s;
    s.kind = Kind::sum;
    s.children = std::move(children);
    return s;
  }
  static KernelSpec product(std::vector<KernelSpec> children) {
    KernelSpec s;
    s.kind = Kind::product;
    s.children = std::move(children);
    return s;
  }

  bool is_composite() const noexcept { return kind == Kind::sum || kind == Kind::product; }
};

/// Hyperparameters in unconstrained space: logs of positive quantities, raw
/// spectral-mixture means.
using KernelParams = Vector;

/// Number of unconstrained parameters.
///   linear: [log variance]
///   rbf: [log variance, log lengthscale]
///   exp_sine_squared: [log variance, log lengthscale, log period]
///   spectral_mixture(Q): [log w_1..w_Q, log v_1..v_Q, mu_1..mu_Q]
///   sum/product: children concatenated in order
inline Eigen::Index param_count(const KernelSpec& spec) {
  switch (spec.kind) {
    case KernelSpec::Kind::linear: return 1;
    case KernelSpec::Kind::rbf: return 2;
    case KernelSpec::Kind::exp_sine_squared: return 3;
    case KernelSpec::Kind::spectral_mixture: return 3 * spec.components;
    case KernelSpec::Kind::sum:
    case KernelSpec::Kind::product: {
      Eigen::Index n = 0;
      for (const KernelSpec& c : spec.children) n += param_count(c);
      return n;
    }
  }
  return 0;
}

inline Vector linear_params(double variance) { return Vector::Constant(1, std::log(variance)); }

inline Vector rbf_params(double variance, double lengthscale) {
  Vector p(2);
  p << std::log(variance), std::log(lengthscale);
  return p;
}

inline Vector periodic_params(double variance, double lengthscale, double period) {
  Vector p(3);
  p << std::log(variance), std::log(lengthscale), std::log(period);
  return p;
}

inline Vector spectral_mixture_params(const Vector& weights, const Vector& scales, const Vector& means) {
  const Eigen::Index q = weights.size();
  if (scales.size() != q || means.size() != q) {
    throw ShapeMismatch("spectral mixture: weights, scales and means must have equal length");
  }
  Vector p(3 * q);
  p.segment(0, q) = weights.array().log().matrix();
  p.segment(q, q) = scales.array().log().matrix();
  p.segment(2 * q, q) = means;
  return p;
}

/// Default mixture: weights 1/Q, scales 1, means spread evenly over [f_lo, f_hi].
inline Vector spectral_mixture_defaults(int q, double f_lo, double f_hi) {
  Vector means(q);
  for (int i = 0; i < q; ++i) {
    means(i) = q == 1 ? 0.5 * (f_lo + f_hi) : f_lo + (f_hi - f_lo) * i / (q - 1);
  }
  return spectral_mixture_params(Vector::Constant(q, 1.0 / q), Vector::Ones(q), means);
}

inline Vector concat_params(const std::vector<Vector>& parts) {
  Eigen::Index n = 0;
  for (const Vector& v : parts) n += v.size();
  Vector out(n);
  Eigen::Index at = 0;
  for (const Vector& v : parts) {
    out.segment(at, v.size()) = v;
    at += v.size();
  }
  return out;
}

/// 1 for entries gradient descent may move, 0 for frozen ones (periods unless learn_period).
inline Vector trainable_mask(const KernelSpec& spec) {
  Vector mask = Vector::Ones(param_count(spec));
  if (spec.kind == KernelSpec::Kind::exp_sine_squared && !spec.learn_period) mask(2) = 0.0;
  if (spec.is_composite()) {
    Eigen::Index at = 0;
    for (const KernelSpec& c : spec.children) {
      const Eigen::Index n = param_count(c);
      mask.segment(at, n) = trainable_mask(c);
      at += n;
    }
  }
  return mask;
}

namespace detail {

struct Slice {
  Eigen::Index begin;
  Eigen::Index count;
};

inline Slice slice_of(const KernelSpec& spec, const Inputs& x) {
  const Matrix& src = x.source(spec.source);
  const Eigen::Index count = spec.dim_count < 0 ? src.cols() - spec.dim_begin : spec.dim_count;
  if (spec.dim_begin < 0 || count <= 0 || spec.dim_begin + count > src.cols()) {
    throw ShapeMismatch("kernel slice [" + std::to_string(spec.dim_begin) + ", +" +
                        std::to_string(count) + ") does not fit source " +
                        std::to_string(spec.source) + " with " + std::to_string(src.cols()) +
                        " columns");
  }
  return {spec.dim_begin, count};
}

/// Column block of a leaf's inputs for both batches, with matching widths.
struct LeafData {
  Eigen::Ref<const Matrix> a;
  Eigen::Ref<const Matrix> b;
};

inline LeafData leaf_data(const KernelSpec& spec, const Inputs& x, const Inputs& x2) {
  const Slice sa = slice_of(spec, x);
  const Slice sb = slice_of(spec, x2);
  if (sa.count != sb.count) throw ShapeMismatch("kernel inputs have different widths");
  if (spec.kind == KernelSpec::Kind::spectral_mixture && sa.count != 1) {
    throw ShapeMismatch("spectral mixture kernel reads exactly one coordinate");
  }
  return {x.source(spec.source).middleCols(sa.begin, sa.count),
          x2.source(spec.source).middleCols(sb.begin, sb.count)};
}

inline Matrix sq_dist(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) {
        const double diff = a(i, k) - b(j, k);
        s += diff * diff;
      }
      d(i, j) = s;
    }
  }
  return d;
}

inline Matrix dot_products(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      d(i, j) = s;
    }
  }
  return d;
}

/// Signed 1-D differences a_i - b_j.
inline Matrix differences(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) d(i, j) = a(i, 0) - b(j, 0);
  }
  return d;
}

inline Matrix eval_node(const KernelSpec& spec, const Vector& theta, Eigen::Index& at,
                        const Inputs& x, const Inputs& x2) {
  using K = KernelSpec::Kind;
  constexpr double pi = std::numbers::pi;
  switch (spec.kind) {
    case K::linear: {
      const LeafData d = leaf_data(spec, x, x2);
      const double var = std::exp(theta(at++));
      return var * dot_products(d.a, d.b);
    }
    case K::rbf: {
      const LeafData d = leaf_data(spec, x, x2);
      const double var = std::exp(theta(at));
      const double ell = std::exp(theta(at + 1));
      at += 2;
      return var * (-sq_dist(d.a, d.b).array() / (2.0 * ell * ell)).exp().matrix();
    }
    case K::exp_sine_squared: {
      const LeafData d = leaf_data(spec, x, x2);
      const double var = std::exp(theta(at));
      const double ell = std::exp(theta(at + 1));
      const double period = std::exp(theta(at + 2));
      at += 3;
      const Eigen::ArrayXXd r = sq_dist(d.a, d.b).array().sqrt();
      const Eigen::ArrayXXd s = (pi * r / period).sin();
      return var * (-2.0 * s.square() / (ell * ell)).exp().matrix();
    }
    case K::spectral_mixture: {
      const LeafData d = leaf_data(spec, x, x2);
      const int q = spec.components;
      const Eigen::ArrayXXd tau = differences(d.a, d.b).array();
      Eigen::ArrayXXd k = Eigen::ArrayXXd::Zero(tau.rows(), tau.cols());
      for (int c = 0; c < q; ++c) {
        const double w = std::exp(theta(at + c));
        const double v = std::exp(theta(at + q + c));
        const double mu = theta(at + 2 * q + c);
        k += w * (-2.0 * pi * pi * tau.square() * v).exp() * (2.0 * pi * tau * mu).cos();
      }
      at += 3 * q;
      return k.matrix();
    }
    case K::sum:
    case K::product: {
      if (spec.children.empty()) throw ShapeMismatch("composite kernel without children");
      Matrix acc = eval_node(spec.children.front(), theta, at, x, x2);
      for (std::size_t c = 1; c < spec.children.size(); ++c) {
        const Matrix child = eval_node(spec.children[c], theta, at, x, x2);
        if (spec.kind == K::sum) {
          acc += child;
        } else {
          acc.array() *= child.array();
        }
      }
      return acc;
    }
  }
  throw ShapeMismatch("unknown kernel kind");
}

inline void grad_node(const KernelSpec& spec, const Vector& theta, Eigen::Index& at, const Inputs& x,
                      const Inputs& x2, const Matrix& upstream, Vector& out) {
  using K = KernelSpec::Kind;
  constexpr double pi = std::numbers::pi;
  switch (spec.kind) {
    case K::linear: {
      Eigen::Index start = at;
      const Matrix k = eval_node(spec, theta, start, x, x2);
      out(at++) = (upstream.array() * k.array()).sum();
      return;
    }
    case K::rbf: {
      const LeafData d = leaf_data(spec, x, x2);
      const double var = std::exp(theta(at));
      const double ell = std::exp(theta(at + 1));
      const Eigen::ArrayXXd r2 = sq_dist(d.a, d.b).array();
      const Eigen::ArrayXXd k = var * (-r2 / (2.0 * ell * ell)).exp();
      const Eigen::ArrayXXd up = upstream.array();
      out(at) = (up * k).sum();
      out(at + 1) = (up * k * r2 / (ell * ell)).sum();
      at += 2;
      return;
    }
    case K::exp_sine_squared: {
      const LeafData d = leaf_data(spec, x, x2);
      const double var = std::exp(theta(at));
      const double ell = std::exp(theta(at + 1));
      const double period = std::exp(theta(at + 2));
      const Eigen::ArrayXXd r = sq_dist(d.a, d.b).array().sqrt();
      const Eigen::ArrayXXd s = (pi * r / period).sin();
      const Eigen::ArrayXXd c = (pi * r / period).cos();
      const Eigen::ArrayXXd k = var * (-2.0 * s.square() / (ell * ell)).exp();
      const Eigen::ArrayXXd up = upstream.array();
      out(at) = (up * k).sum();
      out(at + 1) = (up * k * 4.0 * s.square() / (ell * ell)).sum();
      out(at + 2) = (up * k * 4.0 * pi * r * s * c / (ell * ell * period)).sum();
      at += 3;
      return;
    }
    case K::spectral_mixture: {
      const LeafData d = leaf_data(spec, x, x2);
      const int q = spec.components;
      const Eigen::ArrayXXd tau = differences(d.a, d.b).array();
      const Eigen::ArrayXXd up = upstream.array();
      for (int c = 0; c < q; ++c) {
        const double w = std::exp(theta(at + c));
        const double v = std::exp(theta(at + q + c));
        const double mu = theta(at + 2 * q + c);
        const Eigen::ArrayXXd e = (-2.0 * pi * pi * tau.square() * v).exp();
        const Eigen::ArrayXXd phase = 2.0 * pi * tau * mu;
        const Eigen::ArrayXXd term = w * e * phase.cos();
        out(at + c) = (up * term).sum();
        out(at + q + c) = (up * term * (-2.0 * pi * pi * tau.square() * v)).sum();
        out(at + 2 * q + c) = (up * (-w) * e * phase.sin() * (2.0 * pi * tau)).sum();
      }
      at += 3 * q;
      return;
    }
    case K::sum: {
      for (const KernelSpec& c : spec.children) grad_node(c, theta, at, x, x2, upstream, out);
      return;
    }
    case K::product: {
      std::vector<Matrix> mats;
      Eigen::Index probe = at;
      for (const KernelSpec& c : spec.children) mats.push_back(eval_node(c, theta, probe, x, x2));
      for (std::size_t c = 0; c < spec.children.size(); ++c) {
        Matrix up = upstream;
        for (std::size_t o = 0; o < mats.size(); ++o) {
          if (o != c) up.array() *= mats[o].array();
        }
        grad_node(spec.children[c], theta, at, x, x2, up, out);
      }
      return;
    }
  }
}

inline void check_params(const KernelSpec& spec, const Vector& theta) {
  if (theta.size() != param_count(spec)) {
    throw ShapeMismatch("kernel expects " + std::to_string(param_count(spec)) + " parameters, got " +
                        std::to_string(theta.size()));
  }
}

}  // namespace detail

/// Gram matrix K(X, X2), n x m.
inline Matrix kernel_matrix(const KernelSpec& spec, const KernelParams& params, const Inputs& x,
                            const Inputs& x2) {
  detail::check_params(spec, params);
  Eigen::Index at = 0;
  return detail::eval_node(spec, params, at, x, x2);
}

inline double kernel_eval(const KernelSpec& spec, const KernelParams& params, const MultiPoint& x,
                          const MultiPoint& x2) {
  return kernel_matrix(spec, params, Inputs::from_point(x), Inputs::from_point(x2))(0, 0);
}

/// sum_ij upstream_ij * dK_ij / d(theta), theta unconstrained.
inline Vector kernel_param_grad(const KernelSpec& spec, const KernelParams& params, const Inputs& x,
                                const Inputs& x2, const Matrix& upstream) {
  detail::check_params(spec, params);
  if (upstream.rows() != x.size() || upstream.cols() != x2.size()) {
    throw ShapeMismatch("kernel_param_grad: upstream must be " + std::to_string(x.size()) + "x" +
                        std::to_string(x2.size()));
  }
  Vector out = Vector::Zero(params.size());
  Eigen::Index at = 0;
  detail::grad_node(spec, params, at, x, x2, upstream, out);
  return out;
}

/// Sources read anywhere in the spec.
inline void collect_sources(const KernelSpec& spec, std::vector<std::size_t>& out) {
  if (spec.is_composite()) {
    for (const KernelSpec& c : spec.children) collect_sources(c, out);
  } else {
    out.push_back(spec.source);
  }
}

// JSON ----------------------------------------------------------------------

inline std::string kind_name(KernelSpec::Kind k) {
  switch (k) {
    case KernelSpec::Kind::linear: return "linear";
    case KernelSpec::Kind::rbf: return "rbf";
    case KernelSpec::Kind::exp_sine_squared: return "exp_sine_squared";
    case KernelSpec::Kind::spectral_mixture: return "spectral_mixture";
    case KernelSpec::Kind::sum: return "sum";
    case KernelSpec::Kind::product: return "product";
  }
  return "?";
}

inline KernelSpec::Kind kind_from_name(const std::string& name) {
  using K = KernelSpec::Kind;
  if (name == "linear") return K::linear;
  if (name == "rbf") return K::rbf;
  if (name == "exp_sine_squared" || name == "periodic") return K::exp_sine_squared;
  if (name == "spectral_mixture") return K::spectral_mixture;
  if (name == "sum") return K::sum;
  if (name == "product") return K::product;
  throw ConfigError("kernel.type: unknown kernel '" + name + "'");
}

/// Frequency band used to place spectral-mixture means the config leaves out.
struct FrequencyRange {
  double lo = 0.0;
  double hi = 1.0;
};

struct KernelWithParams {
  KernelSpec spec;
  KernelParams params;
};

namespace detail {

inline double positive(const nlohmann::json& j, const char* key, double fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const double v = j.at(key).get<double>();
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ConfigError(where + ".params." + key + " must be positive and finite");
  }
  return v;
}

inline Vector json_vector(const nlohmann::json& j, int expect, const std::string& where) {
  const auto values = j.get<std::vector<double>>();
  if (static_cast<int>(values.size()) != expect) {
    throw ConfigError(where + " must have " + std::to_string(expect) + " entries");
  }
  return Eigen::Map<const Vector>(values.data(), expect);
}

inline void parse_node(const nlohmann::json& j, const std::string& where, std::optional<FrequencyRange> band,
                       KernelSpec& spec, std::vector<Vector>& params) {
  if (!j.is_object() || !j.contains("type")) throw ConfigError(where + ".type is required");
  spec.kind = kind_from_name(j.at("type").get<std::string>());
  if (spec.is_composite()) {
    if (!j.contains("children") || !j.at("children").is_array() || j.at("children").empty()) {
      throw ConfigError(where + ".children must be a non-empty array");
    }
    int i = 0;
    for (const auto& c : j.at("children")) {
      KernelSpec child;
      parse_node(c, where + ".children[" + std::to_string(i++) + "]", band, child, params);
      spec.children.push_back(std::move(child));
    }
    return;
  }
  spec.source = j.value("source", std::size_t{0});
  if (j.contains("dims")) {
    const auto dims = j.at("dims").get<std::vector<Eigen::Index>>();
    if (dims.size() != 2) throw ConfigError(where + ".dims must be [begin, count]");
    spec.dim_begin = dims[0];
    spec.dim_count = dims[1];
  }
  const nlohmann::json p = j.value("params", nlohmann::json::object());
  using K = KernelSpec::Kind;
  switch (spec.kind) {
    case K::linear:
      params.push_back(linear_params(positive(p, "variance", 1.0, where)));
      break;
    case K::rbf:
      params.push_back(rbf_params(positive(p, "variance", 1.0, where), positive(p, "lengthscale", 1.0, where)));
      break;
    case K::exp_sine_squared:
      if (!p.contains("period")) throw ConfigError(where + ".params.period is required");
      spec.learn_period = j.value("learn_period", false);
      params.push_back(periodic_params(positive(p, "variance", 1.0, where),
                                       positive(p, "lengthscale", 1.0, where),
                                       positive(p, "period", 1.0, where)));
      break;
    case K::spectral_mixture: {
      spec.components = j.value("components", 1);
      const int q = spec.components;
      if (q < 1) throw ConfigError(where + ".components must be >= 1");
      const FrequencyRange fr = band.value_or(FrequencyRange{});
      Vector theta = spectral_mixture_defaults(q, fr.lo, fr.hi);
      if (p.contains("weights")) {
        theta.segment(0, q) = json_vector(p.at("weights"), q, where + ".params.weights").array().log().matrix();
      }
      if (p.contains("scales")) {
        theta.segment(q, q) = json_vector(p.at("scales"), q, where + ".params.scales").array().log().matrix();
      }
      if (p.contains("means")) theta.segment(2 * q, q) = json_vector(p.at("means"), q, where + ".params.means");
      if (!theta.allFinite()) throw ConfigError(where + ".params: weights and scales must be positive");
      params.push_back(theta);
      break;
    }
    default:
      break;
  }
}

inline nlohmann::json dump_node(const KernelSpec& spec, const Vector& theta, Eigen::Index& at) {
  nlohmann::json j;
  j["type"] = kind_name(spec.kind);
  if (spec.is_composite()) {
    j["children"] = nlohmann::json::array();
    for (const KernelSpec& c : spec.children) j["children"].push_back(dump_node(c, theta, at));
    return j;
  }
  j["source"] = spec.source;
  if (spec.dim_begin != 0 || spec.dim_count >= 0) j["dims"] = {spec.dim_begin, spec.dim_count};
  nlohmann::json p;
  using K = KernelSpec::Kind;
  switch (spec.kind) {
    case K::linear: p["variance"] = std::exp(theta(at)); break;
    case K::rbf:
      p["variance"] = std::exp(theta(at));
      p["lengthscale"] = std::exp(theta(at + 1));
      break;
    case K::exp_sine_squared:
      p["variance"] = std::exp(theta(at));
      p["lengthscale"] = std::exp(theta(at + 1));
      p["period"] = std::exp(theta(at + 2));
      j["learn_period"] = spec.learn_period;
      break;
    case K::spectral_mixture: {
      const int q = spec.components;
      j["components"] = q;
      std::vector<double> w, v, m;
      for (int c = 0; c < q; ++c) {
        w.push_back(std::exp(theta(at + c)));
        v.push_back(std::exp(theta(at + q + c)));
        m.push_back(theta(at + 2 * q + c));
      }
      p["weights"] = w;
      p["scales"] = v;
      p["means"] = m;
      break;
    }
    default: break;
  }
  at += param_count(spec);
  j["params"] = p;
  return j;
}

}  // namespace detail

/// Parses {"type": ..., "source": m, "params": {...}} (composites nest "children").
/// Params are given in natural (constrained) units.
inline KernelWithParams kernel_from_json(const nlohmann::json& j, const std::string& where = "kernel",
                                         std::optional<FrequencyRange> band = std::nullopt) {
  KernelWithParams out;
  std::vector<Vector> parts;
  detail::parse_node(j, where, band, out.spec, parts);
  out.params = concat_params(parts);
  return out;
}

inline nlohmann::json kernel_to_json(const KernelSpec& spec, const KernelParams& params) {
  detail::check_params(spec, params);
  Eigen::Index at = 0;
  return detail::dump_node(spec, params, at);
}

}  // namespace ick

#endif  // ICK_KERNELS_HPP
