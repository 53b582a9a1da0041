#ifndef ICK_LATENTMAP_HPP
#define ICK_LATENTMAP_HPP

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/inputs.hpp"
#include "ick/kernels.hpp"
#include "ick/linalg.hpp"
#include "ick/rng.hpp"

namespace ick {

/// Evenly spaced inducing points over the range of `values` (n x D).
///
/// One coordinate: p points from min to max. Several coordinates: a product
/// grid with ceil(p^(1/D)) points per axis, from which p points are taken at
/// an even stride.
inline Matrix auto_inducing(const Matrix& values, int p) {
  if (p < 1) throw ConfigError("inducing points: p must be >= 1");
  if (values.rows() == 0) throw ShapeMismatch("inducing points: no data to span");
  const Eigen::Index dims = values.cols();
  const Vector lo = values.colwise().minCoeff();
  const Vector hi = values.colwise().maxCoeff();
  auto axis = [&](Eigen::Index d, int count, int i) {
    return count == 1 ? 0.5 * (lo(d) + hi(d)) : lo(d) + (hi(d) - lo(d)) * i / (count - 1);
  };
  Matrix out(p, dims);
  if (dims == 1) {
    for (int i = 0; i < p; ++i) out(i, 0) = axis(0, p, i);
    return out;
  }
  const int per_axis = static_cast<int>(std::ceil(std::pow(static_cast<double>(p), 1.0 / dims) - 1e-9));
  long total = 1;
  for (Eigen::Index d = 0; d < dims; ++d) total *= per_axis;
  for (int i = 0; i < p; ++i) {
    long flat = p == 1 ? 0 : std::lround(static_cast<double>(i) * (total - 1) / (p - 1));
    for (Eigen::Index d = dims - 1; d >= 0; --d) {
      out(i, d) = axis(d, per_axis, static_cast<int>(flat % per_axis));
      flat /= per_axis;
    }
  }
  return out;
}

namespace detail {

inline void require_single_source(const KernelSpec& spec, std::size_t source) {
  std::vector<std::size_t> used;
  collect_sources(spec, used);
  for (std::size_t s : used) {
    if (s != source) {
      throw ConfigError("latent map kernel reads source " + std::to_string(s) + " but the branch owns source " +
                        std::to_string(source));
    }
  }
}

}  // namespace detail

// Nystrom ----------------------------------------------------------------------

/// Nystrom map z(x) = U k_p(x) with U^T U = (K_p + eps I)^-1, U = L^-1.
struct NystromMap {
  KernelSpec kernel;
  KernelParams params;
  std::size_t source = 0;
  Matrix inducing;  ///< p x D_source

  NystromMap() = default;
  NystromMap(KernelSpec k, KernelParams theta, std::size_t src, Matrix ind)
      : kernel(std::move(k)), params(std::move(theta)), source(src), inducing(std::move(ind)) {
    detail::require_single_source(kernel, source);
    if (inducing.rows() < 1) throw ConfigError("Nystrom map needs at least one inducing point");
    for (Eigen::Index i = 0; i < inducing.rows(); ++i) {
      for (Eigen::Index j = 0; j < i; ++j) {
        if ((inducing.row(i) - inducing.row(j)).squaredNorm() == 0.0) {
          throw ConfigError("Nystrom inducing points must be pairwise distinct");
        }
      }
    }
  }

  Eigen::Index dim() const noexcept { return inducing.rows(); }
  Inputs inducing_inputs() const { return Inputs::single(source, inducing); }
};

struct NystromCache {
  Matrix lower;   ///< chol(K_p + eps I)
  double jitter = 0.0;
  Matrix k_pn;    ///< K(inducing, batch), p x n
  Matrix z;       ///< p x n
  Inputs batch;
};

inline NystromCache nystrom_forward(const NystromMap& map, const Inputs& batch) {
  if (batch.size() == 0) throw ShapeMismatch("nystrom_forward: empty batch");
  const Inputs ind = map.inducing_inputs();
  const Matrix k_p = kernel_matrix(map.kernel, map.params, ind, ind);
  NystromCache cache;
  CholeskyFactor f = cholesky(k_p);
  cache.lower = std::move(f.lower);
  cache.jitter = f.jitter;
  cache.k_pn = kernel_matrix(map.kernel, map.params, ind, batch);
  cache.z = triangular_solve(cache.lower, cache.k_pn);
  cache.batch = batch;
  return cache;
}

/// Gradient of the downstream loss with respect to the map's kernel parameters.
///
/// Z = L^-1 K_pn gives K_pn_bar = L^-T Z_bar and L_bar = -L^-T Z_bar Z^T;
/// the latter goes through cholesky_vjp into K_p_bar.
inline Vector nystrom_vjp(const NystromMap& map, const NystromCache& cache, const Matrix& z_bar) {
  if (z_bar.rows() != cache.z.rows() || z_bar.cols() != cache.z.cols()) {
    throw ShapeMismatch("nystrom_vjp: Z_bar shape differs from the forward output");
  }
  const Inputs ind = map.inducing_inputs();
  const Matrix k_pn_bar = triangular_solve(cache.lower, z_bar, Triangle::upper_transposed);
  const Matrix l_bar = -(k_pn_bar * cache.z.transpose());
  const Matrix k_p_bar = cholesky_vjp(cache.lower, l_bar);
  return kernel_param_grad(map.kernel, map.params, ind, ind, k_p_bar) +
         kernel_param_grad(map.kernel, map.params, ind, cache.batch, k_pn_bar);
}

// Random Fourier features --------------------------------------------------------

inline constexpr int kPeriodicHarmonics = 64;

/// Harmonic probabilities of the exp-sine-squared spectrum, n = 0..64:
/// p_0 = e^-a I_0(a), p_n = 2 e^-a I_n(a), a = 1/lengthscale^2, renormalized after truncation.
inline Vector periodic_harmonic_weights(double lengthscale) {
  const double a = 1.0 / (lengthscale * lengthscale);
  Vector w(kPeriodicHarmonics + 1);
  for (int n = 0; n <= kPeriodicHarmonics; ++n) {
    w(n) = (n == 0 ? 1.0 : 2.0) * std::exp(-a) * std::cyl_bessel_i(static_cast<double>(n), a);
  }
  if (!w.allFinite() || !(w.sum() > 0.0)) {
    throw UnsupportedSpectrum("periodic spectrum overflows for lengthscale " + std::to_string(lengthscale));
  }
  return w / w.sum();
}

namespace detail {

inline int categorical(double u, const Vector& probs) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

}  // namespace detail

/// Random Fourier feature map phi(x) = a [cos(W x); sin(W x)], a = sqrt(variance / d_m).
///
/// Frequencies are a deterministic function of the kernel parameters and of
/// base draws fixed at construction (reparameterization):
///   rbf: w_j = eps_j / lengthscale
///   spectral_mixture: w_j = 2 pi (mu_c + sqrt(v_c) eps_j), component c picked from u_j
///   exp_sine_squared: w_j = 2 pi n_j / T, harmonic n_j picked from u_j
/// Categorical picks are piecewise constant, so weights and the periodic
/// lengthscale only receive gradient through the amplitude.
struct RffMap {
  KernelSpec kernel;
  KernelParams params;
  std::size_t source = 0;
  int half_dim = 1;  ///< d_m; output dimension is 2 d_m
  std::uint64_t seed = 0;
  Matrix base_normals;  ///< d_m x D
  Vector base_uniforms; ///< d_m

  RffMap() = default;
  RffMap(KernelSpec k, KernelParams theta, std::size_t src, Eigen::Index input_dim, int d_m, std::uint64_t s)
      : kernel(std::move(k)), params(std::move(theta)), source(src), half_dim(d_m), seed(s) {
    using K = KernelSpec::Kind;
    if (kernel.kind != K::rbf && kernel.kind != K::spectral_mixture && kernel.kind != K::exp_sine_squared) {
      throw UnsupportedSpectrum("no spectral sampler for kernel '" + kind_name(kernel.kind) + "'");
    }
    if (kernel.kind != K::rbf && input_dim != 1) {
      throw UnsupportedSpectrum("spectral mixture and periodic features need one input coordinate");
    }
    if (d_m < 1) throw ConfigError("RFF half dimension must be >= 1");
    detail::require_single_source(kernel, source);
    Rng rng(seed);
    base_normals.resize(d_m, input_dim);
    base_uniforms.resize(d_m);
    for (int j = 0; j < d_m; ++j) {
      for (Eigen::Index d = 0; d < input_dim; ++d) base_normals(j, d) = rng.normal();
      base_uniforms(j) = rng.uniform();
    }
  }

  Eigen::Index dim() const noexcept { return 2 * half_dim; }

  double amplitude() const {
    using K = KernelSpec::Kind;
    double var = 0.0;
    if (kernel.kind == K::spectral_mixture) {
      var = params.head(kernel.components).array().exp().sum();
    } else {
      var = std::exp(params(0));
    }
    return std::sqrt(var / half_dim);
  }

  /// Component / harmonic index per frequency (spectral mixture and periodic only).
  std::vector<int> assignments() const {
    using K = KernelSpec::Kind;
    std::vector<int> out(half_dim, 0);
    if (kernel.kind == K::rbf) return out;
    Vector probs;
    if (kernel.kind == K::spectral_mixture) {
      probs = params.head(kernel.components).array().exp().matrix();
      probs /= probs.sum();
    } else {
      probs = periodic_harmonic_weights(std::exp(params(1)));
    }
    for (int j = 0; j < half_dim; ++j) out[j] = detail::categorical(base_uniforms(j), probs);
    return out;
  }

  /// d_m x D frequency matrix for the current parameters.
  Matrix frequencies() const {
    using K = KernelSpec::Kind;
    constexpr double two_pi = 2.0 * std::numbers::pi;
    if (kernel.kind == K::rbf) return base_normals / std::exp(params(1));
    const std::vector<int> pick = assignments();
    Matrix w(half_dim, 1);
    if (kernel.kind == K::spectral_mixture) {
      const int q = kernel.components;
      for (int j = 0; j < half_dim; ++j) {
        const int c = pick[j];
        w(j, 0) = two_pi * (params(2 * q + c) + std::sqrt(std::exp(params(q + c))) * base_normals(j, 0));
      }
    } else {
      const double period = std::exp(params(2));
      for (int j = 0; j < half_dim; ++j) w(j, 0) = two_pi * pick[j] / period;
    }
    return w;
  }

  Eigen::Ref<const Matrix> slice(const Inputs& batch) const {
    const detail::Slice s = detail::slice_of(kernel, batch);
    if (s.count != base_normals.cols()) throw ShapeMismatch("RFF input width differs from construction");
    return batch.source(source).middleCols(s.begin, s.count);
  }
};

/// Features for a batch, (2 d_m) x n.
inline Matrix rff_features(const RffMap& map, const Inputs& batch) {
  const Matrix proj = map.frequencies() * map.slice(batch).transpose();
  const double a = map.amplitude();
  Matrix z(map.dim(), proj.cols());
  z.topRows(map.half_dim) = a * proj.array().cos().matrix();
  z.bottomRows(map.half_dim) = a * proj.array().sin().matrix();
  return z;
}

inline Vector rff_vjp(const RffMap& map, const Inputs& batch, const Matrix& z_bar) {
  using K = KernelSpec::Kind;
  constexpr double pi = std::numbers::pi;
  const Matrix x = map.slice(batch);
  const Matrix w = map.frequencies();
  const Matrix proj = w * x.transpose();
  if (z_bar.rows() != map.dim() || z_bar.cols() != proj.cols()) {
    throw ShapeMismatch("rff_vjp: Z_bar shape differs from the feature matrix");
  }
  const double a = map.amplitude();
  const Eigen::Index h = map.half_dim;
  const Eigen::ArrayXXd cosp = proj.array().cos();
  const Eigen::ArrayXXd sinp = proj.array().sin();
  // sum over all entries of Z_bar .* Z, i.e. dF/d(log a)
  const double d_log_amp = a * ((z_bar.topRows(h).array() * cosp).sum() + (z_bar.bottomRows(h).array() * sinp).sum());
  // dF/dproj, d_m x n
  const Matrix proj_bar = (a * (z_bar.bottomRows(h).array() * cosp - z_bar.topRows(h).array() * sinp)).matrix();
  const Matrix w_bar = proj_bar * x;  // d_m x D

  Vector g = Vector::Zero(map.params.size());
  switch (map.kernel.kind) {
    case K::rbf:
      g(0) = 0.5 * d_log_amp;
      g(1) = -(w_bar.array() * w.array()).sum();
      break;
    case K::exp_sine_squared:
      g(0) = 0.5 * d_log_amp;
      g(1) = 0.0;
      g(2) = -(w_bar.array() * w.array()).sum();
      break;
    case K::spectral_mixture: {
      const int q = map.kernel.components;
      const Vector weights = map.params.head(q).array().exp().matrix();
      const double total = weights.sum();
      const std::vector<int> pick = map.assignments();
      for (int c = 0; c < q; ++c) g(c) = 0.5 * d_log_amp * weights(c) / total;
      for (Eigen::Index j = 0; j < h; ++j) {
        const int c = pick[j];
        const double sd = std::sqrt(std::exp(map.params(q + c)));
        g(2 * q + c) += 2.0 * pi * w_bar(j, 0);
        g(q + c) += pi * sd * map.base_normals(j, 0) * w_bar(j, 0);
      }
      break;
    }
    default:
      throw UnsupportedSpectrum("rff_vjp: unsupported kernel");
  }
  return g;
}

// Common interface -----------------------------------------------------------------

using LatentMap = std::variant<NystromMap, RffMap>;

struct LatentCache {
  Matrix z;
  std::optional<NystromCache> nystrom;
  std::optional<Inputs> batch;
};

inline Eigen::Index latent_dim(const LatentMap& map) {
  return std::visit([](const auto& m) { return m.dim(); }, map);
}

inline KernelParams& latent_params(LatentMap& map) {
  return std::visit([](auto& m) -> KernelParams& { return m.params; }, map);
}

inline const KernelParams& latent_params(const LatentMap& map) {
  return std::visit([](const auto& m) -> const KernelParams& { return m.params; }, map);
}

inline const KernelSpec& latent_kernel(const LatentMap& map) {
  return std::visit([](const auto& m) -> const KernelSpec& { return m.kernel; }, map);
}

inline LatentCache latent_forward(const LatentMap& map, const Inputs& batch) {
  LatentCache cache;
  if (const auto* ny = std::get_if<NystromMap>(&map)) {
    cache.nystrom = nystrom_forward(*ny, batch);
    cache.z = cache.nystrom->z;
  } else {
    cache.z = rff_features(std::get<RffMap>(map), batch);
    cache.batch = batch;
  }
  return cache;
}

inline Vector latent_vjp(const LatentMap& map, const LatentCache& cache, const Matrix& z_bar) {
  if (const auto* ny = std::get_if<NystromMap>(&map)) return nystrom_vjp(*ny, *cache.nystrom, z_bar);
  return rff_vjp(std::get<RffMap>(map), *cache.batch, z_bar);
}

/// {"method": "nystrom"|"rff", "p": int, "inducing": "auto"|[[...], ...], "seed": int}
struct LatentMapConfig {
  enum class Method { nystrom, rff };
  Method method = Method::nystrom;
  int p = 16;
  std::optional<Matrix> inducing;  ///< explicit points; evenly spaced when absent
  std::uint64_t seed = 0;
};

inline LatentMapConfig latent_config_from_json(const nlohmann::json& j, const std::string& where = "map") {
  LatentMapConfig c;
  const std::string method = j.value("method", std::string("nystrom"));
  if (method == "nystrom") {
    c.method = LatentMapConfig::Method::nystrom;
  } else if (method == "rff") {
    c.method = LatentMapConfig::Method::rff;
  } else {
    throw ConfigError(where + ".method must be 'nystrom' or 'rff'");
  }
  c.p = j.value("p", 16);
  if (c.p < 1) throw ConfigError(where + ".p must be >= 1");
  if (c.method == LatentMapConfig::Method::rff && c.p % 2 != 0) throw ConfigError(where + ".p must be even for rff");
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("inducing") && j.at("inducing").is_array()) {
    const auto rows = j.at("inducing").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != c.p) throw ConfigError(where + ".inducing must list p points");
    Matrix m(c.p, rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
    for (int i = 0; i < c.p; ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != m.cols()) throw ConfigError(where + ".inducing rows differ in width");
      for (Eigen::Index d = 0; d < m.cols(); ++d) m(i, d) = rows[i][d];
    }
    c.inducing = std::move(m);
  } else if (j.contains("inducing") && j.at("inducing") != "auto") {
    throw ConfigError(where + ".inducing must be \"auto\" or a list of points");
  }
  return c;
}

inline nlohmann::json latent_config_to_json(const LatentMapConfig& c) {
  nlohmann::json j;
  j["method"] = c.method == LatentMapConfig::Method::nystrom ? "nystrom" : "rff";
  j["p"] = c.p;
  j["seed"] = c.seed;
  if (c.inducing) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index i = 0; i < c.inducing->rows(); ++i) {
      std::vector<double>& row = rows.emplace_back();
      for (Eigen::Index d = 0; d < c.inducing->cols(); ++d) row.push_back((*c.inducing)(i, d));
    }
    j["inducing"] = rows;
  } else {
    j["inducing"] = "auto";
  }
  return j;
}

/// Builds the map for one source; `source_values` (n x D_m) spans the auto inducing grid.
inline LatentMap make_latent_map(const KernelSpec& kernel, const KernelParams& params, std::size_t source,
                                 const LatentMapConfig& config, const Matrix& source_values) {
  if (config.method == LatentMapConfig::Method::nystrom) {
    Matrix ind = config.inducing ? *config.inducing : auto_inducing(source_values, config.p);
    return NystromMap(kernel, params, source, std::move(ind));
  }
  const detail::Slice s = detail::slice_of(kernel.is_composite() ? kernel.children.front() : kernel,
                                           Inputs::single(source, source_values));
  return RffMap(kernel, params, source, s.count, config.p / 2, config.seed);
}

}  // namespace ick

#endif  // ICK_LATENTMAP_HPP
