#ifndef ICK_NN_HPP
#define ICK_NN_HPP

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/linalg.hpp"
#include "ick/rng.hpp"

namespace ick {

enum class Activation { relu, tanh };
enum class TrainableScope { all, last_layer };

/// Fully-connected network shape and prior.
///
/// widths = [d_in, h_1, ..., h_L, p]. Every affine layer but the last is
/// followed by the activation. Weights are drawn N(0, sigma_w2 / fan_in),
/// biases N(0, sigma_b2).
struct MlpConfig {
  std::vector<int> widths;
  Activation activation = Activation::relu;
  double sigma_w2 = 2.0;
  double sigma_b2 = 0.01;
  TrainableScope trainable = TrainableScope::all;

  std::size_t num_layers() const noexcept { return widths.empty() ? 0 : widths.size() - 1; }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("mlp.widths needs at least input and output sizes");
    for (int w : widths) {
      if (w < 1) throw ConfigError("mlp.widths entries must be >= 1");
    }
    if (!(sigma_w2 > 0.0)) throw ConfigError("mlp.sigma_w2 must be positive");
    if (!(sigma_b2 >= 0.0)) throw ConfigError("mlp.sigma_b2 must be non-negative");
  }
};

/// Per-layer weights (out x in) and biases.
struct MlpParams {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  Eigen::Index size() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  static MlpParams zeros_like(const MlpParams& p) {
    MlpParams z;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      z.weights.push_back(Matrix::Zero(p.weights[l].rows(), p.weights[l].cols()));
      z.biases.push_back(Vector::Zero(p.biases[l].size()));
    }
    return z;
  }
};

inline MlpParams mlp_init(const MlpConfig& config, Rng& rng) {
  config.validate();
  MlpParams p;
  const double bias_sd = std::sqrt(config.sigma_b2);
  for (std::size_t l = 0; l < config.num_layers(); ++l) {
    const int fan_in = config.widths[l];
    const int fan_out = config.widths[l + 1];
    const double sd = std::sqrt(config.sigma_w2 / fan_in);
    Matrix w(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) w(r, c) = sd * rng.normal();
    }
    Vector b = Vector::Zero(fan_out);
    if (config.sigma_b2 > 0.0) {
      for (int r = 0; r < fan_out; ++r) b(r) = bias_sd * rng.normal();
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  return p;
}

struct MlpCache {
  std::vector<Matrix> activations;  ///< inputs to each affine layer, (width x n)
  std::vector<Matrix> preacts;      ///< outputs of each hidden affine layer before the nonlinearity
  TrainableScope trainable = TrainableScope::all;
  Activation activation = Activation::relu;
};

namespace detail {

inline Matrix activate(const Matrix& u, Activation a) {
  if (a == Activation::relu) return u.cwiseMax(0.0);
  return u.array().tanh().matrix();
}

inline Matrix activate_grad(const Matrix& u, Activation a) {
  if (a == Activation::relu) return (u.array() > 0.0).cast<double>().matrix();
  return (1.0 - u.array().tanh().square()).matrix();
}

inline void check_params(const MlpParams& params, const MlpConfig& config) {
  if (params.weights.size() != config.num_layers() || params.biases.size() != config.num_layers()) {
    throw ShapeMismatch("mlp: parameter layer count differs from config");
  }
  for (std::size_t l = 0; l < config.num_layers(); ++l) {
    if (params.weights[l].rows() != config.widths[l + 1] || params.weights[l].cols() != config.widths[l] ||
        params.biases[l].size() != config.widths[l + 1]) {
      throw ShapeMismatch("mlp: layer " + std::to_string(l) + " shape differs from config");
    }
  }
}

}  // namespace detail

/// Batch forward pass. `x` is (n x d_in), one point per row; returns (p x n).
inline Matrix mlp_forward_batch(const MlpParams& params, const MlpConfig& config, const Matrix& x,
                                MlpCache* cache = nullptr) {
  detail::check_params(params, config);
  if (x.cols() != config.input_dim()) {
    throw ShapeMismatch("mlp: input has " + std::to_string(x.cols()) + " features, expected " +
                        std::to_string(config.input_dim()));
  }
  Matrix h = x.transpose();
  if (cache) {
    cache->activations.clear();
    cache->preacts.clear();
    cache->trainable = config.trainable;
    cache->activation = config.activation;
  }
  const std::size_t layers = config.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix u = params.weights[l] * h;
    u.colwise() += params.biases[l];
    if (cache) cache->activations.push_back(std::move(h));
    if (l + 1 == layers) return u;
    h = detail::activate(u, config.activation);
    if (cache) cache->preacts.push_back(std::move(u));
  }
  return h;
}

/// Single-point forward pass; output length p.
inline Vector mlp_forward(const MlpParams& params, const MlpConfig& config, const Vector& x,
                          MlpCache* cache = nullptr) {
  return mlp_forward_batch(params, config, x.transpose(), cache).col(0);
}

/// Reverse pass from dZ (p x n) to parameter gradients. With last-layer scope
/// the earlier blocks come back as zeros.
inline MlpParams mlp_backward(const MlpParams& params, const MlpCache& cache, const Matrix& dz) {
  const std::size_t layers = params.weights.size();
  if (cache.activations.size() != layers) throw ShapeMismatch("mlp_backward: cache from a different network");
  if (dz.rows() != params.weights.back().rows() || dz.cols() != cache.activations.front().cols()) {
    throw ShapeMismatch("mlp_backward: dZ shape differs from the forward output");
  }
  MlpParams g = MlpParams::zeros_like(params);
  Matrix delta = dz;
  for (std::size_t k = layers; k-- > 0;) {
    g.weights[k] = delta * cache.activations[k].transpose();
    g.biases[k] = delta.rowwise().sum();
    if (k == 0 || cache.trainable == TrainableScope::last_layer) break;
    delta = (params.weights[k].transpose() * delta).cwiseProduct(
        detail::activate_grad(cache.preacts[k - 1], cache.activation));
  }
  return g;
}

inline MlpParams mlp_backward(const MlpParams& params, const MlpCache& cache, const Vector& dz) {
  return mlp_backward(params, cache, Matrix(dz));
}

namespace detail {

struct NngpTriple {
  double xx, yy, xy;
};

inline NngpTriple relu_step(const NngpTriple& k, double sigma_w2, double sigma_b2) {
  constexpr double pi = std::numbers::pi;
  const double norm = std::sqrt(k.xx * k.yy);
  double cos_t = norm > 0.0 ? k.xy / norm : 1.0;
  cos_t = std::clamp(cos_t, -1.0, 1.0);
  const double theta = std::acos(cos_t);
  const double j = std::sin(theta) + (pi - theta) * cos_t;
  return {sigma_b2 + sigma_w2 * k.xx / 2.0, sigma_b2 + sigma_w2 * k.yy / 2.0,
          sigma_b2 + sigma_w2 / (2.0 * pi) * norm * j};
}

}  // namespace detail

/// Infinite-width covariance of one output coordinate for a ReLU network
/// (arc-cosine recursion, one step per hidden layer).
inline double nngp_relu_kernel(const MlpConfig& config, const Vector& x, const Vector& x2) {
  config.validate();
  if (config.activation != Activation::relu) {
    throw UnsupportedActivation("closed-form NNGP kernel is only implemented for ReLU");
  }
  if (x.size() != config.input_dim() || x2.size() != config.input_dim()) {
    throw ShapeMismatch("nngp_relu_kernel: input width differs from config");
  }
  const double d = config.input_dim();
  detail::NngpTriple k{config.sigma_b2 + config.sigma_w2 * x.squaredNorm() / d,
                       config.sigma_b2 + config.sigma_w2 * x2.squaredNorm() / d,
                       config.sigma_b2 + config.sigma_w2 * x.dot(x2) / d};
  for (std::size_t l = 1; l < config.num_layers(); ++l) k = detail::relu_step(k, config.sigma_w2, config.sigma_b2);
  return k.xy;
}

/// NNGP Gram matrix between row sets a (n x d) and b (m x d).
inline Matrix nngp_relu_matrix(const MlpConfig& config, const Matrix& a, const Matrix& b) {
  Matrix k(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      k(i, j) = nngp_relu_kernel(config, a.row(i).transpose(), b.row(j).transpose());
    }
  }
  return k;
}

// Flat parameter views used by the optimizers.

inline Vector flatten(const MlpParams& p) {
  Vector out(p.size());
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const Matrix& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) out(at++) = w(r, c);
    }
    out.segment(at, p.biases[l].size()) = p.biases[l];
    at += p.biases[l].size();
  }
  return out;
}

inline void unflatten(const Vector& flat, MlpParams& p) {
  if (flat.size() != p.size()) throw ShapeMismatch("mlp: flat parameter length differs");
  Eigen::Index at = 0;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    Matrix& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat(at++);
    }
    p.biases[l] = flat.segment(at, p.biases[l].size());
    at += p.biases[l].size();
  }
}

/// 1 on weight entries, 0 on biases (weight decay applies to weights only).
inline Vector weight_mask(const MlpParams& p) {
  MlpParams m = MlpParams::zeros_like(p);
  for (Matrix& w : m.weights) w.setOnes();
  return flatten(m);
}

/// 1 where the trainable scope lets parameters move.
inline Vector scope_mask(const MlpConfig& config, const MlpParams& p) {
  MlpParams m = MlpParams::zeros_like(p);
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    if (config.trainable == TrainableScope::all || l + 1 == m.weights.size()) {
      m.weights[l].setOnes();
      m.biases[l].setOnes();
    }
  }
  return flatten(m);
}

/// {"widths": [...], "activation": "relu"|"tanh", "sigma_w2": f, "sigma_b2": f, "trainable": "all"|"last"}
inline MlpConfig mlp_config_from_json(const nlohmann::json& j, const std::string& where = "mlp") {
  MlpConfig c;
  if (!j.contains("widths")) throw ConfigError(where + ".widths is required");
  c.widths = j.at("widths").get<std::vector<int>>();
  const std::string act = j.value("activation", std::string("relu"));
  if (act == "relu") {
    c.activation = Activation::relu;
  } else if (act == "tanh") {
    c.activation = Activation::tanh;
  } else {
    throw ConfigError(where + ".activation must be 'relu' or 'tanh'");
  }
  c.sigma_w2 = j.value("sigma_w2", 2.0);
  c.sigma_b2 = j.value("sigma_b2", 0.01);
  const std::string scope = j.value("trainable", std::string("all"));
  if (scope == "all") {
    c.trainable = TrainableScope::all;
  } else if (scope == "last") {
    c.trainable = TrainableScope::last_layer;
  } else {
    throw ConfigError(where + ".trainable must be 'all' or 'last'");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

inline nlohmann::json mlp_config_to_json(const MlpConfig& c) {
  return {{"widths", c.widths},
          {"activation", c.activation == Activation::relu ? "relu" : "tanh"},
          {"sigma_w2", c.sigma_w2},
          {"sigma_b2", c.sigma_b2},
          {"trainable", c.trainable == TrainableScope::all ? "all" : "last"}};
}

}  // namespace ick

#endif  // ICK_NN_HPP
