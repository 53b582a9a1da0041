#ifndef ICK_MODEL_HPP
#define ICK_MODEL_HPP

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/inputs.hpp"
#include "ick/kernels.hpp"
#include "ick/latentmap.hpp"
#include "ick/linalg.hpp"
#include "ick/nn.hpp"
#include "ick/rng.hpp"

namespace ick {

struct NnBranch {
  std::size_t source = 0;
  MlpConfig config;
  MlpParams params;
};

struct KernelBranch {
  LatentMap map;
  bool trainable = true;  ///< false freezes the kernel hyperparameters

  std::size_t source() const {
    return std::visit([](const auto& m) { return m.source; }, map);
  }
};

using Branch = std::variant<NnBranch, KernelBranch>;

inline std::size_t branch_source(const Branch& b) {
  if (const auto* nn = std::get_if<NnBranch>(&b)) return nn->source;
  return std::get<KernelBranch>(b).source();
}

inline Eigen::Index branch_dim(const Branch& b) {
  if (const auto* nn = std::get_if<NnBranch>(&b)) return nn->config.output_dim();
  return latent_dim(std::get<KernelBranch>(b).map);
}

/// Prediction y = sum_k prod_m z_k^(m) over M branches sharing latent size p.
struct IckModel {
  std::vector<Branch> branches;

  Eigen::Index latent_dim() const { return branches.empty() ? 0 : branch_dim(branches.front()); }

  void validate() const {
    if (branches.empty()) throw ConfigError("model needs at least one branch");
    std::vector<std::size_t> seen;
    for (const Branch& b : branches) {
      if (branch_dim(b) != latent_dim()) {
        throw ConfigError("all branches must output the same latent size p (" + std::to_string(latent_dim()) +
                          " vs " + std::to_string(branch_dim(b)) + ")");
      }
      const std::size_t s = branch_source(b);
      if (std::find(seen.begin(), seen.end(), s) != seen.end()) {
        throw ConfigError("source " + std::to_string(s) + " is claimed by more than one branch");
      }
      seen.push_back(s);
    }
  }
};

// Forward / backward -----------------------------------------------------------

struct BranchCache {
  Matrix z;  ///< p x n
  std::optional<MlpCache> mlp;
  std::optional<LatentCache> latent;
};

struct ForwardCache {
  std::vector<BranchCache> branches;
};

/// Column sums of the elementwise product of the p x n blocks.
inline Vector chained_product(const std::vector<Matrix>& zs) {
  Matrix prod = zs.front();
  for (std::size_t m = 1; m < zs.size(); ++m) prod.array() *= zs[m].array();
  return prod.colwise().sum().transpose();
}

inline Matrix branch_forward(const Branch& b, const Inputs& x, BranchCache* cache) {
  if (const auto* nn = std::get_if<NnBranch>(&b)) {
    MlpCache mc;
    Matrix z = mlp_forward_batch(nn->params, nn->config, x.source(nn->source), cache ? &mc : nullptr);
    if (cache) cache->mlp = std::move(mc);
    return z;
  }
  const auto& kb = std::get<KernelBranch>(b);
  x.source(kb.source());
  LatentCache lc = latent_forward(kb.map, x);
  Matrix z = lc.z;
  if (cache) cache->latent = std::move(lc);
  return z;
}

/// Predictions for a batch (length n). Fills `cache` for a later backward pass.
inline Vector ick_forward(const IckModel& model, const Inputs& x, ForwardCache* cache = nullptr) {
  std::vector<Matrix> zs;
  zs.reserve(model.branches.size());
  if (cache) cache->branches.assign(model.branches.size(), BranchCache{});
  for (std::size_t m = 0; m < model.branches.size(); ++m) {
    zs.push_back(branch_forward(model.branches[m], x, cache ? &cache->branches[m] : nullptr));
    if (cache) cache->branches[m].z = zs.back();
  }
  return chained_product(zs);
}

inline double ick_predict(const IckModel& model, const MultiPoint& x) {
  return ick_forward(model, Inputs::from_point(x))(0);
}

/// Gradient of sum_i dy_i * yhat_i with respect to the flat parameter vector.
inline Vector ick_backward(const IckModel& model, const ForwardCache& cache, const Vector& dy) {
  const std::size_t count = model.branches.size();
  if (cache.branches.size() != count) throw ShapeMismatch("ick_backward: cache from a different model");
  const Eigen::Index n = cache.branches.front().z.cols();
  if (dy.size() != n) throw ShapeMismatch("ick_backward: upstream length differs from batch size");

  std::vector<Vector> parts;
  parts.reserve(count);
  for (std::size_t m = 0; m < count; ++m) {
    Matrix others = Matrix::Ones(cache.branches[m].z.rows(), n);
    for (std::size_t o = 0; o < count; ++o) {
      if (o != m) others.array() *= cache.branches[o].z.array();
    }
    const Matrix dz = others * dy.asDiagonal();
    const Branch& b = model.branches[m];
    if (const auto* nn = std::get_if<NnBranch>(&b)) {
      parts.push_back(flatten(mlp_backward(nn->params, *cache.branches[m].mlp, dz)));
    } else {
      const auto& kb = std::get<KernelBranch>(b);
      if (kb.trainable) {
        parts.push_back(latent_vjp(kb.map, *cache.branches[m].latent, dz));
      } else {
        parts.push_back(Vector::Zero(latent_params(kb.map).size()));
      }
    }
  }
  return concat_params(parts);
}

// Flat parameter views ------------------------------------------------------------

inline Vector model_params(const IckModel& model) {
  std::vector<Vector> parts;
  for (const Branch& b : model.branches) {
    if (const auto* nn = std::get_if<NnBranch>(&b)) {
      parts.push_back(flatten(nn->params));
    } else {
      parts.push_back(latent_params(std::get<KernelBranch>(b).map));
    }
  }
  return concat_params(parts);
}

inline void set_model_params(IckModel& model, const Vector& flat) {
  Eigen::Index at = 0;
  for (Branch& b : model.branches) {
    if (auto* nn = std::get_if<NnBranch>(&b)) {
      const Eigen::Index len = nn->params.size();
      if (at + len > flat.size()) throw ShapeMismatch("set_model_params: vector too short");
      unflatten(flat.segment(at, len), nn->params);
      at += len;
    } else {
      KernelParams& theta = latent_params(std::get<KernelBranch>(b).map);
      if (at + theta.size() > flat.size()) throw ShapeMismatch("set_model_params: vector too short");
      theta = flat.segment(at, theta.size());
      at += theta.size();
    }
  }
  if (at != flat.size()) throw ShapeMismatch("set_model_params: vector too long");
}

/// 1 for parameters the optimizer may move.
inline Vector model_trainable_mask(const IckModel& model) {
  std::vector<Vector> parts;
  for (const Branch& b : model.branches) {
    if (const auto* nn = std::get_if<NnBranch>(&b)) {
      parts.push_back(scope_mask(nn->config, nn->params));
    } else {
      const auto& kb = std::get<KernelBranch>(b);
      parts.push_back(kb.trainable ? trainable_mask(latent_kernel(kb.map))
                                   : Vector::Zero(latent_params(kb.map).size()));
    }
  }
  return concat_params(parts);
}

/// 1 on NN weight matrices only; biases and kernel hyperparameters are not decayed.
inline Vector model_decay_mask(const IckModel& model) {
  std::vector<Vector> parts;
  for (const Branch& b : model.branches) {
    if (const auto* nn = std::get_if<NnBranch>(&b)) {
      parts.push_back(weight_mask(nn->params));
    } else {
      parts.push_back(Vector::Zero(latent_params(std::get<KernelBranch>(b).map).size()));
    }
  }
  return concat_params(parts);
}

// Losses ---------------------------------------------------------------------------

enum class LossKind { mse, mae };

struct LossValue {
  double value = 0.0;
  Vector grad;  ///< d loss / d pred
};

inline LossValue compute_loss(const Vector& pred, const Vector& y, LossKind kind) {
  if (pred.size() != y.size()) throw ShapeMismatch("compute_loss: prediction and target lengths differ");
  if (pred.size() == 0) throw ShapeMismatch("compute_loss: empty batch");
  const double n = static_cast<double>(pred.size());
  const Vector r = pred - y;
  LossValue out;
  if (kind == LossKind::mse) {
    out.value = r.squaredNorm() / n;
    out.grad = 2.0 * r / n;
  } else {
    out.value = r.cwiseAbs().sum() / n;
    out.grad = r.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }) / n;
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& scores) {
  Matrix p = scores.colwise() - scores.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  const Vector sums = p.rowwise().sum();
  return sums.cwiseInverse().asDiagonal() * p;
}

inline Vector softmax(const Vector& scores) { return softmax_rows(scores.transpose()).row(0).transpose(); }

struct CrossEntropy {
  double value = 0.0;
  Matrix grad;  ///< d loss / d scores, n x C
};

/// Mean cross-entropy of integer labels under softmax(scores).
inline CrossEntropy cross_entropy(const Matrix& scores, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != scores.rows()) {
    throw ShapeMismatch("cross_entropy: label count differs from score rows");
  }
  const Eigen::Index n = scores.rows();
  const Matrix shifted = scores.colwise() - scores.rowwise().maxCoeff();
  const Vector log_norm = shifted.array().exp().rowwise().sum().log().matrix();
  CrossEntropy out;
  out.grad = softmax_rows(scores);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = labels[i];
    if (c < 0 || c >= scores.cols()) throw ShapeMismatch("cross_entropy: label out of range");
    out.value -= shifted(i, c) - log_norm(i);
    out.grad(i, c) -= 1.0;
  }
  out.value /= static_cast<double>(n);
  out.grad /= static_cast<double>(n);
  return out;
}

// Optimizers -----------------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  int batch_size = 32;
  int epochs = 100;
  LossKind loss = LossKind::mse;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    }
  }
};

struct OptimizerState {
  Vector m;  ///< momentum buffer (SGD) or first moment (Adam)
  Vector v;  ///< second moment (Adam)
  long step = 0;
};

/// One update with decoupled weight decay: theta -= lr * (direction + wd * decay_mask * theta).
/// Entries with trainable_mask 0 stay fixed.
inline void optimizer_step(OptimizerState& state, Vector& params, const Vector& grads, const TrainConfig& config,
                           const Vector& decay_mask, const Vector& trainable_mask) {
  const Eigen::Index n = params.size();
  if (grads.size() != n || decay_mask.size() != n || trainable_mask.size() != n) {
    throw ShapeMismatch("optimizer_step: parameter, gradient and mask lengths differ");
  }
  if (state.m.size() != n) {
    state.m = Vector::Zero(n);
    state.v = Vector::Zero(n);
    state.step = 0;
  }
  ++state.step;
  Vector direction;
  if (config.optimizer == OptimizerKind::sgd) {
    state.m = config.momentum * state.m + grads;
    direction = state.m;
  } else {
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads;
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    direction = (state.m / c1).array() / ((state.v / c2).array().sqrt() + config.eps);
  }
  direction += config.weight_decay * decay_mask.cwiseProduct(params);
  params -= config.lr * trainable_mask.cwiseProduct(direction);
}

inline void optimizer_step(OptimizerState& state, Vector& params, const Vector& grads, const TrainConfig& config) {
  const Vector ones = Vector::Ones(params.size());
  optimizer_step(state, params, grads, config, ones, ones);
}

// Training ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> loss_trace;  ///< size-weighted mean batch loss, one per epoch
};

namespace detail {

/// Shuffled minibatch loop. `batch_loss(theta, idx, grad)` returns the batch
/// loss and writes its gradient.
template <typename BatchLoss>
TrainResult run_epochs(Vector& theta, const Vector& decay_mask, const Vector& trainable_mask, Eigen::Index n,
                       const TrainConfig& config, BatchLoss&& batch_loss) {
  config.validate();
  if (n < 1) throw ShapeMismatch("train: empty dataset");
  Rng rng(config.seed);
  OptimizerState state;
  TrainResult result;
  Vector grad;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = rng.permutation(static_cast<std::size_t>(n));
    double total = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
      const double loss = batch_loss(theta, idx, grad);
      if (!std::isfinite(loss) || !grad.allFinite()) throw NonFiniteLoss(epoch, batch);
      total += loss * static_cast<double>(idx.size());
      optimizer_step(state, theta, grad, config, decay_mask, trainable_mask);
    }
    result.loss_trace.push_back(total / static_cast<double>(n));
  }
  return result;
}

}  // namespace detail

/// Minibatch training of every trainable parameter. `model` is updated in place.
inline TrainResult train(IckModel& model, const Inputs& x, const Vector& y, const TrainConfig& config) {
  model.validate();
  if (x.size() != y.size()) throw ShapeMismatch("train: inputs and targets differ in length");
  Vector theta = model_params(model);
  const Vector decay = model_decay_mask(model);
  const Vector trainable = model_trainable_mask(model);
  auto batch_loss = [&](const Vector& t, const std::vector<std::size_t>& idx, Vector& grad) {
    set_model_params(model, t);
    const Inputs xb = x.rows(idx);
    Vector yb(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) yb(static_cast<Eigen::Index>(i)) = y(idx[i]);
    ForwardCache cache;
    const Vector pred = ick_forward(model, xb, &cache);
    const LossValue loss = compute_loss(pred, yb, config.loss);
    grad = ick_backward(model, cache, loss.grad);
    return loss.value;
  };
  TrainResult result = detail::run_epochs(theta, decay, trainable, x.size(), config, batch_loss);
  set_model_params(model, theta);
  return result;
}

// Classification -----------------------------------------------------------------------

/// Per-class ICK scores, n x C.
inline Matrix classify_scores(const std::vector<IckModel>& models, const Inputs& x) {
  if (models.size() < 2) throw ConfigError("classification needs at least two class models");
  Matrix s(x.size(), static_cast<Eigen::Index>(models.size()));
  for (std::size_t c = 0; c < models.size(); ++c) s.col(static_cast<Eigen::Index>(c)) = ick_forward(models[c], x);
  return s;
}

inline Vector classify_predict(const std::vector<IckModel>& models, const MultiPoint& x) {
  return softmax_rows(classify_scores(models, Inputs::from_point(x))).row(0).transpose();
}

inline std::vector<int> classify_labels(const std::vector<IckModel>& models, const Inputs& x) {
  const Matrix s = classify_scores(models, x);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) s.row(i).maxCoeff(&out[static_cast<std::size_t>(i)]);
  return out;
}

/// Joint training of the C class models under softmax cross-entropy.
inline TrainResult train_classifier(std::vector<IckModel>& models, const Inputs& x, const std::vector<int>& labels,
                                    const TrainConfig& config) {
  if (models.size() < 2) throw ConfigError("classification needs at least two class models");
  if (static_cast<Eigen::Index>(labels.size()) != x.size()) {
    throw ShapeMismatch("train_classifier: inputs and labels differ in length");
  }
  std::vector<Vector> thetas, decays, masks;
  std::vector<Eigen::Index> offsets{0};
  for (IckModel& m : models) {
    m.validate();
    thetas.push_back(model_params(m));
    decays.push_back(model_decay_mask(m));
    masks.push_back(model_trainable_mask(m));
    offsets.push_back(offsets.back() + thetas.back().size());
  }
  Vector theta = concat_params(thetas);
  auto unpack = [&](const Vector& t) {
    for (std::size_t c = 0; c < models.size(); ++c) {
      set_model_params(models[c], t.segment(offsets[c], offsets[c + 1] - offsets[c]));
    }
  };
  auto batch_loss = [&](const Vector& t, const std::vector<std::size_t>& idx, Vector& grad) {
    unpack(t);
    const Inputs xb = x.rows(idx);
    std::vector<int> lb;
    lb.reserve(idx.size());
    for (std::size_t i : idx) lb.push_back(labels[i]);
    const std::size_t classes = models.size();
    std::vector<ForwardCache> caches(classes);
    Matrix scores(xb.size(), static_cast<Eigen::Index>(classes));
    for (std::size_t c = 0; c < classes; ++c) {
      scores.col(static_cast<Eigen::Index>(c)) = ick_forward(models[c], xb, &caches[c]);
    }
    const CrossEntropy ce = cross_entropy(scores, lb);
    std::vector<Vector> parts;
    for (std::size_t c = 0; c < classes; ++c) {
      parts.push_back(ick_backward(models[c], caches[c], ce.grad.col(static_cast<Eigen::Index>(c))));
    }
    grad = concat_params(parts);
    return ce.value;
  };
  TrainResult result =
      detail::run_epochs(theta, concat_params(decays), concat_params(masks), x.size(), config, batch_loss);
  unpack(theta);
  return result;
}

// JSON ---------------------------------------------------------------------------------

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else if (opt == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else {
    throw ConfigError("train.optimizer must be 'adam' or 'sgd'");
  }
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  const std::string loss = j.value("loss", std::string("mse"));
  if (loss == "mse") {
    c.loss = LossKind::mse;
  } else if (loss == "mae") {
    c.loss = LossKind::mae;
  } else {
    throw ConfigError("train.loss must be 'mse' or 'mae'");
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"loss", c.loss == LossKind::mse ? "mse" : "mae"},
          {"seed", c.seed}};
}

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                               const std::string& where) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) throw SchemaError(where + ": wrong row count");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw SchemaError(where + ": wrong column count in row " + std::to_string(r));
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j, Eigen::Index size, const std::string& where) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != size) throw SchemaError(where + ": wrong length");
  return Eigen::Map<const Vector>(v.data(), size);
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Kernel leaves inside a branch read the branch's source unless they say otherwise.
inline void default_source(nlohmann::json& j, std::size_t source) {
  if (!j.is_object()) return;
  if (j.contains("children")) {
    for (auto& c : j["children"]) default_source(c, source);
  } else if (!j.contains("source")) {
    j["source"] = source;
  }
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

/// Full model state: architecture, every parameter, and the feature-map randomness.
inline nlohmann::json model_to_json(const IckModel& model) {
  nlohmann::json branches = nlohmann::json::array();
  for (const Branch& b : model.branches) {
    nlohmann::json jb;
    if (const auto* nn = std::get_if<NnBranch>(&b)) {
      jb["type"] = "nn";
      jb["source"] = nn->source;
      jb["mlp"] = mlp_config_to_json(nn->config);
      nlohmann::json layers = nlohmann::json::array();
      for (std::size_t l = 0; l < nn->params.weights.size(); ++l) {
        layers.push_back({{"W", detail::matrix_to_json(nn->params.weights[l])},
                          {"b", detail::to_std(nn->params.biases[l])}});
      }
      jb["layers"] = std::move(layers);
    } else {
      const auto& kb = std::get<KernelBranch>(b);
      jb["type"] = "kernel";
      jb["source"] = kb.source();
      jb["trainable"] = kb.trainable;
      jb["kernel"] = kernel_to_json(latent_kernel(kb.map), latent_params(kb.map));
      jb["theta"] = detail::to_std(latent_params(kb.map));
      if (const auto* ny = std::get_if<NystromMap>(&kb.map)) {
        jb["map"] = {{"method", "nystrom"}, {"inducing", detail::matrix_to_json(ny->inducing)}};
      } else {
        const auto& rf = std::get<RffMap>(kb.map);
        jb["map"] = {{"method", "rff"},
                     {"half_dim", rf.half_dim},
                     {"input_dim", rf.base_normals.cols()},
                     {"seed", rf.seed}};
      }
    }
    branches.push_back(std::move(jb));
  }
  return {{"version", kCheckpointVersion}, {"branches", std::move(branches)}};
}

inline IckModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.value("version", 0) != kCheckpointVersion) throw SchemaError("unsupported checkpoint version");
    IckModel model;
    std::size_t index = 0;
    for (const auto& jb : j.at("branches")) {
      const std::string where = "branches[" + std::to_string(index++) + "]";
      const std::string type = jb.at("type").get<std::string>();
      const auto source = jb.at("source").get<std::size_t>();
      if (type == "nn") {
        NnBranch nn;
        nn.source = source;
        nn.config = mlp_config_from_json(jb.at("mlp"), where + ".mlp");
        const auto& layers = jb.at("layers");
        if (layers.size() != nn.config.num_layers()) throw SchemaError(where + ": layer count differs from widths");
        for (std::size_t l = 0; l < layers.size(); ++l) {
          const int out = nn.config.widths[l + 1], in = nn.config.widths[l];
          nn.params.weights.push_back(detail::matrix_from_json(layers[l].at("W"), out, in, where + ".W"));
          nn.params.biases.push_back(detail::vector_from_json(layers[l].at("b"), out, where + ".b"));
        }
        model.branches.emplace_back(std::move(nn));
      } else if (type == "kernel") {
        const KernelWithParams kp = kernel_from_json(jb.at("kernel"), where + ".kernel");
        const Vector theta = detail::vector_from_json(jb.at("theta"), kp.params.size(), where + ".theta");
        const auto& jm = jb.at("map");
        KernelBranch kb;
        kb.trainable = jb.value("trainable", true);
        if (jm.at("method") == "nystrom") {
          const auto& rows = jm.at("inducing");
          const Eigen::Index p = static_cast<Eigen::Index>(rows.size());
          const Eigen::Index d = p > 0 ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
          kb.map = NystromMap(kp.spec, theta, source, detail::matrix_from_json(rows, p, d, where + ".inducing"));
        } else {
          kb.map = RffMap(kp.spec, theta, source, jm.at("input_dim").get<Eigen::Index>(),
                          jm.at("half_dim").get<int>(), jm.at("seed").get<std::uint64_t>());
        }
        model.branches.emplace_back(std::move(kb));
      } else {
        throw SchemaError(where + ".type must be 'nn' or 'kernel'");
      }
    }
    model.validate();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint: ") + e.what());
  }
}

// Construction from an experiment config ------------------------------------------------

/// Builds an untrained model from
/// {"p": int, "branches": [{"type": "nn", "source": m, "mlp": {"hidden": [...], ...}},
///                         {"type": "kernel", "source": m, "kernel": {...}, "map": {...}, "trainable": bool}]}.
/// NN widths are completed as [D_m, hidden..., p]; auto inducing points span `x`.
inline IckModel build_model(const nlohmann::json& j, const Inputs& x, Rng& rng) {
  try {
    if (!j.contains("p")) throw ConfigError("model.p is required");
    const int p = j.at("p").get<int>();
    if (p < 1) throw ConfigError("model.p must be >= 1");
    if (!j.contains("branches") || !j.at("branches").is_array() || j.at("branches").empty()) {
      throw ConfigError("model.branches must be a non-empty list");
    }
    IckModel model;
    std::size_t index = 0;
    for (const auto& jb : j.at("branches")) {
      const std::string where = "model.branches[" + std::to_string(index++) + "]";
      const std::string type = jb.value("type", std::string());
      if (!jb.contains("source")) throw ConfigError(where + ".source is required");
      const auto source = jb.at("source").get<std::size_t>();
      if (!x.has_source(source)) throw ConfigError(where + ".source " + std::to_string(source) + " is not in the data");
      const Matrix& values = x.source(source);
      if (type == "nn") {
        nlohmann::json jm = jb.value("mlp", nlohmann::json::object());
        if (!jm.contains("widths")) {
          std::vector<int> widths{static_cast<int>(values.cols())};
          for (int h : jm.value("hidden", std::vector<int>{})) widths.push_back(h);
          widths.push_back(p);
          jm["widths"] = widths;
          jm.erase("hidden");
        }
        NnBranch nn;
        nn.source = source;
        nn.config = mlp_config_from_json(jm, where + ".mlp");
        if (nn.config.input_dim() != values.cols() || nn.config.output_dim() != p) {
          throw ConfigError(where + ".mlp.widths must start at the source width and end at p");
        }
        nn.params = mlp_init(nn.config, rng);
        model.branches.emplace_back(std::move(nn));
      } else if (type == "kernel") {
        nlohmann::json jmap = jb.value("map", nlohmann::json::object());
        if (!jmap.contains("p")) jmap["p"] = p;
        const LatentMapConfig mc = latent_config_from_json(jmap, where + ".map");
        // spectral-mixture means default to the band resolvable on the inducing grid
        std::optional<FrequencyRange> band;
        if (values.cols() == 1 && values.rows() > 0) {
          const double span = values.maxCoeff() - values.minCoeff();
          if (span > 0.0) band = FrequencyRange{1.0 / span, 0.5 * (mc.p - 1) / span};
        }
        if (!jb.contains("kernel")) throw ConfigError(where + ".kernel is required");
        nlohmann::json jk = jb.at("kernel");
        detail::default_source(jk, source);
        const KernelWithParams kp = kernel_from_json(jk, where + ".kernel", band);
        KernelBranch kb;
        kb.map = make_latent_map(kp.spec, kp.params, source, mc, values);
        kb.trainable = jb.value("trainable", true);
        model.branches.emplace_back(std::move(kb));
      } else {
        throw ConfigError(where + ".type must be 'nn' or 'kernel'");
      }
    }
    model.validate();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

}  // namespace ick

#endif  // ICK_MODEL_HPP
