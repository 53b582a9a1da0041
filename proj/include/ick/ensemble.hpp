#ifndef ICK_ENSEMBLE_HPP
#define ICK_ENSEMBLE_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ick/errors.hpp"
#include "ick/kernels.hpp"
#include "ick/linalg.hpp"
#include "ick/model.hpp"
#include "ick/nn.hpp"
#include "ick/rng.hpp"

namespace ick {

namespace detail {

/// Runs fn(i) for i in [0, count) on up to `threads` workers; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

enum class InitStrategy { nngp, free };

struct EnsembleConfig {
  int members = 1;
  TrainConfig train;
  InitStrategy strategy = InitStrategy::nngp;
  std::uint64_t base_seed = 0;
  int threads = 1;

  void validate() const {
    if (members < 1) throw ConfigError("ensemble.members must be >= 1");
    train.validate();
  }
};

/// Fresh NN parameters for every NN branch; kernel branches are left as they are.
inline void reinitialize(IckModel& model, Rng& rng) {
  for (Branch& b : model.branches) {
    if (auto* nn = std::get_if<NnBranch>(&b)) nn->params = mlp_init(nn->config, rng);
  }
}

inline void set_trainable_scope(IckModel& model, TrainableScope scope) {
  for (Branch& b : model.branches) {
    if (auto* nn = std::get_if<NnBranch>(&b)) nn->config.trainable = scope;
  }
}

/// Member i is initialized and shuffled with seed base_seed + i. Output order is member order.
inline std::vector<IckModel> train_ensemble(const IckModel& templ, const Inputs& x, const Vector& y,
                                            const EnsembleConfig& config,
                                            std::vector<TrainResult>* traces = nullptr) {
  config.validate();
  templ.validate();
  const auto count = static_cast<std::size_t>(config.members);
  std::vector<IckModel> members(count, templ);
  std::vector<TrainResult> results(count);
  detail::parallel_for(count, config.threads, [&](std::size_t i) {
    const std::uint64_t seed = config.base_seed + i;
    IckModel& m = members[i];
    set_trainable_scope(m, config.strategy == InitStrategy::nngp ? TrainableScope::last_layer : TrainableScope::all);
    Rng rng(seed);
    reinitialize(m, rng);
    TrainConfig tc = config.train;
    tc.seed = seed;
    results[i] = train(m, x, y, tc);
  });
  if (traces) *traces = std::move(results);
  return members;
}

/// Member predictions, N_e x n.
inline Matrix ensemble_predictions(const std::vector<IckModel>& members, const Inputs& x) {
  if (members.empty()) throw EmptyEnsemble("ensemble has no members");
  Matrix out(static_cast<Eigen::Index>(members.size()), x.size());
  for (std::size_t s = 0; s < members.size(); ++s) out.row(static_cast<Eigen::Index>(s)) = ick_forward(members[s], x);
  return out;
}

struct EnsembleStats {
  Vector mean;
  Vector var;  ///< 1 / N_e convention
};

inline EnsembleStats ensemble_stats(const Matrix& predictions) {
  if (predictions.rows() == 0) throw EmptyEnsemble("ensemble has no members");
  EnsembleStats s;
  s.mean = predictions.colwise().mean().transpose();
  const Matrix centered = predictions.rowwise() - s.mean.transpose();
  s.var = centered.colwise().squaredNorm().transpose() / static_cast<double>(predictions.rows());
  return s;
}

inline EnsembleStats ensemble_stats(const std::vector<IckModel>& members, const Inputs& x) {
  return ensemble_stats(ensemble_predictions(members, x));
}

// Exact GP posterior ---------------------------------------------------------------

struct GpPosterior {
  Vector mean;
  Matrix cov;
  double noise = 0.0;

  Vector stddev() const { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

/// mu = K_sx (K_xx + noise I)^-1 y, Sigma = K_ss - K_sx (K_xx + noise I)^-1 K_xs, by Cholesky solves.
inline GpPosterior gp_exact_posterior(const Matrix& k_xx, const Matrix& k_sx, const Matrix& k_ss, const Vector& y,
                                      double noise) {
  if (!(noise >= 0.0)) throw ConfigError("gp_exact_posterior: noise variance must be non-negative");
  if (k_xx.rows() != y.size() || k_sx.cols() != k_xx.rows() || k_ss.rows() != k_sx.rows()) {
    throw ShapeMismatch("gp_exact_posterior: kernel blocks and targets disagree in shape");
  }
  Matrix a = k_xx;
  a.diagonal().array() += noise;
  const Matrix l = cholesky(a).lower;
  const Matrix w = triangular_solve(l, y);
  const Matrix alpha = triangular_solve(l, w, Triangle::upper_transposed);
  const Matrix v = triangular_solve(l, k_sx.transpose());
  GpPosterior post;
  post.noise = noise;
  post.mean = k_sx * alpha;
  post.cov = k_ss - v.transpose() * v;
  post.cov = 0.5 * (post.cov + post.cov.transpose()).eval();
  return post;
}

inline GpPosterior gp_exact_posterior(const KernelSpec& spec, const KernelParams& params, const Inputs& x_train,
                                      const Vector& y, const Inputs& x_test, double noise) {
  return gp_exact_posterior(kernel_matrix(spec, params, x_train, x_train),
                            kernel_matrix(spec, params, x_test, x_train),
                            kernel_matrix(spec, params, x_test, x_test), y, noise);
}

/// Which K^(2) the oracle uses: the kernel itself, or the one implied by the latent map (Z_a^T Z_b).
enum class KernelView { exact, latent };

/// Prior covariance implied by an ICK model at infinite NN width:
/// prod over NN branches of K_NNGP, times the kernel-branch factor.
inline Matrix ick_prior_kernel(const IckModel& model, const Inputs& a, const Inputs& b,
                               KernelView view = KernelView::exact) {
  model.validate();
  Matrix nn_part = Matrix::Ones(a.size(), b.size());
  std::vector<const KernelBranch*> kernels;
  for (const Branch& br : model.branches) {
    if (const auto* nn = std::get_if<NnBranch>(&br)) {
      nn_part.array() *= nngp_relu_matrix(nn->config, a.source(nn->source), b.source(nn->source)).array();
    } else {
      kernels.push_back(&std::get<KernelBranch>(br));
    }
  }
  Matrix k_part;
  if (kernels.empty()) {
    k_part = Matrix::Constant(a.size(), b.size(), static_cast<double>(model.latent_dim()));
  } else if (view == KernelView::exact) {
    if (kernels.size() > 1) throw ConfigError("exact prior kernel needs at most one kernel branch");
    const LatentMap& map = kernels.front()->map;
    k_part = kernel_matrix(latent_kernel(map), latent_params(map), a, b);
  } else {
    Matrix za = Matrix::Ones(model.latent_dim(), a.size());
    Matrix zb = Matrix::Ones(model.latent_dim(), b.size());
    for (const KernelBranch* kb : kernels) {
      za.array() *= latent_forward(kb->map, a).z.array();
      zb.array() *= latent_forward(kb->map, b).z.array();
    }
    k_part = za.transpose() * zb;
  }
  return nn_part.cwiseProduct(k_part);
}

// Monte-Carlo prior -----------------------------------------------------------------

struct PriorCovariance {
  Matrix cov;  ///< empirical covariance of yhat over initializations
  Matrix se;   ///< standard error of each entry
  Vector mean;
  int draws = 0;
};

/// Untrained predictions over `draws` fresh NN initializations (draw i uses Rng(seed).split(i)).
inline PriorCovariance prior_covariance_mc(const IckModel& templ, const Inputs& probe, int draws, std::uint64_t seed,
                                           int threads = 1) {
  templ.validate();
  for (const Branch& b : templ.branches) {
    if (const auto* nn = std::get_if<NnBranch>(&b); nn && nn->config.activation != Activation::relu) {
      throw UnsupportedActivation("prior_covariance_mc needs ReLU networks for the analytic comparison");
    }
  }
  if (draws < 1000) throw ConfigError("prior_covariance_mc needs at least 1000 draws");
  const Rng root(seed);
  Matrix outs(draws, probe.size());
  detail::parallel_for(static_cast<std::size_t>(draws), threads, [&](std::size_t i) {
    IckModel m = templ;
    Rng rng = root.split(i);
    reinitialize(m, rng);
    outs.row(static_cast<Eigen::Index>(i)) = ick_forward(m, probe).transpose();
  });
  PriorCovariance pc;
  pc.draws = draws;
  pc.mean = outs.colwise().mean().transpose();
  const Matrix centered = outs.rowwise() - pc.mean.transpose();
  const Eigen::Index n = probe.size();
  pc.cov.resize(n, n);
  pc.se.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const Vector prod = centered.col(i).cwiseProduct(centered.col(j));
      const double mu = prod.sum() / (draws - 1.0);
      const double sd = std::sqrt((prod.array() - prod.mean()).square().sum() / (draws - 1.0));
      pc.cov(i, j) = pc.cov(j, i) = mu;
      pc.se(i, j) = pc.se(j, i) = sd / std::sqrt(static_cast<double>(draws));
    }
  }
  return pc;
}

// JSON ---------------------------------------------------------------------------------

inline EnsembleConfig ensemble_config_from_json(const nlohmann::json& j, const TrainConfig& train) {
  EnsembleConfig c;
  c.train = train;
  c.members = j.value("members", 1);
  const std::string s = j.value("strategy", std::string("nngp"));
  if (s == "nngp") {
    c.strategy = InitStrategy::nngp;
  } else if (s == "free") {
    c.strategy = InitStrategy::free;
  } else {
    throw ConfigError("ensemble.strategy must be 'nngp' or 'free'");
  }
  c.base_seed = j.value("base_seed", std::uint64_t{0});
  c.validate();
  return c;
}

inline nlohmann::json ensemble_config_to_json(const EnsembleConfig& c) {
  return {{"members", c.members},
          {"strategy", c.strategy == InitStrategy::nngp ? "nngp" : "free"},
          {"base_seed", c.base_seed},
          {"train", train_config_to_json(c.train)}};
}

}  // namespace ick

#endif  // ICK_ENSEMBLE_HPP
