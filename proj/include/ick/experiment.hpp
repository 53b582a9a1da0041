#ifndef ICK_EXPERIMENT_HPP
#define ICK_EXPERIMENT_HPP

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "ick/data.hpp"
#include "ick/ensemble.hpp"
#include "ick/kernels.hpp"
#include "ick/latentmap.hpp"
#include "ick/metrics.hpp"
#include "ick/model.hpp"

namespace ick {

// 1-D periodic task: ensemble posterior vs exact GP ------------------------------------

struct PeriodicGpSettings {
  Eigen::Index n_train = 40;
  double x_lo = -5.0, x_hi = 5.0;
  Eigen::Index n_grid = 100;
  double grid_lo = -5.5, grid_hi = 5.5;
  double noise = 1e-4;  ///< variance of the target noise, also used by the exact posterior
  int hidden = 256;
  int p = 16;
  double period = 2.0 * std::numbers::pi;
  double lengthscale = 1.0;
  double sigma_w2 = 2.0;
  int members = 100;
  TrainConfig train;
  std::uint64_t seed = 0;
  int threads = 1;

  PeriodicGpSettings() {
    train.optimizer = OptimizerKind::sgd;
    train.lr = 1e-3;
    train.momentum = 0.9;
    train.weight_decay = 0.0;
    train.batch_size = 40;
    train.epochs = 2000;
  }
};

/// NN(x) widths {1, H, p} with sigma_b^2 = sigma_w^2 / H, times a frozen ExpSineSquared Nystrom map
/// whose inducing points cover one period.
inline IckModel periodic_gp_template(const PeriodicGpSettings& s, Rng& rng) {
  IckModel m;
  NnBranch nn;
  nn.source = 0;
  nn.config.widths = {1, s.hidden, s.p};
  nn.config.sigma_w2 = s.sigma_w2;
  nn.config.sigma_b2 = s.sigma_w2 / s.hidden;
  nn.params = mlp_init(nn.config, rng);
  m.branches.emplace_back(std::move(nn));
  KernelBranch kb;
  const Matrix ind = Vector::LinSpaced(s.p, 0.0, s.period * (s.p - 1) / s.p);
  kb.map = NystromMap(KernelSpec::periodic(1), periodic_params(1.0, s.lengthscale, s.period), 1, ind);
  kb.trainable = false;
  m.branches.emplace_back(std::move(kb));
  return m;
}

inline Inputs periodic_inputs(const Vector& x) { return Inputs({Matrix(x), Matrix(x)}); }

struct PeriodicGpResult {
  Dataset train;
  Vector grid;
  Matrix predictions;  ///< members x grid
  GpPosterior oracle;
};

/// y = sin(x) + noise on uniform x; the ensemble is trained with the NNGP strategy.
inline PeriodicGpResult run_periodic_gp(const PeriodicGpSettings& s) {
  PeriodicGpResult r;
  Rng rng(s.seed);
  r.train.x = uniform_inputs({{s.x_lo, s.x_hi, 1}}, s.n_train, rng);
  const Vector x = r.train.x.source(0).col(0);
  r.train.x = periodic_inputs(x);
  r.train.y = x.array().sin().matrix();
  for (Eigen::Index i = 0; i < x.size(); ++i) r.train.y(i) += std::sqrt(s.noise) * rng.normal();
  r.grid = Vector::LinSpaced(s.n_grid, s.grid_lo, s.grid_hi);

  const IckModel templ = periodic_gp_template(s, rng);
  EnsembleConfig ec;
  ec.members = s.members;
  ec.train = s.train;
  ec.strategy = InitStrategy::nngp;
  ec.base_seed = s.seed * 100003 + 17;
  ec.threads = s.threads;
  const std::vector<IckModel> members = train_ensemble(templ, r.train.x, r.train.y, ec);
  const Inputs g = periodic_inputs(r.grid);
  r.predictions = ensemble_predictions(members, g);
  r.oracle = gp_exact_posterior(ick_prior_kernel(templ, r.train.x, r.train.x),
                                ick_prior_kernel(templ, g, r.train.x), ick_prior_kernel(templ, g, g), r.train.y,
                                s.noise);
  return r;
}

/// Mean over the grid of the 1-D W1 distance between the first `count` member predictions and
/// `count` seeded draws from the exact marginal N(mu_i, sigma_i^2).
inline double posterior_w1(const Matrix& predictions, const GpPosterior& oracle, int count, std::uint64_t seed) {
  if (count < 1 || count > predictions.rows()) throw ConfigError("posterior_w1: count out of range");
  const Vector sd = oracle.stddev();
  Rng rng(seed);
  double total = 0.0;
  for (Eigen::Index j = 0; j < predictions.cols(); ++j) {
    Vector draws(count);
    for (int k = 0; k < count; ++k) draws(k) = oracle.mean(j) + sd(j) * rng.normal();
    total += empirical_w1(predictions.col(j).head(count), draws);
  }
  return total / static_cast<double>(predictions.cols());
}

// Periodic classification toy ----------------------------------------------------------

/// One ICK model per class: NN on x0 times a periodic (T = 2 pi) Nystrom map on x1.
inline IckModel periodic_class_model(const Inputs& x, int hidden, int p, Rng& rng) {
  const nlohmann::json j = {
      {"p", p},
      {"branches",
       {{{"type", "nn"}, {"source", 0}, {"mlp", {{"hidden", {hidden}}}}},
        {{"type", "kernel"},
         {"source", 1},
         {"kernel", {{"type", "periodic"}, {"params", {{"lengthscale", 1.0}, {"period", 2.0 * std::numbers::pi}}}}},
         {"map", {{"method", "nystrom"}, {"p", p}}}}}}};
  return build_model(j, x, rng);
}

inline double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size() || truth.empty()) throw ShapeMismatch("accuracy: label vectors differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// Reconstruction sweep over p --------------------------------------------------------------

struct SweepRow {
  int p = 0;
  std::uint64_t seed = 0;
  std::string method;
  double max_abs = 0.0;
  double frobenius_rel = 0.0;
  double wall_time = 0.0;  ///< seconds; excluded from anything that must be reproducible
};

struct SweepSettings {
  KernelWithParams kernel{KernelSpec::rbf(0), rbf_params(1.0, 0.3)};
  Eigen::Index n = 64;
  double lo = 0.0, hi = 2.0;
  std::vector<int> ps{2, 4, 8, 16, 32};
  int repeats = 5;
  LatentMapConfig::Method method = LatentMapConfig::Method::nystrom;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// One row per (p, seed): inputs x ~ U[lo, hi] drawn from Rng(seed + r), evenly spaced inducing points.
inline std::vector<SweepRow> sweep_reconstruction(const SweepSettings& s) {
  if (s.repeats < 1 || s.ps.empty()) throw ConfigError("sweep needs at least one p and one repeat");
  const std::size_t cells = s.ps.size() * static_cast<std::size_t>(s.repeats);
  std::vector<SweepRow> rows(cells);
  detail::parallel_for(cells, s.threads, [&](std::size_t c) {
    const int p = s.ps[c / static_cast<std::size_t>(s.repeats)];
    const std::uint64_t seed = s.seed + c % static_cast<std::size_t>(s.repeats);
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(seed);
    const Inputs x = uniform_inputs({{s.lo, s.hi, 1}}, s.n, rng);
    LatentMapConfig lc;
    lc.method = s.method;
    lc.p = p;
    lc.seed = seed;
    const LatentMap map = make_latent_map(s.kernel.spec, s.kernel.params, 0, lc, x.source(0));
    const Matrix z = latent_forward(map, x).z;
    const ReconError e = kernel_recon_error(kernel_matrix(s.kernel.spec, s.kernel.params, x, x), z.transpose() * z);
    SweepRow& row = rows[c];
    row.p = p;
    row.seed = seed;
    row.method = s.method == LatentMapConfig::Method::nystrom ? "nystrom" : "rff";
    row.max_abs = e.max_abs;
    row.frobenius_rel = e.frobenius_rel;
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return rows;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Median relative Frobenius error for each p, in the order of `ps`.
inline std::vector<double> sweep_medians(const std::vector<SweepRow>& rows, const std::vector<int>& ps) {
  std::vector<double> out;
  for (int p : ps) {
    std::vector<double> v;
    for (const SweepRow& r : rows) {
      if (r.p == p) v.push_back(r.frobenius_rel);
    }
    out.push_back(median(v));
  }
  return out;
}

// Config-driven runs --------------------------------------------------------------------

/// metrics.json body plus every other artifact, keyed by path relative to the output directory.
struct RunOutput {
  MetricReport report;
  nlohmann::json config;
  std::map<std::string, std::string> files;
};

namespace detail {

inline const nlohmann::json& block(const nlohmann::json& cfg, const std::string& key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!cfg.contains(key)) return empty;
  if (!cfg.at(key).is_object()) throw ConfigError(key + " must be an object");
  return cfg.at(key);
}

template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

/// Columns of equal length written with full precision.
inline std::string table_csv(const std::vector<std::string>& header, const std::vector<Vector>& cols) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << "\n";
  const Eigen::Index n = cols.empty() ? 0 : cols.front().size();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c](i);
    out << "\n";
  }
  return out.str();
}

/// Input columns of a dataset followed by extra named columns.
inline std::string predictions_csv(const Dataset& d, const std::vector<std::string>& names,
                                   const std::vector<Vector>& extra) {
  std::vector<std::string> header;
  std::vector<Vector> cols;
  const std::vector<SourceInfo> info = d.sources.empty() ? default_source_info(d.x) : d.sources;
  for (std::size_t m = 0; m < info.size(); ++m) {
    for (std::size_t c = 0; c < info[m].columns.size(); ++c) {
      header.push_back(info[m].columns[c]);
      cols.push_back(d.x.source(m).col(static_cast<Eigen::Index>(c)));
    }
  }
  header.insert(header.end(), names.begin(), names.end());
  cols.insert(cols.end(), extra.begin(), extra.end());
  return table_csv(header, cols);
}

inline std::string loss_csv(const std::vector<double>& trace) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss\n";
  for (std::size_t e = 0; e < trace.size(); ++e) out << e + 1 << "," << trace[e] << "\n";
  return out.str();
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

/// data: {"generator": "synthetic_product" | "synthetic_additive" | "gp" | "synth_tanh" | "periodic_classes",
///        "n", "noise", "kernel", "ranges"} or {"csv": path, "schema": {...}}.
inline Dataset make_dataset(const nlohmann::json& data, std::uint64_t seed) {
  if (data.contains("csv")) {
    if (!data.contains("schema")) throw ConfigError("data.schema is required with data.csv");
    return load_csv(detail::field<std::string>(data, "csv", "data", ""), csv_schema_from_json(data.at("schema")));
  }
  const std::string gen = detail::field<std::string>(data, "generator", "data", "synthetic_product");
  const auto n = detail::field<Eigen::Index>(data, "n", "data", 1000);
  if (n < 2) throw ConfigError("data.n must be >= 2");
  Rng rng = Rng(seed).split(0);
  if (gen == "synthetic_product" || gen == "synthetic_additive") {
    const KernelWithParams k = synthetic_kernel(gen == "synthetic_additive");
    return gen_gp_dataset(k.spec, k.params, synthetic_ranges(), n, detail::field(data, "noise", "data", kSyntheticNoise),
                          rng);
  }
  if (gen == "gp") {
    if (!data.contains("kernel") || !data.contains("ranges")) {
      throw ConfigError("data.kernel and data.ranges are required for the gp generator");
    }
    std::vector<SourceRange> ranges;
    for (const auto& r : data.at("ranges")) {
      ranges.push_back({detail::field(r, "lo", "data.ranges", 0.0), detail::field(r, "hi", "data.ranges", 1.0),
                        detail::field(r, "dims", "data.ranges", 1)});
    }
    const KernelWithParams k = kernel_from_json(data.at("kernel"), "data.kernel");
    return gen_gp_dataset(k.spec, k.params, ranges, n, detail::field(data, "noise", "data", kSyntheticNoise), rng);
  }
  if (gen == "synth_tanh") return gen_synth_tanh(n, detail::field(data, "noise", "data", 0.0), rng);
  if (gen == "periodic_classes") return gen_periodic_classes(n, rng);
  throw ConfigError("data.generator '" + gen + "' is unknown");
}

inline SplitSpec resolved_split(const nlohmann::json& cfg, std::uint64_t seed) {
  const nlohmann::json& j = detail::block(cfg, "split");
  SplitSpec s = split_spec_from_json(j);
  if (!j.contains("seed")) s.seed = seed;
  return s;
}

inline TrainConfig resolved_train(const nlohmann::json& cfg, std::uint64_t seed) {
  const nlohmann::json& j = detail::block(cfg, "train");
  TrainConfig t = train_config_from_json(j);
  if (!j.contains("seed")) t.seed = seed;
  return t;
}

/// Evaluation partition: test, else validation, else train (flagged).
inline const Dataset& eval_part(const SplitResult& parts, MetricReport& report) {
  for (const std::string& w : parts.warnings) report.flags.push_back(w);
  if (parts.train.size() == 0) throw ConfigError("split leaves the training partition empty");
  if (parts.test.size() > 0) return parts.test;
  if (parts.val.size() > 0) {
    report.flags.push_back("evaluated_on:val");
    return parts.val;
  }
  report.flags.push_back("evaluated_on:train");
  return parts.train;
}

inline void add_regression(MetricReport& report, const Vector& y, const Vector& yhat, const std::string& prefix = "") {
  const RegressionErrors e = regression_errors(y, yhat);
  report.set(prefix + "rmse", e.rmse);
  report.set(prefix + "mae", e.mae);
  const SpearmanResult s = spearman(y, yhat);
  report.set(prefix + "spearman", s.value);
  if (s.degenerate) report.flags.push_back(prefix + "spearman:degenerate");
}

inline RunOutput run_gen(const nlohmann::json& cfg, std::uint64_t seed) {
  RunOutput out;
  out.config = {{"data", detail::block(cfg, "data")}};
  const Dataset d = make_dataset(detail::block(cfg, "data"), seed);
  out.files["data.csv"] = dataset_to_csv(d);
  out.report.set("n", static_cast<double>(d.size()));
  out.report.set("y_mean", d.y.mean());
  out.report.set("y_std", std::sqrt((d.y.array() - d.y.mean()).square().mean()));
  out.report.meta["sources"] = static_cast<int>(d.x.num_sources());
  return out;
}

/// Single ICK model; with a "baseline" block also a plain MLP on the concatenated sources.
inline RunOutput run_train(const nlohmann::json& cfg, std::uint64_t seed) {
  RunOutput out;
  const Dataset d = make_dataset(detail::block(cfg, "data"), seed);
  const SplitSpec sp = resolved_split(cfg, seed);
  const TrainConfig tc = resolved_train(cfg, seed);
  const SplitResult parts = split(d, sp);
  const Dataset& eval = eval_part(parts, out.report);

  Rng init = Rng(seed).split(1);
  IckModel model = build_model(detail::block(cfg, "model"), parts.train.x, init);
  const TrainResult tr = train(model, parts.train.x, parts.train.y, tc);
  const Vector yhat = ick_forward(model, eval.x);
  add_regression(out.report, eval.y, yhat);
  add_regression(out.report, parts.train.y, ick_forward(model, parts.train.x), "train_");
  out.report.set("final_loss", tr.loss_trace.back());
  out.files["checkpoint.json"] = detail::dump(model_to_json(model));
  out.files["loss.csv"] = detail::loss_csv(tr.loss_trace);
  std::vector<std::string> names{"y", "yhat"};
  std::vector<Vector> cols{eval.y, yhat};

  out.config = {{"data", detail::block(cfg, "data")},
                {"split", cfg.value("split", nlohmann::json::object())},
                {"model", detail::block(cfg, "model")},
                {"train", train_config_to_json(tc)}};
  if (cfg.contains("baseline")) {
    const nlohmann::json& b = detail::block(cfg, "baseline");
    const auto hidden = detail::field<std::vector<int>>(b, "hidden", "baseline", {64, 64});
    const Inputs cat = parts.train.x.concatenated();
    Rng binit = Rng(seed).split(2);
    IckModel mlp = build_model({{"p", 1}, {"branches", {{{"type", "nn"}, {"source", 0}, {"mlp", {{"hidden", hidden}}}}}}},
                               cat, binit);
    train(mlp, cat, parts.train.y, tc);
    const Vector bhat = ick_forward(mlp, eval.x.concatenated());
    add_regression(out.report, eval.y, bhat, "baseline_");
    out.files["baseline_checkpoint.json"] = detail::dump(model_to_json(mlp));
    names.push_back("baseline_yhat");
    cols.push_back(bhat);
    out.config["baseline"] = {{"hidden", hidden}};
  }
  out.files["predictions.csv"] = detail::predictions_csv(eval, names, cols);
  return out;
}

inline RunOutput run_ensemble(const nlohmann::json& cfg, std::uint64_t seed, int threads) {
  RunOutput out;
  const Dataset d = make_dataset(detail::block(cfg, "data"), seed);
  const SplitSpec sp = resolved_split(cfg, seed);
  const TrainConfig tc = resolved_train(cfg, seed);
  const nlohmann::json& ej = detail::block(cfg, "ensemble");
  EnsembleConfig ec = ensemble_config_from_json(ej, tc);
  if (!ej.contains("base_seed")) ec.base_seed = seed;
  ec.threads = threads;
  const double floor = detail::field(detail::block(cfg, "metrics"), "variance_floor", "metrics", kDefaultVarianceFloor);

  const SplitResult parts = split(d, sp);
  const Dataset& eval = eval_part(parts, out.report);
  Rng init = Rng(seed).split(1);
  const IckModel templ = build_model(detail::block(cfg, "model"), parts.train.x, init);
  std::vector<TrainResult> traces;
  const std::vector<IckModel> members = train_ensemble(templ, parts.train.x, parts.train.y, ec, &traces);
  const Matrix preds = ensemble_predictions(members, eval.x);
  const EnsembleStats st = ensemble_stats(preds);
  add_regression(out.report, eval.y, st.mean);
  const MsllResult ms = msll(eval.y, st.mean, st.var, floor);
  out.report.set("msll", ms.value);
  if (ms.floored > 0) out.report.flags.push_back("msll:variance_floored");
  out.report.set("mean_variance", st.var.mean());
  out.report.set("members", static_cast<double>(members.size()));

  nlohmann::json manifest;
  manifest["ensemble"] = ensemble_config_to_json(ec);
  manifest["members"] = nlohmann::json::array();
  for (std::size_t i = 0; i < members.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "members/member_%03zu.json", i);
    out.files[name] = detail::dump(model_to_json(members[i]));
    const RegressionErrors e = regression_errors(eval.y, preds.row(static_cast<Eigen::Index>(i)).transpose());
    manifest["members"].push_back({{"checkpoint", name},
                                   {"seed", ec.base_seed + i},
                                   {"final_loss", traces[i].loss_trace.back()},
                                   {"rmse", e.rmse}});
  }
  manifest["summary"] = out.report.to_json()["metrics"];
  out.files["manifest.json"] = detail::dump(manifest);
  out.files["predictions.csv"] = detail::predictions_csv(eval, {"y", "mu", "var"}, {eval.y, st.mean, st.var});
  out.config = {{"data", detail::block(cfg, "data")},
                {"split", cfg.value("split", nlohmann::json::object())},
                {"model", detail::block(cfg, "model")},
                {"train", train_config_to_json(tc)},
                {"ensemble", ensemble_config_to_json(ec)},
                {"metrics", {{"variance_floor", floor}}}};
  return out;
}

inline RunOutput run_sweep_p(const nlohmann::json& cfg, std::uint64_t seed, int threads) {
  RunOutput out;
  const nlohmann::json& j = detail::block(cfg, "sweep");
  SweepSettings s;
  if (j.contains("kernel")) s.kernel = kernel_from_json(j.at("kernel"), "sweep.kernel");
  s.n = detail::field(j, "n", "sweep", s.n);
  s.lo = detail::field(j, "lo", "sweep", s.lo);
  s.hi = detail::field(j, "hi", "sweep", s.hi);
  s.ps = detail::field(j, "p", "sweep", s.ps);
  s.repeats = detail::field(j, "repeats", "sweep", s.repeats);
  const std::string method = detail::field<std::string>(j, "method", "sweep", "nystrom");
  if (method == "rff") {
    s.method = LatentMapConfig::Method::rff;
  } else if (method != "nystrom") {
    throw ConfigError("sweep.method must be 'nystrom' or 'rff'");
  }
  for (int p : s.ps) {
    if (p < 1 || (s.method == LatentMapConfig::Method::rff && p % 2)) throw ConfigError("sweep.p holds an invalid size");
  }
  if (!(s.lo < s.hi) || s.n < 2) throw ConfigError("sweep needs lo < hi and n >= 2");
  s.seed = seed;
  s.threads = threads;

  const std::vector<SweepRow> rows = sweep_reconstruction(s);
  std::ostringstream csv;
  csv.precision(17);
  csv << "p,seed,method,max_abs,frobenius_rel,wall_time\n";
  for (const SweepRow& r : rows) {
    csv << r.p << "," << r.seed << "," << r.method << "," << r.max_abs << "," << r.frobenius_rel << "," << r.wall_time
        << "\n";
  }
  out.files["sweep.csv"] = csv.str();
  const std::vector<double> med = sweep_medians(rows, s.ps);
  bool decreasing = true;
  for (std::size_t i = 0; i < med.size(); ++i) {
    out.report.set("frobenius_rel_median_p" + std::to_string(s.ps[i]), med[i]);
    if (i > 0 && !(med[i] < med[i - 1])) decreasing = false;
  }
  out.report.set("strictly_decreasing", decreasing ? 1.0 : 0.0);
  out.config = {{"sweep",
                 {{"kernel", kernel_to_json(s.kernel.spec, s.kernel.params)},
                  {"n", s.n},
                  {"lo", s.lo},
                  {"hi", s.hi},
                  {"p", s.ps},
                  {"repeats", s.repeats},
                  {"method", method}}}};
  return out;
}

/// Eigen-spectrum of a 1-D kernel on a uniform grid, with Nystrom and RFF reconstruction errors at p.
inline RunOutput run_spectrum(const nlohmann::json& cfg, std::uint64_t seed) {
  RunOutput out;
  const nlohmann::json& j = detail::block(cfg, "spectrum");
  KernelWithParams k{KernelSpec::spectral_mixture(2, 0),
                     spectral_mixture_params(Eigen::Vector2d(1.0, 0.5), Eigen::Vector2d(0.05, 0.1),
                                             Eigen::Vector2d(0.5, 2.0))};
  if (j.contains("kernel")) k = kernel_from_json(j.at("kernel"), "spectrum.kernel");
  const auto n = detail::field<Eigen::Index>(j, "n", "spectrum", 50);
  const double lo = detail::field(j, "lo", "spectrum", 0.0), hi = detail::field(j, "hi", "spectrum", 2.0);
  const int head = detail::field(j, "head", "spectrum", 5);
  const int p = detail::field(j, "p", "spectrum", 16);
  if (n < 2 || !(lo < hi) || p < 2 || p % 2) throw ConfigError("spectrum needs n >= 2, lo < hi and an even p >= 2");

  const Inputs x = Inputs::single(0, Vector::LinSpaced(n, lo, hi));
  const Matrix kxx = kernel_matrix(k.spec, k.params, x, x);
  const Vector ev = sym_eigvals(kxx);
  out.report.set("eigen_gap_ratio", eigen_gap_ratio(kxx, head));
  for (const auto method : {LatentMapConfig::Method::nystrom, LatentMapConfig::Method::rff}) {
    LatentMapConfig lc;
    lc.method = method;
    lc.p = p;
    lc.seed = seed;
    const Matrix z = latent_forward(make_latent_map(k.spec, k.params, 0, lc, x.source(0)), x).z;
    const ReconError e = kernel_recon_error(kxx, z.transpose() * z);
    const std::string name = method == LatentMapConfig::Method::nystrom ? "nystrom" : "rff";
    out.report.set(name + "_frobenius_rel", e.frobenius_rel);
    out.report.set(name + "_max_abs", e.max_abs);
  }
  out.files["eigenvalues.csv"] =
      detail::table_csv({"index", "eigenvalue"}, {Vector::LinSpaced(n, 1.0, static_cast<double>(n)), ev});
  out.config = {{"spectrum",
                 {{"kernel", kernel_to_json(k.spec, k.params)},
                  {"n", n},
                  {"lo", lo},
                  {"hi", hi},
                  {"head", head},
                  {"p", p}}}};
  return out;
}

inline PeriodicGpSettings periodic_gp_from_json(const nlohmann::json& cfg, std::uint64_t seed, int threads) {
  const nlohmann::json& j = detail::block(cfg, "compare_gp");
  PeriodicGpSettings s;
  s.n_train = detail::field(j, "n_train", "compare_gp", s.n_train);
  s.x_lo = detail::field(j, "x_lo", "compare_gp", s.x_lo);
  s.x_hi = detail::field(j, "x_hi", "compare_gp", s.x_hi);
  s.n_grid = detail::field(j, "n_grid", "compare_gp", s.n_grid);
  s.grid_lo = detail::field(j, "grid_lo", "compare_gp", s.grid_lo);
  s.grid_hi = detail::field(j, "grid_hi", "compare_gp", s.grid_hi);
  s.noise = detail::field(j, "noise", "compare_gp", s.noise);
  s.hidden = detail::field(j, "hidden", "compare_gp", s.hidden);
  s.p = detail::field(j, "p", "compare_gp", s.p);
  s.period = detail::field(j, "period", "compare_gp", s.period);
  s.lengthscale = detail::field(j, "lengthscale", "compare_gp", s.lengthscale);
  s.sigma_w2 = detail::field(j, "sigma_w2", "compare_gp", s.sigma_w2);
  s.members = detail::field(j, "members", "compare_gp", s.members);
  if (cfg.contains("train")) {
    nlohmann::json t = train_config_to_json(s.train);
    t.update(cfg.at("train"));
    s.train = train_config_from_json(t);
  }
  if (s.n_train < 1 || s.n_grid < 1 || s.hidden < 1 || s.p < 1 || s.members < 1 || !(s.noise >= 0.0) ||
      !(s.x_lo < s.x_hi) || !(s.grid_lo <= s.grid_hi)) {
    throw ConfigError("compare_gp holds an out-of-range setting");
  }
  s.seed = seed;
  s.threads = threads;
  return s;
}

struct PosteriorAgreement {
  double mean_abs_diff = 0.0;
  double sd_within_factor2 = 0.0;  ///< fraction of grid points with sigma_hat / sigma in [1/2, 2]
};

inline PosteriorAgreement posterior_agreement(const Matrix& predictions, const GpPosterior& oracle) {
  const EnsembleStats st = ensemble_stats(predictions);
  const Vector sd = oracle.stddev();
  PosteriorAgreement a;
  a.mean_abs_diff = (st.mean - oracle.mean).cwiseAbs().mean();
  int ok = 0;
  for (Eigen::Index i = 0; i < sd.size(); ++i) {
    const double s = std::sqrt(st.var(i));
    ok += s >= 0.5 * sd(i) && s <= 2.0 * sd(i);
  }
  a.sd_within_factor2 = static_cast<double>(ok) / static_cast<double>(sd.size());
  return a;
}

inline RunOutput run_compare_gp(const nlohmann::json& cfg, std::uint64_t seed, int threads) {
  RunOutput out;
  const PeriodicGpSettings s = periodic_gp_from_json(cfg, seed, threads);
  auto sizes = detail::field<std::vector<int>>(detail::block(cfg, "compare_gp"), "w1_members", "compare_gp",
                                               {10, 50, 100});
  for (int c : sizes) {
    if (c < 1 || c > s.members) throw ConfigError("compare_gp.w1_members entries must lie in [1, members]");
  }
  const PeriodicGpResult r = run_periodic_gp(s);
  const PosteriorAgreement a = posterior_agreement(r.predictions, r.oracle);
  out.report.set("mean_abs_diff", a.mean_abs_diff);
  out.report.set("sd_within_factor2", a.sd_within_factor2);
  for (int c : sizes) out.report.set("w1_members_" + std::to_string(c), posterior_w1(r.predictions, r.oracle, c, seed));
  const EnsembleStats st = ensemble_stats(r.predictions);
  out.files["predictions.csv"] =
      detail::table_csv({"x", "gp_mean", "gp_sd", "ensemble_mean", "ensemble_sd"},
                        {r.grid, r.oracle.mean, r.oracle.stddev(), st.mean, st.var.cwiseSqrt()});
  Dataset tr = r.train;
  tr.x = Inputs({tr.x.source(0)});
  out.files["train.csv"] = dataset_to_csv(tr);
  out.config = {{"compare_gp",
                 {{"n_train", s.n_train},
                  {"x_lo", s.x_lo},
                  {"x_hi", s.x_hi},
                  {"n_grid", s.n_grid},
                  {"grid_lo", s.grid_lo},
                  {"grid_hi", s.grid_hi},
                  {"noise", s.noise},
                  {"hidden", s.hidden},
                  {"p", s.p},
                  {"period", s.period},
                  {"lengthscale", s.lengthscale},
                  {"sigma_w2", s.sigma_w2},
                  {"members", s.members},
                  {"w1_members", sizes}}},
                {"train", train_config_to_json(s.train)}};
  return out;
}

/// One ICK model per class, trained jointly with softmax cross-entropy.
inline RunOutput run_classify(const nlohmann::json& cfg, std::uint64_t seed) {
  RunOutput out;
  nlohmann::json data = detail::block(cfg, "data");
  if (data.empty()) data = {{"generator", "periodic_classes"}, {"n", 1000}};
  const Dataset d = make_dataset(data, seed);
  if (d.labels.empty()) throw ConfigError("classify needs labelled data");
  const int classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  if (classes < 2) throw ConfigError("classify needs at least two classes");
  nlohmann::json tj = {{"lr", 1e-2}, {"batch_size", 50}, {"epochs", 100}, {"weight_decay", 0.0}};
  tj.update(detail::block(cfg, "train"));
  TrainConfig tc = train_config_from_json(tj);
  if (!tj.contains("seed")) tc.seed = seed;
  const SplitSpec sp = resolved_split(cfg, seed);
  const SplitResult parts = split(d, sp);
  const Dataset& eval = eval_part(parts, out.report);

  Rng init = Rng(seed).split(1);
  std::vector<IckModel> models;
  for (int c = 0; c < classes; ++c) {
    models.push_back(cfg.contains("model") ? build_model(detail::block(cfg, "model"), parts.train.x, init)
                                           : periodic_class_model(parts.train.x, 32, 16, init));
  }
  const TrainResult tr = train_classifier(models, parts.train.x, parts.train.labels, tc);
  const std::vector<int> pred = classify_labels(models, eval.x);
  out.report.set("accuracy", accuracy(eval.labels, pred));
  out.report.set("train_accuracy", accuracy(parts.train.labels, classify_labels(models, parts.train.x)));
  out.report.set("final_loss", tr.loss_trace.back());
  const Matrix prob = softmax_rows(classify_scores(models, eval.x));
  std::vector<std::string> names{"label", "predicted"};
  std::vector<Vector> cols{Eigen::Map<const Eigen::VectorXi>(eval.labels.data(), eval.size()).cast<double>(),
                           Eigen::Map<const Eigen::VectorXi>(pred.data(), eval.size()).cast<double>()};
  for (int c = 0; c < classes; ++c) {
    names.push_back("prob_" + std::to_string(c));
    cols.push_back(prob.col(c));
  }
  out.files["predictions.csv"] = detail::predictions_csv(eval, names, cols);
  nlohmann::json ck = nlohmann::json::array();
  for (const IckModel& m : models) ck.push_back(model_to_json(m));
  out.files["checkpoint.json"] = detail::dump({{"classes", ck}});
  out.files["loss.csv"] = detail::loss_csv(tr.loss_trace);
  out.config = {{"data", data},
                {"split", cfg.value("split", nlohmann::json::object())},
                {"model", cfg.value("model", nlohmann::json::object())},
                {"train", train_config_to_json(tc)}};
  return out;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen", "train", "ensemble", "sweep-p", "spectrum", "compare-gp", "classify"};
  return names;
}

/// Dispatches a subcommand; json type errors surface as ConfigError.
inline RunOutput run_command(const std::string& command, const nlohmann::json& cfg, std::uint64_t seed, int threads) {
  if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
  try {
    if (command == "gen") return run_gen(cfg, seed);
    if (command == "train") return run_train(cfg, seed);
    if (command == "ensemble") return run_ensemble(cfg, seed, threads);
    if (command == "sweep-p") return run_sweep_p(cfg, seed, threads);
    if (command == "spectrum") return run_spectrum(cfg, seed);
    if (command == "compare-gp") return run_compare_gp(cfg, seed, threads);
    if (command == "classify") return run_classify(cfg, seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  throw ConfigError("unknown command '" + command + "'");
}

/// metrics.json: command, seed, resolved config, metrics, meta and flags. No timestamps.
inline std::string metrics_json(const std::string& command, std::uint64_t seed, const RunOutput& out) {
  nlohmann::json j = out.report.to_json();
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = out.config;
  return detail::dump(j);
}

/// Writes every artifact atomically, metrics.json last.
inline void write_outputs(const std::filesystem::path& dir, const std::string& command, std::uint64_t seed,
                          const RunOutput& out) {
  for (const auto& [name, text] : out.files) write_text_atomic(dir / name, text);
  write_text_atomic(dir / "metrics.json", metrics_json(command, seed, out));
}

}  // namespace ick

#endif  // ICK_EXPERIMENT_HPP
