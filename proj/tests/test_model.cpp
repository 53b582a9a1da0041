#include <gtest/gtest.h>

#include <cmath>

#include "ick/model.hpp"
#include "test_util.hpp"

namespace ick {
namespace {

NnBranch make_nn(std::size_t source, int d_in, int p, Activation act, Rng& rng,
                 TrainableScope scope = TrainableScope::all) {
  NnBranch nn;
  nn.source = source;
  nn.config.widths = {d_in, 5, p};
  nn.config.activation = act;
  nn.config.trainable = scope;
  nn.config.sigma_b2 = 0.1;
  nn.params = mlp_init(nn.config, rng);
  return nn;
}

KernelBranch make_nystrom(std::size_t source, const KernelSpec& k, const Vector& theta, int p, Rng& rng) {
  KernelBranch kb;
  Matrix ind = test::random_matrix(p, 1, rng);
  kb.map = NystromMap(k, theta, source, ind);
  return kb;
}

Inputs random_inputs(int n, const std::vector<int>& dims, Rng& rng) {
  std::vector<Matrix> s;
  for (int d : dims) s.push_back(test::random_matrix(n, d, rng));
  return Inputs(std::move(s));
}

// Fixed latent outputs through constant-output networks (zero weights, bias = z).
NnBranch constant_branch(std::size_t source, const Vector& z) {
  NnBranch nn;
  nn.source = source;
  nn.config.widths = {1, static_cast<int>(z.size())};
  nn.params.weights = {Matrix::Zero(z.size(), 1)};
  nn.params.biases = {z};
  return nn;
}

TEST(IckPredict, InnerProductExample) {
  IckModel m;
  m.branches.emplace_back(constant_branch(0, Eigen::Vector2d(1, 2)));
  m.branches.emplace_back(constant_branch(1, Eigen::Vector2d(3, 4)));
  const MultiPoint x{Vector::Zero(1), Vector::Zero(1)};
  EXPECT_DOUBLE_EQ(ick_predict(m, x), 11.0);
}

TEST(IckPredict, ChainedProductExample) {
  IckModel m;
  m.branches.emplace_back(constant_branch(0, Eigen::Vector2d(1, 2)));
  m.branches.emplace_back(constant_branch(1, Eigen::Vector2d(2, 1)));
  m.branches.emplace_back(constant_branch(2, Eigen::Vector2d(1, 1)));
  const MultiPoint x{Vector::Zero(1), Vector::Zero(1), Vector::Zero(1)};
  EXPECT_DOUBLE_EQ(ick_predict(m, x), 4.0);
}

TEST(IckPredict, BatchMatchesScalarAndOrderInvariance) {
  Rng rng(3);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 2, 4, Activation::relu, rng));
  m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 0.7), 4, rng));
  const Inputs x = random_inputs(6, {2, 1}, rng);
  const Vector batch = ick_forward(m, x);
  for (Eigen::Index i = 0; i < x.size(); ++i) EXPECT_EQ(batch(i), ick_predict(m, x.point(i)));

  IckModel swapped;
  swapped.branches = {m.branches[1], m.branches[0]};
  EXPECT_EQ(ick_forward(swapped, x), batch);
}

TEST(IckPredict, MissingSourceAndValidation) {
  Rng rng(4);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 1, 3, Activation::relu, rng));
  m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 3, rng));
  EXPECT_THROW(ick_predict(m, MultiPoint{Vector::Zero(1)}), MissingSource);

  m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 3, rng));
  EXPECT_THROW(m.validate(), ConfigError);
  IckModel bad;
  bad.branches.emplace_back(make_nn(0, 1, 3, Activation::relu, rng));
  bad.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 4, rng));
  EXPECT_THROW(bad.validate(), ConfigError);
}

// End-to-end gradient of sum(u * yhat) against finite differences over every parameter.
void check_end_to_end(IckModel& m, const Inputs& x, Rng& rng, double tol) {
  const Vector upstream = test::random_matrix(x.size(), 1, rng);
  ForwardCache cache;
  ick_forward(m, x, &cache);
  const Vector got = ick_backward(m, cache, upstream);
  const Vector theta = model_params(m);
  const auto probe = [&](const Vector& t) {
    IckModel copy = m;
    set_model_params(copy, t);
    return ick_forward(copy, x).dot(upstream);
  };
  const Vector fd = test::fd_gradient(probe, theta, 1e-6).cwiseProduct(model_trainable_mask(m));
  EXPECT_LE(test::max_rel_err(got, fd), tol);
}

TEST(IckBackward, EndToEndTwoBranches) {
  for (int p : {2, 4}) {
    Rng rng(100 + p);
    IckModel m;
    m.branches.emplace_back(make_nn(0, 2, p, Activation::tanh, rng));
    m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.3, 0.8), p, rng));
    check_end_to_end(m, random_inputs(5, {2, 1}, rng), rng, 1e-4);
  }
}

TEST(IckBackward, EndToEndThreeBranches) {
  for (int p : {2, 4}) {
    Rng rng(200 + p);
    IckModel m;
    m.branches.emplace_back(make_nn(0, 3, p, Activation::relu, rng));
    KernelSpec ess = KernelSpec::periodic(1);
    ess.learn_period = true;
    m.branches.emplace_back(make_nystrom(1, ess, periodic_params(0.9, 1.1, 2.5), p, rng));
    KernelBranch rff;
    rff.map = RffMap(KernelSpec::rbf(2), rbf_params(0.8, 1.2), 2, 1, p / 2, 9);
    m.branches.emplace_back(std::move(rff));
    check_end_to_end(m, random_inputs(5, {3, 1, 1}, rng), rng, 1e-4);
  }
}

TEST(IckBackward, SpectralMixtureAndLastLayerScope) {
  Rng rng(301);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 2, 3, Activation::tanh, rng, TrainableScope::last_layer));
  const Vector sm = spectral_mixture_params(Eigen::Vector2d(0.6, 0.4), Eigen::Vector2d(0.3, 0.5),
                                            Eigen::Vector2d(0.2, 0.7));
  m.branches.emplace_back(make_nystrom(1, KernelSpec::spectral_mixture(2, 1), sm, 3, rng));
  check_end_to_end(m, random_inputs(6, {2, 1}, rng), rng, 1e-4);
}

TEST(IckBackward, FrozenKernelBranchHasZeroGradient) {
  Rng rng(5);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 1, 3, Activation::relu, rng));
  KernelBranch kb = make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 3, rng);
  kb.trainable = false;
  m.branches.emplace_back(std::move(kb));
  const Inputs x = random_inputs(4, {1, 1}, rng);
  ForwardCache cache;
  ick_forward(m, x, &cache);
  const Vector g = ick_backward(m, cache, Vector::Ones(4));
  EXPECT_EQ(g.tail(2).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(model_trainable_mask(m).tail(2).sum(), 0.0);
}

TEST(Loss, ExamplesAndFiniteDifferences) {
  const LossValue zero = compute_loss(Vector::Ones(3), Vector::Ones(3), LossKind::mse);
  EXPECT_EQ(zero.value, 0.0);
  EXPECT_EQ(zero.grad.cwiseAbs().maxCoeff(), 0.0);

  const LossValue two = compute_loss(Vector::Constant(1, 2.0), Vector::Zero(1), LossKind::mse);
  EXPECT_DOUBLE_EQ(two.value, 4.0);
  EXPECT_DOUBLE_EQ(two.grad(0), 4.0);

  Rng rng(6);
  const Vector y = test::random_matrix(7, 1, rng);
  const Vector pred = test::random_matrix(7, 1, rng);
  for (LossKind k : {LossKind::mse, LossKind::mae}) {
    const Vector fd = test::fd_gradient([&](const Vector& q) { return compute_loss(q, y, k).value; }, pred, 1e-7);
    EXPECT_LE(test::max_abs(compute_loss(pred, y, k).grad - fd), 1e-6);
  }
  EXPECT_EQ(compute_loss(Vector::Ones(2), Vector::Ones(2), LossKind::mae).grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(compute_loss(Vector::Ones(2), Vector::Ones(3), LossKind::mse), ShapeMismatch);
}

TEST(Softmax, SymmetryAndOverflow) {
  const Vector u = softmax(Vector::Constant(4, 2.5));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(u(i), 0.25);
  const Vector big = softmax(Eigen::Vector2d(1000.0, 0.0));
  EXPECT_TRUE(big.allFinite());
  EXPECT_NEAR(big(0), 1.0, 1e-15);
  EXPECT_NEAR(big(1), 0.0, 1e-15);

  Rng rng(7);
  const Vector r = softmax(test::random_matrix(6, 1, rng));
  EXPECT_NEAR(r.sum(), 1.0, 1e-12);
}

TEST(Softmax, CrossEntropyGradient) {
  Rng rng(8);
  const Matrix scores = test::random_matrix(5, 3, rng);
  const std::vector<int> labels{0, 2, 1, 1, 0};
  const CrossEntropy ce = cross_entropy(scores, labels);
  const Eigen::Map<const Vector> flat(scores.data(), scores.size());
  const Vector fd = test::fd_gradient(
      [&](const Vector& v) { return cross_entropy(Eigen::Map<const Matrix>(v.data(), 5, 3), labels).value; },
      flat, 1e-6);
  EXPECT_LE(test::max_abs(Eigen::Map<const Vector>(ce.grad.data(), ce.grad.size()) - fd), 1e-8);
}

TEST(Optimizer, SgdExample) {
  TrainConfig c;
  c.optimizer = OptimizerKind::sgd;
  c.momentum = 0.0;
  c.lr = 0.1;
  c.weight_decay = 0.0;
  OptimizerState s;
  Vector p = Vector::Constant(1, 1.0);
  optimizer_step(s, p, Vector::Constant(1, 2.0), c);
  EXPECT_DOUBLE_EQ(p(0), 0.8);
}

TEST(Optimizer, AdamFirstStep) {
  TrainConfig c;
  c.lr = 1e-3;
  c.weight_decay = 0.0;
  OptimizerState s;
  Vector p(3);
  p << 1.0, -2.0, 0.5;
  Vector g(3);
  g << 0.3, -4.0, 1e-2;
  const Vector before = p;
  optimizer_step(s, p, g, c);
  for (int i = 0; i < 3; ++i) {
    // bias-corrected first moment g, second moment g^2
    const double expect = before(i) - c.lr * g(i) / (std::abs(g(i)) + c.eps);
    EXPECT_NEAR(p(i), expect, 1e-12);
    EXPECT_NEAR(std::abs(p(i) - before(i)), c.lr, 1e-6);
  }
}

TEST(Optimizer, ZeroGradientAndMasks) {
  TrainConfig c;
  c.weight_decay = 0.0;
  OptimizerState s;
  Vector p = Vector::LinSpaced(4, -1.0, 2.0);
  const Vector before = p;
  optimizer_step(s, p, Vector::Zero(4), c);
  EXPECT_EQ(p, before);

  c.optimizer = OptimizerKind::sgd;
  c.weight_decay = 0.5;
  c.lr = 0.1;
  OptimizerState s2;
  Vector decay(4), train(4);
  decay << 1, 0, 1, 0;
  train << 1, 1, 0, 0;
  optimizer_step(s2, p, Vector::Zero(4), c, decay, train);
  EXPECT_DOUBLE_EQ(p(0), before(0) * (1.0 - 0.05));
  EXPECT_EQ(p(1), before(1));
  EXPECT_EQ(p(2), before(2));
  EXPECT_THROW(optimizer_step(s2, p, Vector::Zero(3), c), ShapeMismatch);
}

IckModel linear_only_model() {
  IckModel m;
  KernelBranch kb;
  kb.map = NystromMap(KernelSpec::linear(0), linear_params(1.0), 0, Matrix::Constant(1, 1, 0.5));
  m.branches.emplace_back(std::move(kb));
  return m;
}

TEST(Train, LinearKernelLearnsSlope) {
  Rng rng(9);
  const int n = 64;
  Matrix x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = rng.uniform(-1.0, 1.0);
  const Inputs in({x});
  const Vector y = 3.0 * x.col(0);

  IckModel m = linear_only_model();
  TrainConfig c;
  c.lr = 0.05;
  c.epochs = 200;
  c.batch_size = 16;
  const TrainResult r = train(m, in, y, c);
  ASSERT_EQ(r.loss_trace.size(), 200u);
  const double mse = compute_loss(ick_forward(m, in), y, LossKind::mse).value;
  EXPECT_LE(mse, 1e-3);
}

TEST(Train, SameSeedSameTrace) {
  Rng rng(10);
  const Inputs x = random_inputs(40, {2, 1}, rng);
  const Vector y = test::random_matrix(40, 1, rng);
  auto run = [&] {
    Rng init(11);
    IckModel m;
    m.branches.emplace_back(make_nn(0, 2, 4, Activation::relu, init));
    m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 4, init));
    TrainConfig c;
    c.epochs = 5;
    c.batch_size = 8;
    c.seed = 42;
    return train(m, x, y, c).loss_trace;
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, NonFiniteLossNamesBatch) {
  IckModel m = linear_only_model();
  Matrix x(4, 1);
  x << 1, 2, 3, 4;
  Vector y(4);
  y << 0, 0, std::numeric_limits<double>::quiet_NaN(), 0;
  TrainConfig c;
  c.batch_size = 4;
  try {
    train(m, Inputs({x}), y, c);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Train, LastLayerScopeKeepsHiddenWeights) {
  Rng rng(12);
  const Inputs x = random_inputs(30, {2, 1}, rng);
  const Vector y = test::random_matrix(30, 1, rng);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 2, 3, Activation::relu, rng, TrainableScope::last_layer));
  m.branches.emplace_back(make_nystrom(1, KernelSpec::rbf(1), rbf_params(1.0, 1.0), 3, rng));
  const Matrix hidden = std::get<NnBranch>(m.branches[0]).params.weights[0];
  TrainConfig c;
  c.epochs = 3;
  train(m, x, y, c);
  EXPECT_EQ(std::get<NnBranch>(m.branches[0]).params.weights[0], hidden);
  EXPECT_NE(std::get<NnBranch>(m.branches[0]).params.weights[1], Matrix::Zero(3, 5));
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(13);
  IckModel m;
  m.branches.emplace_back(make_nn(0, 2, 4, Activation::tanh, rng));
  m.branches.emplace_back(make_nystrom(1, KernelSpec::periodic(1), periodic_params(1.0, 0.8, 3.0), 4, rng));
  KernelBranch rff;
  rff.map = RffMap(KernelSpec::rbf(2), rbf_params(0.7, 1.3), 2, 1, 2, 77);
  rff.trainable = false;
  m.branches.emplace_back(std::move(rff));
  const Inputs x = random_inputs(7, {2, 1, 1}, rng);

  const std::string text = model_to_json(m).dump();
  const IckModel back = model_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(ick_forward(back, x), ick_forward(m, x));
  EXPECT_EQ(model_params(back), model_params(m));
  EXPECT_EQ(model_trainable_mask(back), model_trainable_mask(m));
  EXPECT_THROW(model_from_json({{"version", 99}, {"branches", nlohmann::json::array()}}), SchemaError);
}

TEST(BuildModel, FromConfig) {
  Rng rng(14);
  const Inputs x = random_inputs(20, {3, 1}, rng);
  const nlohmann::json j = nlohmann::json::parse(R"({
    "p": 6,
    "branches": [
      {"type": "nn", "source": 0, "mlp": {"hidden": [8, 8]}},
      {"type": "kernel", "source": 1, "kernel": {"type": "exp_sine_squared", "params": {"period": 2.0}},
       "map": {"method": "nystrom"}, "trainable": false}
    ]})");
  Rng init(1);
  const IckModel m = build_model(j, x, init);
  EXPECT_EQ(m.latent_dim(), 6);
  EXPECT_EQ(std::get<NnBranch>(m.branches[0]).config.widths, (std::vector<int>{3, 8, 8, 6}));
  EXPECT_FALSE(std::get<KernelBranch>(m.branches[1]).trainable);
  EXPECT_EQ(ick_forward(m, x).size(), 20);

  Rng init2(1);
  EXPECT_THROW(build_model({{"branches", nlohmann::json::array()}}, x, init2), ConfigError);
  EXPECT_THROW(build_model(nlohmann::json::parse(R"({"p": 2, "branches": [{"type": "nn", "source": 5}]})"), x, init2),
               ConfigError);
  EXPECT_THROW(build_model(nlohmann::json::parse(R"({"p": 2, "branches": [{"type": "tree", "source": 0}]})"), x, init2),
               ConfigError);
}

TEST(TrainConfigJson, RoundTripAndErrors) {
  TrainConfig c;
  c.optimizer = OptimizerKind::sgd;
  c.lr = 0.01;
  c.epochs = 7;
  c.loss = LossKind::mae;
  c.seed = 3;
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_THROW(train_config_from_json({{"lr", -1.0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"optimizer", "rmsprop"}}), ConfigError);
}

}  // namespace
}  // namespace ick
