#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "ick/experiment.hpp"
#include "test_util.hpp"

namespace ick {
namespace {

nlohmann::json minimal_config() {
  return nlohmann::json::parse(R"({
    "seed": 7,
    "data": {"generator": "synthetic_product", "n": 60},
    "split": {"kind": "random", "ratio": 0.5},
    "model": {"p": 4, "branches": [
      {"type": "nn", "source": 0, "mlp": {"hidden": [8]}},
      {"type": "kernel", "source": 1, "kernel": {"type": "spectral_mixture", "components": 2}, "map": {"method": "nystrom"}}]},
    "train": {"epochs": 1, "batch_size": 10}
  })");
}

TEST(RunTrain, MetricsSchema) {
  const RunOutput out = run_command("train", minimal_config(), 7, 1);
  for (const char* k : {"rmse", "mae", "spearman"}) EXPECT_TRUE(out.report.values.count(k)) << k;
  EXPECT_TRUE(out.files.count("checkpoint.json"));
  EXPECT_TRUE(out.files.count("predictions.csv"));
  const nlohmann::json j = nlohmann::json::parse(metrics_json("train", 7, out));
  EXPECT_EQ(j.at("seed"), 7);
  EXPECT_EQ(j.at("config").at("train").at("epochs"), 1);
  EXPECT_FALSE(j.contains("timestamp"));
  const std::string csv = out.files.at("predictions.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x0_0,x1_0,y,yhat");
}

TEST(RunTrain, SameSeedSameBytes) {
  const auto a = metrics_json("train", 7, run_command("train", minimal_config(), 7, 1));
  const auto b = metrics_json("train", 7, run_command("train", minimal_config(), 7, 1));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, metrics_json("train", 8, run_command("train", minimal_config(), 8, 1)));
}

TEST(RunTrain, CheckpointReproducesPredictions) {
  const RunOutput out = run_command("train", minimal_config(), 3, 1);
  const IckModel m = model_from_json(nlohmann::json::parse(out.files.at("checkpoint.json")));
  const Dataset d = make_dataset(minimal_config().at("data"), 3);
  SplitSpec sp;
  sp.seed = 3;
  const SplitResult parts = split(d, sp);
  const RegressionErrors e = regression_errors(parts.test.y, ick_forward(m, parts.test.x));
  EXPECT_NEAR(e.rmse, out.report.values.at("rmse"), 1e-12);
}

TEST(RunEnsemble, ThreadsDoNotChangeResults) {
  nlohmann::json cfg = minimal_config();
  cfg["ensemble"] = {{"members", 3}};
  const RunOutput one = run_command("ensemble", cfg, 7, 1);
  const RunOutput three = run_command("ensemble", cfg, 7, 3);
  EXPECT_EQ(metrics_json("ensemble", 7, one), metrics_json("ensemble", 7, three));
  EXPECT_EQ(one.files.at("manifest.json"), three.files.at("manifest.json"));
  EXPECT_TRUE(one.files.count("members/member_002.json"));
  EXPECT_TRUE(one.report.values.count("msll"));
  const nlohmann::json manifest = nlohmann::json::parse(one.files.at("manifest.json"));
  EXPECT_EQ(manifest.at("members").size(), 3u);
  EXPECT_EQ(manifest.at("members")[2].at("seed"), 9);
}

TEST(RunSweep, OneRowPerCell) {
  const nlohmann::json cfg = {{"sweep", {{"p", {2, 4, 8, 16, 32}}, {"repeats", 5}}}};
  const RunOutput out = run_command("sweep-p", cfg, 0, 2);
  std::istringstream csv(out.files.at("sweep.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "p,seed,method,max_abs,frobenius_rel,wall_time");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 25);
  EXPECT_EQ(out.report.values.at("strictly_decreasing"), 1.0);
  EXPECT_EQ(metrics_json("sweep-p", 0, out).find("wall_time"), std::string::npos);
}

TEST(SweepReconstruction, RowsFollowPThenSeed) {
  SweepSettings s;
  s.ps = {2, 8};
  s.repeats = 3;
  s.seed = 10;
  const std::vector<SweepRow> rows = sweep_reconstruction(s);
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].p, s.ps[i / 3]);
    EXPECT_EQ(rows[i].seed, 10 + i % 3);
    EXPECT_GE(rows[i].wall_time, 0.0);
  }
  EXPECT_LT(rows[3].frobenius_rel, rows[0].frobenius_rel);
}

TEST(RunCommand, ConfigErrors) {
  nlohmann::json cfg = minimal_config();
  cfg["data"]["generator"] = "nope";
  EXPECT_THROW(run_command("train", cfg, 1, 1), ConfigError);
  cfg = minimal_config();
  cfg["data"]["n"] = "many";
  try {
    run_command("train", cfg, 1, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.n"), std::string::npos);
  }
  EXPECT_THROW(run_command("fly", minimal_config(), 1, 1), ConfigError);
  EXPECT_THROW(run_command("train", nlohmann::json::array(), 1, 1), ConfigError);
  EXPECT_THROW(run_command("compare-gp", {{"compare_gp", {{"members", 5}, {"w1_members", {10}}}}}, 1, 1), ConfigError);
  cfg = minimal_config();
  cfg["data"] = {{"csv", "/nonexistent/data.csv"}, {"schema", {{"sources", {{"a"}}}, {"target", "y"}}}};
  EXPECT_THROW(run_command("train", cfg, 1, 1), IoError);
}

TEST(RunSpectrum, DefaultKernelHasGap) {
  const RunOutput out = run_command("spectrum", nlohmann::json::object(), 0, 1);
  EXPECT_GT(out.report.values.at("eigen_gap_ratio"), 10.0);
  EXPECT_LT(out.report.values.at("nystrom_frobenius_rel"), out.report.values.at("rff_frobenius_rel"));
}

TEST(RunClassify, LearnsPeriodicToy) {
  const nlohmann::json cfg = {{"data", {{"generator", "periodic_classes"}, {"n", 400}}}, {"train", {{"epochs", 40}}}};
  const RunOutput out = run_command("classify", cfg, 2, 1);
  EXPECT_GE(out.report.values.at("accuracy"), 0.8);
  EXPECT_THROW(run_command("classify", minimal_config(), 2, 1), ConfigError);
}

TEST(PosteriorW1, ZeroVarianceOracleIsMeanAbsoluteError) {
  Rng rng(4);
  const Matrix preds = test::random_matrix(6, 5, rng);
  GpPosterior post;
  post.mean = test::random_matrix(5, 1, rng);
  post.cov = Matrix::Zero(5, 5);
  double expect = 0.0;
  for (Eigen::Index j = 0; j < 5; ++j) expect += (preds.col(j).array() - post.mean(j)).abs().mean();
  EXPECT_NEAR(posterior_w1(preds, post, 6, 1), expect / 5.0, 1e-12);
  EXPECT_NEAR(posterior_w1(preds, post, 2, 1),
              [&] {
                double t = 0.0;
                for (Eigen::Index j = 0; j < 5; ++j) t += (preds.col(j).head(2).array() - post.mean(j)).abs().mean();
                return t / 5.0;
              }(),
              1e-12);
  EXPECT_THROW(posterior_w1(preds, post, 7, 1), ConfigError);
}

TEST(PosteriorAgreement, ByHand) {
  Matrix preds(2, 3);
  preds << 0.0, 1.0, 2.0,  //
      2.0, 1.0, 2.0;
  GpPosterior post;
  post.mean = Eigen::Vector3d(1.0, 1.0, 3.0);
  post.cov = Eigen::Vector3d(1.0, 1.0, 4.0).asDiagonal();
  const PosteriorAgreement a = posterior_agreement(preds, post);
  EXPECT_NEAR(a.mean_abs_diff, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(a.sd_within_factor2, 1.0 / 3.0, 1e-12);  // sds 1, 0, 0 against 1, 1, 2
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), ConfigError);
}

TEST(WriteOutputs, WritesEveryFile) {
  const auto dir = std::filesystem::temp_directory_path() / "ick_test_outputs";
  std::filesystem::remove_all(dir);
  RunOutput out;
  out.report.set("a", 1.0);
  out.files["members/m.json"] = "{}\n";
  write_outputs(dir, "gen", 1, out);
  EXPECT_EQ(read_text(dir / "members/m.json"), "{}\n");
  EXPECT_EQ(nlohmann::json::parse(read_text(dir / "metrics.json")).at("metrics").at("a"), 1.0);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ick
