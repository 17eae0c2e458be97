#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "commands.hpp"
#include "support.hpp"

using namespace stgcvae;
using testing_support::read_text;
using testing_support::TempDir;
using testing_support::write_text;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

double report_value(const std::string& text, const std::string& key) {
  const auto pos = text.find(key + " = ");
  if (pos == std::string::npos) return std::nan("");
  return std::stod(text.substr(pos + key.size() + 3));
}

std::string one_agent_scene(int frames) {
  std::string s;
  for (int f = 0; f < frames; ++f) s += std::to_string(f * 10) + " 4 " + std::to_string(0.4 * f) + " 1.0\n";
  return s;
}

double heading(const Tensor& p, std::size_t t0, std::size_t t1) {
  return std::atan2(p.at(t1, 0, 1) - p.at(t0, 0, 1), p.at(t1, 0, 0) - p.at(t0, 0, 0));
}

}  // namespace

TEST(CliUsage, HelpAndUnknownInput) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"fly"}).code, 1);
  EXPECT_EQ(run_cli({"bench", "--bogus"}).code, 1);
  EXPECT_EQ(run_cli({"gen-synthetic", "--out", "x", "--pattern", "zigzag"}).code, 1);
}

TEST(CliPreprocess, OneAgentSceneGivesOneWindow) {
  TempDir dir;
  std::filesystem::create_directories(dir / "in");
  write_text(dir / "in" / "walk.txt", one_agent_scene(20));
  const auto r = run_cli({"preprocess", "--input", (dir / "in").string(), "--output", (dir / "c.stgw").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("scene walk:"), std::string::npos);
  EXPECT_NE(r.out.find("total: 1 windows"), std::string::npos);
  const auto windows = read_window_cache(dir / "c.stgw");
  ASSERT_EQ(windows.size(), 1u);
  EXPECT_EQ(windows[0].scene, "walk");
  EXPECT_EQ(windows[0].agent_ids, (std::vector<std::int32_t>{4}));
}

TEST(CliPreprocess, EmptyDirectoryWarnsButSucceeds) {
  TempDir dir;
  std::filesystem::create_directories(dir / "in");
  const auto r = run_cli({"preprocess", "--input", (dir / "in").string(), "--output", (dir / "c.stgw").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_TRUE(read_window_cache(dir / "c.stgw").empty());
}

TEST(CliPreprocess, BadLineNamesFileAndLine) {
  TempDir dir;
  std::filesystem::create_directories(dir / "in");
  const auto file = dir / "in" / "broken.txt";
  write_text(file, "0 1 0 0\n10 1 0.4\n");
  const auto r = run_cli({"preprocess", "--input", (dir / "in").string(), "--output", (dir / "c.stgw").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(file.string() + ":2"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(CliPreprocess, RobotLogAndInferMode) {
  TempDir dir;
  std::string text = "#robot_id=0\n";
  for (int f = 0; f <= 80; ++f) text += std::to_string(f) + " 0 " + std::to_string(0.1 * f) + " 0\n";
  write_text(dir / "robot.txt", text);
  const auto cache = (dir / "r.stgw").string();
  ASSERT_EQ(run_cli({"preprocess", "--input", (dir / "robot.txt").string(), "--output", cache, "--robot-log"}).code, 0);
  const auto train = read_window_cache(cache);
  ASSERT_EQ(train.size(), 2u);  // 21 grid frames
  EXPECT_TRUE(train[0].includes_robot());
  ASSERT_EQ(run_cli({"preprocess", "--input", (dir / "robot.txt").string(), "--output", cache, "--robot-log",
                     "--mode", "infer"})
                .code,
            0);
  const auto infer = read_window_cache(cache);
  ASSERT_EQ(infer.size(), 1u);
  EXPECT_EQ(infer[0].frames(), kObsLen);
}

TEST(CliPreprocess, MissingInputIsUserError) {
  EXPECT_EQ(run_cli({"preprocess", "--input", "/nonexistent/dir", "--output", "/tmp/x.stgw"}).code, 1);
}

TEST(CliTrain, FiveEpochsWriteFiveMetricRows) {
  TempDir dir;
  const auto cache = (dir / "toy.stgw").string();
  ASSERT_EQ(run_cli({"preprocess", "--input", STGCVAE_FIXTURE_DIR "/toy", "--output", cache}).code, 0);
  const auto r = run_cli({"train", "--data", cache, "--out", (dir / "run").string(), "--epochs", "5", "--batch-size",
                          "4", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("epoch 5/5"), std::string::npos);
  const std::string csv = read_text(dir / "run" / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "last.stgc"));
}

TEST(CliTrain, SameSeedGivesIdenticalCheckpoint) {
  TempDir dir;
  const auto cache = (dir / "s.stgw").string();
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "3", "--agents", "2", "--pattern", "turn", "--out", cache}).code, 0);
  for (const char* out : {"a", "b"})
    ASSERT_EQ(run_cli({"train", "--data", cache, "--out", (dir / out).string(), "--epochs", "3", "--batch-size", "2",
                       "--seed", "9"})
                  .code,
              0);
  EXPECT_EQ(read_text(dir / "a" / "last.stgc"), read_text(dir / "b" / "last.stgc"));
  EXPECT_EQ(read_text(dir / "a" / "metrics.csv"), read_text(dir / "b" / "metrics.csv"));
}

TEST(CliTrain, ConfigAndHoldoutErrors) {
  TempDir dir;
  const auto cache = (dir / "s.stgw").string();
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "2", "--out", cache}).code, 0);
  EXPECT_EQ(run_cli({"train", "--data", (dir / "missing.stgw").string(), "--out", (dir / "o").string()}).code, 1);
  EXPECT_EQ(run_cli({"train", "--data", cache, "--out", (dir / "o").string(), "--holdout", "eth"}).code, 1);
  write_text(dir / "bad.cfg", "epochs = 4\nmomentum = 0.9\n");
  EXPECT_EQ(run_cli({"train", "--data", cache, "--out", (dir / "o").string(), "--config", (dir / "bad.cfg").string()})
                .code,
            1);
}

TEST(CliTrain, ResumeContinuesToTargetEpochs) {
  TempDir dir;
  const auto cache = (dir / "s.stgw").string();
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "2", "--out", cache}).code, 0);
  write_text(dir / "run.cfg", "epochs = 4\nlr_switch_epoch = 2\nbatch_size = 1\ncheckpoint_every = 2\n");
  const auto full = run_cli({"train", "--data", cache, "--out", (dir / "full").string(), "--config",
                             (dir / "run.cfg").string()});
  ASSERT_EQ(full.code, 0) << full.err;
  const auto resumed = run_cli({"train", "--data", cache, "--out", (dir / "resumed").string(), "--resume",
                                (dir / "full" / "epoch_0002.stgc").string()});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_NE(resumed.out.find("at epoch 2"), std::string::npos);
  EXPECT_EQ(read_text(dir / "full" / "last.stgc"), read_text(dir / "resumed" / "last.stgc"));
}

TEST(CliEvaluate, MoreSamplesAndReportContents) {
  TempDir dir;
  const auto small = (dir / "small.stgw").string();
  const auto big = (dir / "big.stgw").string();
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "2", "--pattern", "turn", "--out", small}).code, 0);
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "100", "--pattern", "turn", "--seed", "4", "--out", big}).code, 0);
  ASSERT_EQ(run_cli({"train", "--data", small, "--out", (dir / "run").string(), "--epochs", "2"}).code, 0);
  const auto ckpt = (dir / "run" / "last.stgc").string();
  const auto k1 = run_cli({"evaluate", "--ckpt", ckpt, "--data", big, "--k", "1", "--latency-reps", "0"});
  const auto k20 = run_cli({"evaluate", "--ckpt", ckpt, "--data", big, "--k", "20", "--latency-reps", "0"});
  ASSERT_EQ(k1.code, 0) << k1.err;
  ASSERT_EQ(k20.code, 0) << k20.err;
  EXPECT_LE(report_value(k20.out, "ade"), 1.05 * report_value(k1.out, "ade"));
  EXPECT_EQ(report_value(k20.out, "param_count"), 20724.0);
  EXPECT_EQ(report_value(k20.out, "windows"), 100.0);
}

TEST(CliEvaluate, ExportWritesParseableCsv) {
  TempDir dir;
  const auto cache = (dir / "s.stgw").string();
  ASSERT_EQ(run_cli({"gen-synthetic", "--windows", "2", "--agents", "2", "--out", cache}).code, 0);
  ASSERT_EQ(run_cli({"train", "--data", cache, "--out", (dir / "run").string(), "--epochs", "1"}).code, 0);
  const auto r = run_cli({"evaluate", "--ckpt", (dir / "run" / "last.stgc").string(), "--data", cache, "--k", "3",
                          "--export", (dir / "pred").string(), "--baseline", "--latency-reps", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("[baseline.constant_velocity]"), std::string::npos);
  EXPECT_NE(r.out.find("latency_mean_s"), std::string::npos);
  std::istringstream csv(read_text(dir / "pred" / "window_00001.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "agent_id,frame,sample_id,x,y");
  std::set<int> ids;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 5u);
    ids.insert(std::stoi(cells[2]));
  }
  EXPECT_EQ(ids, (std::set<int>{-1, 0, 1, 2}));

  const auto p = run_cli({"predict", "--ckpt", (dir / "run" / "last.stgc").string(), "--data", cache, "--k", "3",
                          "--out", (dir / "pred2").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(read_text(dir / "pred" / "window_00001.csv"), read_text(dir / "pred2" / "window_00001.csv"));
}

TEST(CliBench, StatsAndLatentOrdering) {
  const auto l10 = run_cli({"bench", "--latent-length", "10", "--agents", "3", "--reps", "100"});
  const auto l20 = run_cli({"bench", "--latent-length", "20", "--agents", "3", "--reps", "100"});
  ASSERT_EQ(l10.code, 0);
  ASSERT_EQ(l20.code, 0);
  EXPECT_LT(report_value(l10.out, "param_count"), report_value(l20.out, "param_count"));
  EXPECT_EQ(report_value(l20.out, "reps"), 100.0);
  const double mean = report_value(l20.out, "latency_mean_s");
  EXPECT_TRUE(std::isfinite(mean));
  EXPECT_GT(mean, 0.0);
  for (const char* agents : {"1", "12"}) EXPECT_EQ(run_cli({"bench", "--agents", agents, "--reps", "5"}).code, 0);
}

TEST(CliBench, FromCheckpoint) {
  TempDir dir;
  ModelConfig c;
  c.latent_length = 30;
  save_model(dir / "m.stgc", make_model(c, 1));
  const auto r = run_cli({"bench", "--ckpt", (dir / "m.stgc").string(), "--reps", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(report_value(r.out, "latent_length"), 30.0);
}

TEST(Synthetic, ConstantVelocityDisplacementsAreConstantUpToJitter) {
  SyntheticOptions o;
  o.windows = 3;
  for (const auto& w : generate_synthetic(o)) {
    const auto d = to_displacements(w).values;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 2; t < kSeqLen; ++t) EXPECT_NEAR(d.at(c, t, 0), d.at(c, 1, 0), 8 * 0.02);
  }
  o.jitter = 0.0;
  for (const auto& w : generate_synthetic(o)) {
    const auto d = to_displacements(w).values;
    for (std::size_t t = 2; t < kSeqLen; ++t) EXPECT_NEAR(d.at(0, t, 0), d.at(0, 1, 0), 1e-12);
  }
}

TEST(Synthetic, SeedDeterminism) {
  SyntheticOptions o;
  o.agents = 3;
  o.pattern = Pattern::stop;
  const auto a = generate_synthetic(o);
  const auto b = generate_synthetic(o);
  o.seed = 1;
  const auto c = generate_synthetic(o);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].positions, b[i].positions);
  EXPECT_FALSE(a[0].positions == c[0].positions);
}

TEST(Synthetic, TurnChangesHeadingByNinetyDegrees) {
  SyntheticOptions o;
  o.pattern = Pattern::turn;
  o.windows = 20;
  o.jitter = 0.02;
  for (const auto& w : generate_synthetic(o)) {
    double delta = heading(w.positions, kTurnFrame, kTurnFrame + 1) - heading(w.positions, kTurnFrame - 1, kTurnFrame);
    delta = std::remainder(delta, 2.0 * std::numbers::pi);
    // 0.02 m jitter on >= 0.3 m steps moves each heading by at most ~0.2 rad.
    EXPECT_NEAR(delta, std::numbers::pi / 2.0, 0.4);
  }
}

TEST(Synthetic, StopPatternHaltsAfterFrameTwelve) {
  SyntheticOptions o;
  o.pattern = Pattern::stop;
  o.jitter = 0.0;
  const auto w = generate_synthetic(o).front();
  for (std::size_t t = kStopFrame + 1; t < kSeqLen; ++t) {
    EXPECT_EQ(w.positions.at(t, 0, 0), w.positions.at(kStopFrame, 0, 0));
    EXPECT_EQ(w.positions.at(t, 0, 1), w.positions.at(kStopFrame, 0, 1));
  }
}
