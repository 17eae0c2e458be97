#include <gtest/gtest.h>

#include <numeric>

#include "stgcvae/synthetic.hpp"
#include "stgcvae/trainer.hpp"
#include "support.hpp"

using namespace stgcvae;
using testing_support::TempDir;

namespace {

TrainConfig small_config(std::size_t epochs, std::size_t batch) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.lr_switch_epoch = epochs - 1;
  c.seed = 11;
  return c;
}

std::vector<SequenceWindow> toy_windows(std::size_t count, std::uint64_t seed = 3, std::size_t agents = 1) {
  SyntheticOptions o;
  o.windows = count;
  o.agents = agents;
  o.seed = seed;
  o.pattern = Pattern::turn;
  return generate_synthetic(o);
}

}  // namespace

TEST(LrSchedule, StepAtEpochOneFifty) {
  TrainConfig c;
  EXPECT_EQ(lr_schedule(0, c), 0.01);
  EXPECT_EQ(lr_schedule(149, c), 0.01);
  EXPECT_EQ(lr_schedule(150, c), 0.002);
  EXPECT_EQ(lr_schedule(249, c), 0.002);
  EXPECT_THROW(lr_schedule(250, c), ParameterError);
}

TEST(LrSchedule, CustomSwitchIsHonoured) {
  TrainConfig c;
  c.epochs = 20;
  c.lr_switch_epoch = 10;
  EXPECT_EQ(lr_schedule(9, c), 0.01);
  EXPECT_EQ(lr_schedule(10, c), 0.002);
}

TEST(TrainConfigText, ParsesKnownKeys) {
  const auto c = parse_train_config("# run\nepochs = 40\nbatch-size=8\nlr_switch_epoch=20\nkl_slope=1e-4\n"
                                    "latent_length=10\ngrad_clip=0\n");
  EXPECT_EQ(c.epochs, 40u);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.lr_switch_epoch, 20u);
  EXPECT_EQ(c.kl_slope, 1e-4);
  EXPECT_EQ(c.model.latent_length, 10u);
  EXPECT_EQ(c.grad_clip, 0.0);
  EXPECT_EQ(c.lr_initial, 0.01);
}

TEST(TrainConfigText, RejectsBadInput) {
  EXPECT_THROW(parse_train_config("learning_rate=0.1\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs=-3\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs=ten\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs\n"), ConfigError);
  EXPECT_THROW(parse_train_config("epochs=100\n"), ConfigError);  // switch at 150 >= epochs
  EXPECT_THROW(parse_train_config("batch_size=0\n"), ConfigError);
  EXPECT_THROW(load_train_config("/nonexistent/run.cfg"), ConfigError);
}

TEST(TrainEpoch, OneWindowBatchOneTakesOneStep) {
  const auto windows = toy_windows(1);
  const auto prepared = prepare_all(windows);
  const auto c = small_config(2, 1);
  auto state = initial_state(c);
  const auto before = state.model.params;
  const auto s = train_epoch(state, prepared, c);
  EXPECT_EQ(s.step, 1u);
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(state.epoch, 1u);
  EXPECT_EQ(s.windows, 1u);
  EXPECT_FALSE(state.model.params == before);
}

TEST(TrainEpoch, PartialBatchIsApplied) {
  const auto windows = toy_windows(5);
  const auto prepared = prepare_all(windows);
  const auto c = small_config(2, 2);
  auto state = initial_state(c);
  EXPECT_EQ(train_epoch(state, prepared, c).step, 3u);
}

TEST(TrainEpoch, LossDecreasesOnFixedWindow) {
  const auto windows = toy_windows(1);
  const auto prepared = prepare_all(windows);
  auto c = small_config(50, 1);
  c.kl_slope = 0.0;
  auto state = initial_state(c);
  std::vector<double> losses;
  for (std::size_t e = 0; e < c.epochs; ++e) losses.push_back(train_epoch(state, prepared, c).mean.total);
  const double head = std::accumulate(losses.begin(), losses.begin() + 5, 0.0) / 5.0;
  const double tail = std::accumulate(losses.end() - 5, losses.end(), 0.0) / 5.0;
  EXPECT_LT(tail, head);
}

TEST(TrainEpoch, EqualSeedsGiveBitIdenticalParameters) {
  const auto windows = toy_windows(3);
  const auto prepared = prepare_all(windows);
  const auto c = small_config(3, 2);
  auto a = initial_state(c);
  auto b = initial_state(c);
  for (int e = 0; e < 3; ++e) {
    train_epoch(a, prepared, c);
    train_epoch(b, prepared, c);
  }
  EXPECT_TRUE(a.model.params == b.model.params);
  EXPECT_TRUE(a.rng == b.rng);
}

TEST(TrainEpoch, AccumulationEqualsAveragedWindowGradients) {
  const auto windows = toy_windows(3, 5, 2);
  const auto prepared = prepare_all(windows);
  auto c = small_config(2, 3);
  c.grad_clip = 0.0;
  auto state = initial_state(c);

  // Replay the epoch by hand: same shuffle, same draw order, one averaged step.
  Model manual = state.model;
  Rng rng = state.rng;
  std::vector<std::size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<Tensor> sum;
  for (const auto& e : manual.params.entries()) sum.emplace_back(e.value.shape());
  for (const auto idx : order) {
    const auto r = window_gradients(manual, prepared[idx], 0, c.anneal(), rng);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += r.grads[i];
  }
  for (std::size_t i = 0; i < manual.params.size(); ++i) {
    auto& p = manual.params.entry(i).value;
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= c.lr_initial * sum[i][j] / 3.0;
  }

  train_epoch(state, prepared, c);
  double worst = 0.0;
  for (std::size_t i = 0; i < manual.params.size(); ++i)
    for (std::size_t j = 0; j < manual.params.entry(i).value.size(); ++j)
      worst = std::max(worst, std::abs(manual.params.entry(i).value[j] - state.model.params.entry(i).value[j]));
  EXPECT_LT(worst, 1e-10);
}

TEST(ApplySgd, ClipsAveragedGradientNorm) {
  ParamStore s;
  s.add("w", Network::decoder, ParamKind::weight, Tensor({2}));
  apply_sgd(s, {Tensor({2}, {6.0, 8.0})}, 2, 1.0, 1.0);  // averaged norm 5 -> 1
  EXPECT_NEAR(s.get("w")[0], -0.6, 1e-15);
  EXPECT_NEAR(s.get("w")[1], -0.8, 1e-15);
  apply_sgd(s, {Tensor({2}, {0.2, 0.0})}, 1, 0.5, 1.0);  // under the limit
  EXPECT_NEAR(s.get("w")[0], -0.7, 1e-15);
}

TEST(MakeSplit, LeaveOneSceneOut) {
  std::vector<SequenceWindow> windows;
  for (const char* name : {"eth", "hotel", "zara1", "zara2", "univ", "eth", "zara1"}) {
    SequenceWindow w;
    w.scene = name;
    w.positions = Tensor({kSeqLen, 1, 2});
    windows.push_back(w);
  }
  const auto split = make_split(windows, "eth");
  EXPECT_EQ(split.test.size(), 2u);
  EXPECT_EQ(split.train.size(), 5u);
  for (const auto& w : split.test) EXPECT_EQ(w.scene, "eth");
  std::set<std::string> train_scenes;
  for (const auto& w : split.train) train_scenes.insert(w.scene);
  EXPECT_EQ(train_scenes, (std::set<std::string>{"hotel", "univ", "zara1", "zara2"}));
  EXPECT_THROW(make_split(windows, "students"), ConfigError);
}

TEST(Checkpointing, RestoreGivesIdenticalNextStep) {
  TempDir dir;
  const auto windows = toy_windows(2);
  const auto prepared = prepare_all(windows);
  const auto c = small_config(4, 1);
  auto state = initial_state(c);
  train_epoch(state, prepared, c);
  train_epoch(state, prepared, c);
  checkpoint(state, c, dir / "ck.stgc");
  auto restored = restore(dir / "ck.stgc");
  EXPECT_EQ(restored.state.epoch, 2u);
  EXPECT_EQ(restored.state.step, 4u);
  EXPECT_EQ(restored.config.batch_size, c.batch_size);
  EXPECT_TRUE(restored.state.model.params == state.model.params);

  const auto a = train_epoch(state, prepared, c);
  const auto b = train_epoch(restored.state, prepared, restored.config);
  EXPECT_EQ(a.mean.total, b.mean.total);
  EXPECT_TRUE(state.model.params == restored.state.model.params);
}

TEST(Checkpointing, EpochOneFiftyRestoresReducedRate) {
  TempDir dir;
  TrainConfig c;
  auto state = initial_state(c);
  state.epoch = 150;
  checkpoint(state, c, dir / "e150.stgc");
  const auto r = restore(dir / "e150.stgc");
  EXPECT_EQ(lr_schedule(r.state.epoch, r.config), 0.002);
  EXPECT_EQ(lr_schedule(r.state.epoch - 1, r.config), 0.01);
}

TEST(Checkpointing, TruncatedFileIsFormatError) {
  TempDir dir;
  const auto c = small_config(2, 1);
  const auto state = initial_state(c);
  checkpoint(state, c, dir / "ck.stgc");
  const std::string bytes = testing_support::read_text(dir / "ck.stgc");
  testing_support::write_text(dir / "ck.stgc", bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(restore(dir / "ck.stgc"), FormatError);
}

TEST(Fit, WritesMetricsAndCheckpoints) {
  TempDir dir;
  const auto windows = toy_windows(2);
  auto c = small_config(4, 2);
  c.checkpoint_every = 2;
  c.val_every = 2;
  c.val_k = 2;
  auto state = initial_state(c);
  FitOptions opts;
  opts.out_dir = dir.path();
  std::size_t callbacks = 0;
  opts.on_epoch = [&](const EpochSummary&) { ++callbacks; };
  const auto history = fit(state, c, windows, windows, opts);
  EXPECT_EQ(history.size(), 4u);
  EXPECT_EQ(callbacks, 4u);
  EXPECT_TRUE(history[1].val_ade.has_value());
  EXPECT_FALSE(history[0].val_ade.has_value());
  const std::string csv = testing_support::read_text(dir / "metrics.csv");
  EXPECT_EQ(csv.rfind(std::string(kMetricsHeader) + "\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  for (const char* f : {"epoch_0002.stgc", "epoch_0004.stgc", "last.stgc", "best.stgc"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
}
