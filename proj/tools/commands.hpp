#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "stgcvae/evaluator.hpp"
#include "stgcvae/synthetic.hpp"
#include "stgcvae/trainer.hpp"
#include "stgcvae/trajdata.hpp"

namespace stgcvae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

inline constexpr double kRobotLogFramePeriod = 0.1;

namespace fs = std::filesystem;

struct PreprocessArgs {
  std::string input;
  std::string output;
  double rate = 2.5;
  std::optional<std::size_t> stride;
  std::string mode = "train";
  bool robot_log = false;
  std::optional<double> frame_period;
};

struct TrainArgs {
  std::string data;
  std::string holdout = "none";
  std::optional<std::string> config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> resume;
};

struct EvaluateArgs {
  std::string ckpt;
  std::string data;
  std::size_t k = 20;
  std::uint64_t seed = 0;
  std::string sample_mode = "latent";
  bool oracle_per_metric = false;
  std::optional<std::string> export_dir;
  std::optional<std::string> scene;
  std::size_t jobs = 1;
  std::size_t latency_reps = 100;
  bool baseline = false;
};

struct BenchArgs {
  std::optional<std::string> ckpt;
  std::size_t latent_length = 20;
  std::size_t agents = 3;
  std::size_t reps = 100;
  std::size_t warmup = 10;
  std::uint64_t seed = 0;
};

struct PredictArgs {
  std::string ckpt;
  std::string data;
  std::size_t k = 20;
  std::uint64_t seed = 0;
  std::string sample_mode = "latent";
  std::string out;
};

struct GenSyntheticArgs {
  std::size_t agents = 1;
  std::size_t windows = 8;
  std::string pattern = "const-velocity";
  std::string turn_side = "left";
  std::uint64_t seed = 0;
  double jitter = 0.02;
  std::string out;
};

inline SampleMode sample_mode_from_name(const std::string& s) {
  if (s == "latent") return SampleMode::latent;
  if (s == "full") return SampleMode::full;
  throw ConfigError("unknown sample mode '" + s + "' (expected latent or full)");
}

inline std::vector<fs::path> annotation_files(const fs::path& input) {
  if (!fs::exists(input)) throw IoError("input not found: " + input.string());
  if (!fs::is_directory(input)) return {input};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && !name.empty() && name.front() != '.') files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline int preprocess(const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
  if (!(a.rate > 0.0)) throw ConfigError("--rate must be positive");
  const WindowMode mode = a.mode == "infer" ? WindowMode::infer : WindowMode::train;
  const std::size_t stride = a.stride.value_or(mode == WindowMode::train ? 1 : kSeqLen);
  const double period = a.frame_period.value_or(a.robot_log ? kRobotLogFramePeriod : kEthUcyFramePeriod);

  std::vector<SequenceWindow> all;
  for (const auto& file : annotation_files(a.input)) {
    const Scene raw = parse_annotations(file, period);
    const Scene grid = resample(raw, 1.0 / a.rate);
    auto windows = build_windows(grid, stride, mode);
    std::size_t frames = 0;
    if (!grid.annotations.empty()) frames = static_cast<std::size_t>(grid.annotations.back().frame) + 1;
    out << "scene " << grid.name << ": " << raw.annotations.size() << " observations, " << raw.agent_ids().size()
        << " agents (" << grid.dropped_agents << " dropped), " << frames << " grid frames, " << windows.size()
        << " windows\n";
    all.insert(all.end(), std::make_move_iterator(windows.begin()), std::make_move_iterator(windows.end()));
  }
  std::size_t agent_total = 0, agent_max = 0, with_robot = 0;
  for (const auto& w : all) {
    agent_total += w.agents();
    agent_max = std::max(agent_max, w.agents());
    if (w.includes_robot()) ++with_robot;
  }
  const double mean_agents = all.empty() ? 0.0 : static_cast<double>(agent_total) / static_cast<double>(all.size());
  out << "total: " << all.size() << " windows, " << std::setprecision(4) << mean_agents << " agents per window (max "
      << agent_max << "), " << with_robot << " with robot\n";
  if (all.empty()) err << "warning: no windows produced from " << a.input << '\n';
  write_window_cache(a.output, all);
  out << "wrote " << a.output << '\n';
  return kExitOk;
}

inline int gen_synthetic(const GenSyntheticArgs& a, std::ostream& out) {
  SyntheticOptions o;
  o.agents = a.agents;
  o.windows = a.windows;
  o.pattern = pattern_from_name(a.pattern);
  o.turn_side = turn_side_from_name(a.turn_side);
  o.seed = a.seed;
  o.jitter = a.jitter;
  const auto windows = generate_synthetic(o);
  write_window_cache(a.out, windows);
  out << "wrote " << windows.size() << " " << a.pattern << " windows with " << a.agents << " agents to " << a.out
      << '\n';
  return kExitOk;
}

inline int train(const TrainArgs& a, std::ostream& out) {
  const auto windows = read_window_cache(a.data);
  Split split;
  if (a.holdout == "none") {
    split.train = windows;
  } else {
    split = make_split(windows, a.holdout);
  }
  std::erase_if(split.train, [](const SequenceWindow& w) { return !w.has_future(); });
  if (split.train.empty()) throw ConfigError(a.data + ": no 20-frame training windows");

  TrainConfig c;
  std::optional<TrainState> state;
  if (a.resume) {
    auto r = restore(*a.resume);
    c = r.config;
    state = std::move(r.state);
    out << "resumed from " << *a.resume << " at epoch " << state->epoch << '\n';
  } else if (a.config) {
    c = load_train_config(*a.config);
  }
  if (a.seed && !a.resume) c.seed = *a.seed;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (c.lr_switch_epoch >= c.epochs) {
    c.lr_switch_epoch = c.epochs - 1;
    out << "note: learning-rate switch moved to epoch " << c.lr_switch_epoch << '\n';
  }
  c.held_out_scene = a.holdout;
  c.validate();
  if (!state) state = initial_state(c);

  out << "training on " << split.train.size() << " windows, validating on " << split.test.size() << ", "
      << count_params(state->model.params) << " parameters\n";
  FitOptions opts;
  opts.out_dir = fs::path(a.out);
  opts.on_epoch = [&](const EpochSummary& s) {
    char line[256];
    std::snprintf(line, sizeof(line), "epoch %zu/%zu  total %.6f  rec %.6f  kl %.6f  w_kl %.2e  lr %g", s.epoch + 1,
                  c.epochs, s.mean.total, s.mean.rec, s.mean.kl, s.mean.weight, s.lr);
    out << line;
    if (s.val_ade) out << "  val_ade " << *s.val_ade;
    out << '\n' << std::flush;
  };
  fit(*state, c, split.train, split.test, opts);
  out << "wrote " << (fs::path(a.out) / "last.stgc").string() << '\n';
  return kExitOk;
}

inline int evaluate(const EvaluateArgs& a, std::ostream& out) {
  const Model model = load_model(a.ckpt);
  auto windows = read_window_cache(a.data);
  if (a.scene) std::erase_if(windows, [&](const SequenceWindow& w) { return w.scene != *a.scene; });
  if (windows.empty()) throw ConfigError("no windows to evaluate");
  EvalOptions o;
  o.k = a.k;
  o.seed = a.seed;
  o.mode = sample_mode_from_name(a.sample_mode);
  o.selection = a.oracle_per_metric ? Selection::per_metric : Selection::by_ade;
  o.jobs = a.jobs;
  o.latency_reps = a.latency_reps;
  const auto report = evaluate_dataset(model, windows, o);
  out << to_text(report);
  if (a.baseline) {
    double ade_sum = 0.0, fde_sum = 0.0;
    std::size_t n = 0;
    for (const auto& w : windows) {
      if (!w.has_future() || scored_agents(w).empty()) continue;
      const auto m = constant_velocity_baseline(w);
      ade_sum += m.ade;
      fde_sum += m.fde;
      ++n;
    }
    if (n > 0) {
      out << "\n[baseline.constant_velocity]\nade = " << ade_sum / static_cast<double>(n)
          << "\nfde = " << fde_sum / static_cast<double>(n) << '\n';
    }
  }
  if (a.export_dir) {
    export_predictions(model, windows, a.k, a.seed, o.mode, *a.export_dir);
    out << "\nexported " << windows.size() << " prediction files to " << *a.export_dir << '\n';
  }
  return kExitOk;
}

inline int bench(const BenchArgs& a, std::ostream& out) {
  ModelConfig cfg;
  cfg.latent_length = a.latent_length;
  const Model model = a.ckpt ? load_model(*a.ckpt) : make_model(cfg, a.seed);
  SyntheticOptions o;
  o.agents = a.agents;
  o.windows = 1;
  o.seed = a.seed;
  const auto window = generate_synthetic(o).front();
  const auto stats = benchmark_inference(model, window, a.reps, a.warmup);
  out << "param_count = " << count_params(model.params) << '\n';
  out << "latent_length = " << model.config.latent_length << '\n';
  out << "agents = " << a.agents << '\n';
  out << "reps = " << stats.samples.size() << '\n';
  out << "latency_mean_s = " << stats.mean << '\n';
  out << "latency_p95_s = " << stats.p95 << '\n';
  return kExitOk;
}

inline int predict(const PredictArgs& a, std::ostream& out) {
  const Model model = load_model(a.ckpt);
  const auto windows = read_window_cache(a.data);
  export_predictions(model, windows, a.k, a.seed, sample_mode_from_name(a.sample_mode), a.out);
  out << "wrote " << windows.size() << " prediction files to " << a.out << '\n';
  return kExitOk;
}

/// Parses `args` (without the program name) and runs one subcommand. Returns
/// 0 on success, 1 for usage and input errors, 2 for internal failures.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Trajectory prediction with a spatio-temporal graph CVAE", "stgcvae"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "Parse annotation files into a window cache");
  c_pre->add_option("--input", pre.input, "Annotation file or directory")->required();
  c_pre->add_option("--output", pre.output, "Window cache to write")->required();
  c_pre->add_option("--rate", pre.rate, "Target sampling rate in Hz")->capture_default_str();
  c_pre->add_option("--stride", pre.stride, "Window stride in frames (default 1 train, 20 infer)");
  c_pre->add_option("--mode", pre.mode, "train or infer")->check(CLI::IsMember({"train", "infer"}))->capture_default_str();
  c_pre->add_flag("--robot-log", pre.robot_log, "Input is a robot log (10 Hz unless the file says otherwise)");
  c_pre->add_option("--frame-period", pre.frame_period, "Seconds per source frame id");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--data", tr.data, "Window cache")->required();
  c_train->add_option("--holdout", tr.holdout, "Scene held out for validation, or none")->capture_default_str();
  c_train->add_option("--config", tr.config, "key = value training config");
  c_train->add_option("--out", tr.out, "Output directory for checkpoints and metrics")->required();
  c_train->add_option("--seed", tr.seed, "Master seed");
  c_train->add_option("--epochs", tr.epochs, "Override the configured epoch count");
  c_train->add_option("--batch-size", tr.batch_size, "Override the configured batch size");
  c_train->add_option("--resume", tr.resume, "Continue from a training checkpoint");

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Best-of-k ADE/FDE on a window cache");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--data", ev.data, "Window cache")->required();
  c_eval->add_option("--k", ev.k, "Samples per window")->capture_default_str();
  c_eval->add_option("--seed", ev.seed, "Master seed")->capture_default_str();
  c_eval->add_option("--sample-mode", ev.sample_mode, "latent or full")
      ->check(CLI::IsMember({"latent", "full"}))
      ->capture_default_str();
  c_eval->add_flag("--oracle-per-metric", ev.oracle_per_metric, "Take ADE and FDE minima independently");
  c_eval->add_option("--export", ev.export_dir, "Directory for per-window prediction CSVs");
  c_eval->add_option("--scene", ev.scene, "Only evaluate windows of this scene");
  c_eval->add_option("--jobs", ev.jobs, "Worker threads")->capture_default_str();
  c_eval->add_option("--latency-reps", ev.latency_reps, "Timed inference repetitions, 0 to skip")
      ->capture_default_str();
  c_eval->add_flag("--baseline", ev.baseline, "Also report the constant-velocity baseline");

  BenchArgs be;
  auto* c_bench = app.add_subcommand("bench", "Single-inference latency");
  c_bench->add_option("--ckpt", be.ckpt, "Checkpoint (default: freshly initialised model)");
  c_bench->add_option("--latent-length", be.latent_length, "Latent length when no checkpoint is given")
      ->capture_default_str();
  c_bench->add_option("--agents", be.agents, "Agents in the benchmark window")->capture_default_str();
  c_bench->add_option("--reps", be.reps, "Timed repetitions")->capture_default_str();
  c_bench->add_option("--warmup", be.warmup, "Untimed repetitions")->capture_default_str();
  c_bench->add_option("--seed", be.seed, "Seed")->capture_default_str();

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Write sampled futures as CSV");
  c_pred->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  c_pred->add_option("--data", pr.data, "Window cache")->required();
  c_pred->add_option("--k", pr.k, "Samples per window")->capture_default_str();
  c_pred->add_option("--seed", pr.seed, "Master seed")->capture_default_str();
  c_pred->add_option("--sample-mode", pr.sample_mode, "latent or full")
      ->check(CLI::IsMember({"latent", "full"}))
      ->capture_default_str();
  c_pred->add_option("--out", pr.out, "Output directory")->required();

  GenSyntheticArgs gs;
  auto* c_gen = app.add_subcommand("gen-synthetic", "Write a synthetic window cache");
  c_gen->add_option("--agents", gs.agents, "Agents per window")->capture_default_str();
  c_gen->add_option("--windows", gs.windows, "Number of windows")->capture_default_str();
  c_gen->add_option("--pattern", gs.pattern, "const-velocity, turn or stop")
      ->check(CLI::IsMember({"const-velocity", "turn", "stop"}))
      ->capture_default_str();
  c_gen->add_option("--turn-side", gs.turn_side, "left, right or random")
      ->check(CLI::IsMember({"left", "right", "random"}))
      ->capture_default_str();
  c_gen->add_option("--seed", gs.seed, "Seed")->capture_default_str();
  c_gen->add_option("--jitter", gs.jitter, "Positional noise std in meters")->capture_default_str();
  c_gen->add_option("--out", gs.out, "Window cache to write")->required();

  std::vector<std::string> argv_store{"stgcvae"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  }

  try {
    if (*c_pre) return preprocess(pre, out, err);
    if (*c_train) return train(tr, out);
    if (*c_eval) return evaluate(ev, out);
    if (*c_bench) return bench(be, out);
    if (*c_pred) return predict(pr, out);
    if (*c_gen) return gen_synthetic(gs, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const IntegrityError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace stgcvae::cli
