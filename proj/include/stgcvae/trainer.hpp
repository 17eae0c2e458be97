#pragma once

// SGD training with gradient accumulation over whole sequences, KL
// annealing, leave-one-scene-out splits and resumable checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cvae_model.hpp"
#include "evaluator.hpp"
#include "objective.hpp"
#include "rng.hpp"
#include "trajdata.hpp"

namespace stgcvae {

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch_size = 128;  // sequences per SGD step
  double lr_initial = 0.01;
  double lr_after = 0.002;
  std::size_t lr_switch_epoch = 150;  // first epoch trained at lr_after
  std::uint64_t seed = 0;
  std::string held_out_scene;
  double kl_slope = 2e-5;
  std::size_t anneal_cap_epochs = 250;
  std::size_t val_every = 10;
  std::size_t val_k = 20;
  std::size_t checkpoint_every = 10;
  double grad_clip = 10.0;  // global-norm clip on the averaged gradient; 0 disables
  ModelConfig model;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (lr_switch_epoch >= epochs) throw ConfigError("lr_switch_epoch must be smaller than epochs");
    if (!(lr_initial > 0.0) || !(lr_after > 0.0)) throw ConfigError("learning rates must be positive");
    if (kl_slope < 0.0) throw ConfigError("kl_slope must be nonnegative");
    if (val_k == 0) throw ConfigError("val_k must be at least 1");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be nonnegative");
    model.validate();
  }

  AnnealSchedule anneal() const { return {kl_slope, anneal_cap_epochs}; }
};

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument(v);
    const auto r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(r);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a nonnegative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

}  // namespace detail

/// Applies one `key = value` setting. Hyphens in keys are read as underscores.
inline void set_config_value(TrainConfig& c, std::string key, const std::string& v) {
  std::replace(key.begin(), key.end(), '-', '_');
  using detail::parse_real;
  using detail::parse_size;
  if (key == "epochs") c.epochs = parse_size(key, v);
  else if (key == "batch_size") c.batch_size = parse_size(key, v);
  else if (key == "lr_initial") c.lr_initial = parse_real(key, v);
  else if (key == "lr_after") c.lr_after = parse_real(key, v);
  else if (key == "lr_switch_epoch") c.lr_switch_epoch = parse_size(key, v);
  else if (key == "seed") c.seed = parse_size(key, v);
  else if (key == "held_out_scene") c.held_out_scene = v;
  else if (key == "kl_slope") c.kl_slope = parse_real(key, v);
  else if (key == "anneal_cap_epochs" || key == "cap_epochs") c.anneal_cap_epochs = parse_size(key, v);
  else if (key == "val_every") c.val_every = parse_size(key, v);
  else if (key == "val_k") c.val_k = parse_size(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_size(key, v);
  else if (key == "grad_clip") c.grad_clip = parse_real(key, v);
  else if (key == "latent_length") c.model.latent_length = parse_size(key, v);
  else if (key == "embed_channels") c.model.embed_channels = parse_size(key, v);
  else if (key == "prior_layers") c.model.prior_layers = parse_size(key, v);
  else if (key == "recog_layers") c.model.recog_layers = parse_size(key, v);
  else if (key == "txp_layers") c.model.txp_layers = parse_size(key, v);
  else if (key == "kernel") c.model.kernel = parse_size(key, v);
  else if (key == "dropout") c.model.dropout = parse_real(key, v);
  else if (key == "posterior_noise") c.model.posterior_noise = parse_real(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Flat `key = value` text, `#` comments allowed. Unlisted keys keep their
/// defaults; unknown keys are rejected.
inline TrainConfig parse_train_config(std::string_view text, const std::string& label = "config") {
  TrainConfig c;
  Metadata kv;
  try {
    kv = parse_metadata_text(text, label);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [k, v] : kv) set_config_value(c, k, v);
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), path.string());
}

inline Metadata to_metadata(const TrainConfig& c) {
  using detail::format_double;
  Metadata m;
  m["epochs"] = std::to_string(c.epochs);
  m["batch_size"] = std::to_string(c.batch_size);
  m["lr_initial"] = format_double(c.lr_initial);
  m["lr_after"] = format_double(c.lr_after);
  m["lr_switch_epoch"] = std::to_string(c.lr_switch_epoch);
  m["seed"] = std::to_string(c.seed);
  m["held_out_scene"] = c.held_out_scene;
  m["kl_slope"] = format_double(c.kl_slope);
  m["anneal_cap_epochs"] = std::to_string(c.anneal_cap_epochs);
  m["val_every"] = std::to_string(c.val_every);
  m["val_k"] = std::to_string(c.val_k);
  m["checkpoint_every"] = std::to_string(c.checkpoint_every);
  m["grad_clip"] = format_double(c.grad_clip);
  model_config_to_metadata(c.model, m);
  return m;
}

inline double lr_schedule(std::size_t epoch, const TrainConfig& c) {
  if (epoch >= c.epochs) {
    throw ParameterError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.epochs) + ")");
  }
  return epoch < c.lr_switch_epoch ? c.lr_initial : c.lr_after;
}

struct TrainState {
  Model model;
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;   // SGD steps applied
  Rng rng;
  double best_val = std::numeric_limits<double>::infinity();
};

inline TrainState initial_state(const TrainConfig& c) {
  c.validate();
  Rng rng(c.seed);
  ParamStore params = init_params(c.model, rng);
  return TrainState{Model{c.model, std::move(params)}, 0, 0, rng, std::numeric_limits<double>::infinity()};
}

struct WindowResult {
  LossReport report;
  std::vector<Tensor> grads;  // one per ParamStore entry
};

namespace detail {

struct TrainingGraph {
  LatentGaussian posterior;
  LatentGaussian prior;
  Var prediction;
  Loss loss;
};

// recognition (train mode) -> prior -> z ~ q -> decode -> loss. The random
// draws happen in a fixed order: recognition dropout masks, posterior noise,
// then the latent sample.
inline TrainingGraph build_training_graph(Binding& b, const ModelConfig& cfg, const PreparedWindow& p,
                                          std::size_t epoch, const AnnealSchedule& schedule, Rng& rng) {
  if (!p.window->has_future()) throw DimensionError("training window needs 20 frames");
  TrainingGraph g;
  g.posterior = recog_forward(b, cfg, p.displacements, p.full_adjacency, RunMode::train, rng);
  g.prior = prior_forward(b, cfg, p.obs_displacements, p.obs_adjacency);
  const Var z = reparameterize(g.posterior.mu, g.posterior.logvar, rng);
  g.prediction = decode(b, cfg, z, p.obs_displacements, p.obs_adjacency);
  g.loss = total_loss(g.prediction, p.displacements, g.posterior, g.prior, epoch, schedule);
  return g;
}

}  // namespace detail

/// Loss and parameter gradients for one window.
inline WindowResult window_gradients(const Model& model, const PreparedWindow& p, std::size_t epoch,
                                     const AnnealSchedule& schedule, Rng& rng) {
  Tape tape;
  Binding b(tape, model.params, true);
  const auto g = detail::build_training_graph(b, model.config, p, epoch, schedule, rng);
  return {g.loss.report, b.gradients(tape.backward(g.loss.total))};
}

/// Forward-only training loss, consuming the same random draws as
/// window_gradients.
inline LossReport window_loss(const Model& model, const PreparedWindow& p, std::size_t epoch,
                              const AnnealSchedule& schedule, Rng& rng) {
  Tape tape;
  Binding b(tape, model.params, false);
  return detail::build_training_graph(b, model.config, p, epoch, schedule, rng).loss.report;
}

/// param <- param - lr * grad_sum / count, with optional global-norm clipping
/// of the averaged gradient.
inline void apply_sgd(ParamStore& params, const std::vector<Tensor>& grad_sum, std::size_t count, double lr,
                      double grad_clip = 0.0) {
  if (count == 0) return;
  const double inv = 1.0 / static_cast<double>(count);
  double factor = lr * inv;
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& g : grad_sum)
      for (double v : g.data()) sq += (v * inv) * (v * inv);
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) factor *= grad_clip / norm;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.entry(i).value;
    const auto& g = grad_sum[i];
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= factor * g[j];
  }
}

struct EpochSummary {
  std::size_t epoch = 0;  // zero-based index of the epoch just trained
  std::size_t step = 0;   // cumulative SGD steps after it
  std::size_t windows = 0;
  std::size_t skipped = 0;
  double lr = 0.0;
  LossReport mean;  // epoch means of the loss components
  std::optional<double> val_ade;
};

/// One pass over `windows` in a freshly shuffled order. Gradients from
/// `batch_size` consecutive windows are summed and applied as one averaged
/// step; a trailing partial batch is applied the same way.
inline EpochSummary train_epoch(TrainState& state, const std::vector<PreparedWindow>& windows, const TrainConfig& c) {
  if (windows.empty()) throw ParameterError("train_epoch: no training windows");
  const std::size_t epoch = state.epoch;
  const double lr = lr_schedule(epoch, c);
  const auto schedule = c.anneal();

  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[state.rng.below(i)]);

  EpochSummary s;
  s.epoch = epoch;
  s.lr = lr;
  std::vector<Tensor> acc;
  std::size_t pending = 0;
  const auto reset = [&] {
    acc.clear();
    for (const auto& e : state.model.params.entries()) acc.emplace_back(e.value.shape());
    pending = 0;
  };
  const auto flush = [&] {
    if (pending == 0) return;
    apply_sgd(state.model.params, acc, pending, lr, c.grad_clip);
    ++state.step;
    reset();
  };
  reset();
  for (const auto idx : order) {
    const auto& p = windows[idx];
    if (p.window == nullptr || p.window->agents() == 0 || !p.window->has_future()) {
      ++s.skipped;
      continue;
    }
    auto r = window_gradients(state.model, p, epoch, schedule, state.rng);
    if (!std::isfinite(r.report.total)) {
      throw ContractError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.grads[i];
    s.mean.total += r.report.total;
    s.mean.rec += r.report.rec;
    s.mean.kl += r.report.kl;
    ++s.windows;
    if (++pending == c.batch_size) flush();
  }
  flush();
  if (s.windows > 0) {
    const double inv = 1.0 / static_cast<double>(s.windows);
    s.mean.total *= inv;
    s.mean.rec *= inv;
    s.mean.kl *= inv;
  }
  s.mean.weight = anneal_weight(static_cast<long long>(epoch), schedule);
  s.mean.epoch = epoch;
  state.epoch = epoch + 1;
  s.step = state.step;
  return s;
}

inline std::vector<PreparedWindow> prepare_all(const std::vector<SequenceWindow>& windows) {
  std::vector<PreparedWindow> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(prepare_window(w));
  return out;
}

struct Split {
  std::vector<SequenceWindow> train;
  std::vector<SequenceWindow> test;
};

/// Leave-one-scene-out: windows of `held_out` form the test set, all others
/// the training set.
inline Split make_split(const std::vector<SequenceWindow>& windows, const std::string& held_out) {
  std::set<std::string> scenes;
  for (const auto& w : windows) scenes.insert(w.scene);
  if (!scenes.count(held_out)) {
    std::string known;
    for (const auto& s : scenes) known += (known.empty() ? "" : ", ") + s;
    throw ConfigError("unknown held-out scene '" + held_out + "' (available: " + known + ")");
  }
  Split split;
  for (const auto& w : windows) (w.scene == held_out ? split.test : split.train).push_back(w);
  return split;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Writes parameters at float64 and a sidecar holding the training config,
/// counters and the full random-stream state.
inline void checkpoint(const TrainState& state, const TrainConfig& c, const std::filesystem::path& path) {
  Metadata meta = to_metadata(c);
  meta["epoch"] = std::to_string(state.epoch);
  meta["step"] = std::to_string(state.step);
  meta["rng_state"] = state.rng.state();
  meta["best_val"] = detail::format_double(state.best_val);
  save_model(path, state.model, Precision::f64, meta);
}

struct Restored {
  TrainState state;
  TrainConfig config;
};

inline Restored restore(const std::filesystem::path& path) {
  Metadata meta;
  Model model = load_model(path, &meta);
  TrainConfig c;
  for (const auto& [k, v] : meta) {
    if (k == "epoch" || k == "step" || k == "rng_state" || k == "best_val") continue;
    try {
      set_config_value(c, k, v);
    } catch (const ConfigError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  c.model = model.config;
  TrainState s{std::move(model), detail::meta_size(meta, "epoch"), detail::meta_size(meta, "step"), Rng(0),
               std::numeric_limits<double>::infinity()};
  const auto rs = meta.find("rng_state");
  if (rs == meta.end()) throw FormatError(path.string() + ": metadata lacks rng_state");
  s.rng.set_state(rs->second);
  if (const auto bv = meta.find("best_val"); bv != meta.end()) {
    s.best_val = bv->second == "inf" ? std::numeric_limits<double>::infinity() : detail::meta_double(meta, "best_val");
  }
  return {std::move(s), c};
}

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochSummary&)> on_epoch;
};

/// Trains from `state` until c.epochs epochs are complete. With an output
/// directory: appends one row per epoch to metrics.csv, writes
/// epoch_NNNN.stgc every checkpoint_every epochs, last.stgc at the end and
/// best.stgc whenever validation best-of-k ADE improves.
inline std::vector<EpochSummary> fit(TrainState& state, const TrainConfig& c, const std::vector<SequenceWindow>& train,
                                     const std::vector<SequenceWindow>& val, const FitOptions& opts = {}) {
  c.validate();
  const auto prepared = prepare_all(train);
  std::ofstream metrics;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    const auto mpath = *opts.out_dir / "metrics.csv";
    const bool fresh = state.epoch == 0 || !std::filesystem::exists(mpath);
    metrics.open(mpath, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write " + mpath.string());
    if (fresh) metrics << kMetricsHeader << '\n';
  }
  std::vector<EpochSummary> history;
  while (state.epoch < c.epochs) {
    auto s = train_epoch(state, prepared, c);
    if (!val.empty() && c.val_every > 0 && state.epoch % c.val_every == 0) {
      EvalOptions eo;
      eo.k = c.val_k;
      eo.seed = c.seed;
      const auto report = evaluate_dataset(state.model, val, eo);
      if (report.windows > 0) {
        s.val_ade = report.ade;
        if (report.ade < state.best_val) {
          state.best_val = report.ade;
          if (opts.out_dir) checkpoint(state, c, *opts.out_dir / "best.stgc");
        }
      }
    }
    if (opts.out_dir) {
      metrics << metrics_row(s.mean, s.step) << '\n';
      metrics.flush();
      if (c.checkpoint_every > 0 && state.epoch % c.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04zu.stgc", state.epoch);
        checkpoint(state, c, *opts.out_dir / name);
      }
    }
    if (opts.on_epoch) opts.on_epoch(s);
    history.push_back(s);
  }
  if (opts.out_dir) checkpoint(state, c, *opts.out_dir / "last.stgc");
  return history;
}

}  // namespace stgcvae
