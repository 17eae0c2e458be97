#pragma once

// Best-of-K evaluation, displacement metrics, a constant-velocity reference
// and inference timing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cvae_model.hpp"
#include "diffcore.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "trajdata.hpp"

namespace stgcvae {

namespace detail {

inline void require_metric_shapes(const Tensor& pred, const Tensor& truth, const char* who) {
  if (pred.shape() != truth.shape() || pred.rank() != 3 || pred.dim(2) != 2) {
    throw DimensionError(std::string(who) + ": prediction " + shape_string(pred.shape()) + " vs truth " +
                         shape_string(truth.shape()));
  }
}

}  // namespace detail

/// Mean Euclidean error over every agent and frame of (T, N, 2) positions.
inline double ade(const Tensor& pred, const Tensor& truth) {
  detail::require_metric_shapes(pred, truth, "ade");
  const std::size_t t_len = pred.dim(0), n = pred.dim(1);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t a = 0; a < n; ++a)
      total += std::hypot(pred.at(t, a, 0) - truth.at(t, a, 0), pred.at(t, a, 1) - truth.at(t, a, 1));
  return total / static_cast<double>(t_len * n);
}

/// Mean Euclidean error at the final frame.
inline double fde(const Tensor& pred, const Tensor& truth) {
  detail::require_metric_shapes(pred, truth, "fde");
  const std::size_t t = pred.dim(0) - 1, n = pred.dim(1);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a)
    total += std::hypot(pred.at(t, a, 0) - truth.at(t, a, 0), pred.at(t, a, 1) - truth.at(t, a, 1));
  return total / static_cast<double>(n);
}

enum class SampleMode { latent, full };
enum class Selection { by_ade, per_metric };

struct Metrics {
  double ade = 0.0;
  double fde = 0.0;
};

/// Agent columns that count towards metrics (the robot is context only).
inline std::vector<std::size_t> scored_agents(const SequenceWindow& w) {
  std::vector<std::size_t> cols;
  for (std::size_t a = 0; a < w.agents(); ++a)
    if (!w.robot_index || *w.robot_index != a) cols.push_back(a);
  return cols;
}

/// Keeps only the given agent columns of a (T, N, 2) tensor.
inline Tensor select_agents(const Tensor& positions, const std::vector<std::size_t>& cols) {
  Tensor out({positions.dim(0), cols.size(), 2});
  for (std::size_t t = 0; t < positions.dim(0); ++t)
    for (std::size_t k = 0; k < cols.size(); ++k) {
      out.at(t, k, 0) = positions.at(t, cols[k], 0);
      out.at(t, k, 1) = positions.at(t, cols[k], 1);
    }
  return out;
}

/// Ground-truth future (12, N, 2).
inline Tensor future_positions(const SequenceWindow& w) { return slice_frames(w.positions, kObsLen, kSeqLen); }

/// Draws k predicted futures, each (12, N, 2) absolute positions anchored at
/// the last observed frame. In `latent` mode the trajectory is the predicted
/// mean; in `full` mode each step is also sampled from its bivariate Gaussian.
inline std::vector<Tensor> sample_futures(const Model& model, const PreparedWindow& prepared, std::size_t k, Rng& rng,
                                          SampleMode mode = SampleMode::latent) {
  if (k < 1) throw ParameterError("sample_futures: k must be at least 1");
  const auto& w = *prepared.window;
  const std::size_t n = w.agents();
  Tape tape;
  Binding b(tape, model.params, false);
  const LatentGaussian prior = prior_forward(b, model.config, prepared.obs_displacements, prepared.obs_adjacency);
  std::vector<Tensor> out;
  out.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    const Var z = reparameterize(prior.mu, prior.logvar, rng);
    const BivariateGaussianSeq pred{decode(b, model.config, z, prepared.obs_displacements, prepared.obs_adjacency).value()};
    Tensor future({kPredLen, n, 2});
    for (std::size_t a = 0; a < n; ++a) {
      double x = w.positions.at(kObsLen - 1, a, 0);
      double y = w.positions.at(kObsLen - 1, a, 1);
      for (std::size_t j = 0; j < kPredLen; ++j) {
        const std::size_t t = kObsLen + j;
        double dx = pred.mu_x(t, a), dy = pred.mu_y(t, a);
        if (mode == SampleMode::full) {
          const double e1 = rng.normal(), e2 = rng.normal();
          const double rho = pred.rho(t, a);
          dx += pred.sigma_x(t, a) * e1;
          dy += pred.sigma_y(t, a) * (rho * e1 + std::sqrt(std::max(1.0 - rho * rho, 0.0)) * e2);
        }
        x += dx;
        y += dy;
        future.at(j, a, 0) = x;
        future.at(j, a, 1) = y;
      }
    }
    out.push_back(std::move(future));
  }
  return out;
}

/// Best-of-k ADE/FDE for one window. With Selection::by_ade the sample with
/// the lowest ADE is chosen and its FDE reported; per_metric takes the two
/// minima independently. Robot columns are excluded from scoring.
inline Metrics best_of_k(const Model& model, const PreparedWindow& prepared, std::size_t k, Rng& rng,
                         SampleMode mode = SampleMode::latent, Selection selection = Selection::by_ade) {
  if (k < 1) throw ParameterError("best_of_k: k must be at least 1");
  const auto& w = *prepared.window;
  if (!w.has_future()) throw DimensionError("best_of_k: window has no ground-truth future");
  const auto cols = scored_agents(w);
  if (cols.empty()) throw DimensionError("best_of_k: window has no scored agents");
  const Tensor truth = select_agents(future_positions(w), cols);
  Metrics best{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  for (const auto& future : sample_futures(model, prepared, k, rng, mode)) {
    const Tensor pred = select_agents(future, cols);
    const double a = ade(pred, truth);
    const double f = fde(pred, truth);
    if (selection == Selection::per_metric) {
      best.ade = std::min(best.ade, a);
      best.fde = std::min(best.fde, f);
    } else if (a < best.ade) {
      best = {a, f};
    }
  }
  return best;
}

inline Metrics best_of_k(const Model& model, const SequenceWindow& window, std::size_t k, Rng& rng,
                         SampleMode mode = SampleMode::latent, Selection selection = Selection::by_ade) {
  return best_of_k(model, prepare_window(window), k, rng, mode, selection);
}

/// Extrapolates every agent with its last observed step for 12 frames.
inline Tensor constant_velocity_prediction(const SequenceWindow& w) {
  const std::size_t n = w.agents();
  Tensor pred({kPredLen, n, 2});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < 2; ++c) {
      const double last = w.positions.at(kObsLen - 1, a, c);
      const double v = last - w.positions.at(kObsLen - 2, a, c);
      for (std::size_t j = 0; j < kPredLen; ++j) pred.at(j, a, c) = last + v * static_cast<double>(j + 1);
    }
  return pred;
}

inline Metrics constant_velocity_baseline(const SequenceWindow& w) {
  if (!w.has_future()) throw DimensionError("constant_velocity_baseline: window has no ground-truth future");
  const auto cols = scored_agents(w);
  const Tensor pred = select_agents(constant_velocity_prediction(w), cols);
  const Tensor truth = select_agents(future_positions(w), cols);
  return {ade(pred, truth), fde(pred, truth)};
}

struct LatencyStats {
  std::vector<double> samples;  // seconds
  double mean = 0.0;
  double p95 = 0.0;
};

/// Wall-clock time of one inference step (prior, one latent sample, decode)
/// on `window`; `warmup` untimed repetitions run first.
inline LatencyStats benchmark_inference(const Model& model, const SequenceWindow& window, std::size_t repetitions,
                                        std::size_t warmup = 10) {
  const auto prepared = prepare_window(window);
  Rng rng(0);
  for (std::size_t i = 0; i < warmup; ++i) sample_futures(model, prepared, 1, rng);
  LatencyStats stats;
  stats.samples.reserve(repetitions);
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto futures = sample_futures(model, prepared, 1, rng);
    const auto t1 = std::chrono::steady_clock::now();
    if (futures.empty()) throw ContractError("benchmark_inference: no sample produced");
    stats.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!stats.samples.empty()) {
    double s = 0.0;
    for (double v : stats.samples) s += v;
    stats.mean = s / static_cast<double>(stats.samples.size());
    auto sorted = stats.samples;
    std::sort(sorted.begin(), sorted.end());
    const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size()))) - 1;
    stats.p95 = sorted[std::min(idx, sorted.size() - 1)];
  }
  return stats;
}

struct SceneMetrics {
  double ade = 0.0;
  double fde = 0.0;
  std::size_t windows = 0;
};

struct EvalReport {
  double ade = 0.0;
  double fde = 0.0;
  std::size_t k = 0;
  std::size_t windows = 0;
  std::size_t skipped = 0;
  SampleMode mode = SampleMode::latent;
  Selection selection = Selection::by_ade;
  std::map<std::string, SceneMetrics> per_scene;
  std::vector<Metrics> per_window;
  std::optional<LatencyStats> latency;
  std::size_t param_count = 0;
};

struct EvalOptions {
  std::size_t k = 20;
  std::uint64_t seed = 0;
  SampleMode mode = SampleMode::latent;
  Selection selection = Selection::by_ade;
  std::size_t jobs = 1;
  std::size_t latency_reps = 0;  // 0 skips the latency block
};

/// Mean best-of-k metrics over windows. Window i draws from a stream seeded
/// by (seed, i), so results do not depend on `jobs`. Windows without a
/// scored agent or future are skipped and counted.
inline EvalReport evaluate_dataset(const Model& model, const std::vector<SequenceWindow>& windows,
                                   const EvalOptions& opts = {}) {
  if (opts.k < 1) throw ParameterError("evaluate_dataset: k must be at least 1");
  EvalReport report;
  report.k = opts.k;
  report.mode = opts.mode;
  report.selection = opts.selection;
  report.param_count = count_params(model.params);

  std::vector<std::optional<Metrics>> results(windows.size());
  const auto work = [&](std::size_t i) {
    const auto& w = windows[i];
    if (!w.has_future() || scored_agents(w).empty()) return;
    Rng rng(derive_seed(opts.seed, i));
    results[i] = best_of_k(model, w, opts.k, rng, opts.mode, opts.selection);
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, windows.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < windows.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::mutex err_mu;
    std::exception_ptr err;
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        try {
          for (std::size_t i = j; i < windows.size(); i += jobs) work(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
  }

  // Accumulate in window order regardless of scheduling.
  double sum_ade = 0.0, sum_fde = 0.0;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (!results[i]) {
      ++report.skipped;
      continue;
    }
    const auto m = *results[i];
    report.per_window.push_back(m);
    sum_ade += m.ade;
    sum_fde += m.fde;
    auto& s = report.per_scene[windows[i].scene];
    s.ade += m.ade;
    s.fde += m.fde;
    ++s.windows;
    ++report.windows;
  }
  if (report.windows > 0) {
    report.ade = sum_ade / static_cast<double>(report.windows);
    report.fde = sum_fde / static_cast<double>(report.windows);
  }
  for (auto& [name, s] : report.per_scene) {
    s.ade /= static_cast<double>(s.windows);
    s.fde /= static_cast<double>(s.windows);
  }
  if (opts.latency_reps > 0 && !windows.empty()) {
    report.latency = benchmark_inference(model, windows.front(), opts.latency_reps);
  }
  return report;
}

inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "ade = " << r.ade << '\n';
  os << "fde = " << r.fde << '\n';
  os << "k = " << r.k << '\n';
  os << "windows = " << r.windows << '\n';
  os << "skipped = " << r.skipped << '\n';
  os << "sample_mode = " << (r.mode == SampleMode::latent ? "latent" : "full") << '\n';
  os << "selection = " << (r.selection == Selection::by_ade ? "ade" : "per_metric") << '\n';
  os << "param_count = " << r.param_count << '\n';
  if (r.latency) {
    os << "latency_mean_s = " << r.latency->mean << '\n';
    os << "latency_p95_s = " << r.latency->p95 << '\n';
    os << "latency_reps = " << r.latency->samples.size() << '\n';
  }
  for (const auto& [name, s] : r.per_scene) {
    os << "\n[scene." << name << "]\n";
    os << "ade = " << s.ade << '\n';
    os << "fde = " << s.fde << '\n';
    os << "windows = " << s.windows << '\n';
  }
  return os.str();
}

inline constexpr const char* kPredictionCsvHeader = "agent_id,frame,sample_id,x,y";

/// Prediction CSV for one window: sampled futures (frames 8..19, sample ids
/// 0..k-1) and, when known, ground truth for all frames with sample_id -1.
inline std::string prediction_csv(const SequenceWindow& w, const std::vector<Tensor>& futures) {
  std::ostringstream os;
  os.precision(10);
  os << kPredictionCsvHeader << '\n';
  for (std::size_t a = 0; a < w.agents(); ++a)
    for (std::size_t t = 0; t < w.frames(); ++t)
      os << w.agent_ids[a] << ',' << t << ",-1," << w.positions.at(t, a, 0) << ',' << w.positions.at(t, a, 1) << '\n';
  for (std::size_t s = 0; s < futures.size(); ++s)
    for (std::size_t a = 0; a < w.agents(); ++a)
      for (std::size_t j = 0; j < kPredLen; ++j)
        os << w.agent_ids[a] << ',' << kObsLen + j << ',' << s << ',' << futures[s].at(j, a, 0) << ','
           << futures[s].at(j, a, 1) << '\n';
  return os.str();
}

/// Writes one CSV per window into `dir` (window_00000.csv, ...).
inline void export_predictions(const Model& model, const std::vector<SequenceWindow>& windows, std::size_t k,
                               std::uint64_t seed, SampleMode mode, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const auto futures = sample_futures(model, prepare_window(windows[i]), k, rng, mode);
    char name[32];
    std::snprintf(name, sizeof(name), "window_%05zu.csv", i);
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << prediction_csv(windows[i], futures);
  }
}

}  // namespace stgcvae
