#pragma once

// Training objective: bivariate Gaussian reconstruction NLL plus an annealed
// KL term between the recognition and prior latents.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "cvae_model.hpp"
#include "diffcore.hpp"
#include "errors.hpp"

namespace stgcvae {

inline constexpr double kRhoFloor = 1e-9;  // lower bound on 1 - rho^2

/// Mean over (agent, frame) pairs in [frame_begin, frame_end) of
/// -log N(target | mu, Sigma), where `pred` is the raw (5, T, N) decoder
/// output and `target` the (2, T, N) ground-truth displacements.
inline Var bivariate_nll(Var pred, const Tensor& target, std::size_t frame_begin, std::size_t frame_end) {
  const auto& p = pred.value();
  if (p.rank() != 3 || p.dim(0) != kOutputChannels || target.rank() != 3 || target.dim(0) != 2 ||
      target.dim(1) != p.dim(1) || target.dim(2) != p.dim(2)) {
    throw DimensionError("bivariate_nll: prediction " + shape_string(p.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  if (frame_begin >= frame_end || frame_end > p.dim(1)) {
    throw DimensionError("bivariate_nll: frame slice [" + std::to_string(frame_begin) + ", " +
                         std::to_string(frame_end) + ") outside " + std::to_string(p.dim(1)) + " frames");
  }
  const std::size_t n = p.dim(2);
  const double count = static_cast<double>((frame_end - frame_begin) * n);
  const double log_two_pi = std::log(2.0 * std::numbers::pi);

  double total = 0.0;
  for (std::size_t t = frame_begin; t < frame_end; ++t)
    for (std::size_t a = 0; a < n; ++a) {
      const double sx = std::exp(std::max(p.at(2, t, a), kSigmaLogFloor));
      const double sy = std::exp(std::max(p.at(3, t, a), kSigmaLogFloor));
      const double rho = std::tanh(p.at(4, t, a));
      const double om = std::max(1.0 - rho * rho, kRhoFloor);
      const double zx = (target.at(0, t, a) - p.at(0, t, a)) / sx;
      const double zy = (target.at(1, t, a) - p.at(1, t, a)) / sy;
      const double quad = zx * zx + zy * zy - 2.0 * rho * zx * zy;
      total += log_two_pi + std::log(sx) + std::log(sy) + 0.5 * std::log(om) + quad / (2.0 * om);
    }

  return pred.tape()->record(
      Tensor::scalar(total / count), {pred},
      [pred, target, frame_begin, frame_end, n, count](const Tensor& g, GradientSink& sink) {
        if (!sink.wants(pred)) return;
        const auto& p = pred.value();
        auto& gp = sink.slot(pred);
        const double scale = g[0] / count;
        for (std::size_t t = frame_begin; t < frame_end; ++t)
          for (std::size_t a = 0; a < n; ++a) {
            const bool sx_floor = p.at(2, t, a) < kSigmaLogFloor;
            const bool sy_floor = p.at(3, t, a) < kSigmaLogFloor;
            const double sx = std::exp(std::max(p.at(2, t, a), kSigmaLogFloor));
            const double sy = std::exp(std::max(p.at(3, t, a), kSigmaLogFloor));
            const double rho = std::tanh(p.at(4, t, a));
            const double raw_om = 1.0 - rho * rho;
            const bool om_floor = raw_om < kRhoFloor;
            const double om = om_floor ? kRhoFloor : raw_om;
            const double zx = (target.at(0, t, a) - p.at(0, t, a)) / sx;
            const double zy = (target.at(1, t, a) - p.at(1, t, a)) / sy;
            const double quad = zx * zx + zy * zy - 2.0 * rho * zx * zy;

            gp.at(0, t, a) += scale * -(zx - rho * zy) / (sx * om);
            gp.at(1, t, a) += scale * -(zy - rho * zx) / (sy * om);
            if (!sx_floor) gp.at(2, t, a) += scale * (1.0 - (zx * zx - rho * zx * zy) / om);
            if (!sy_floor) gp.at(3, t, a) += scale * (1.0 - (zy * zy - rho * zx * zy) / om);
            const double d_rho = om_floor ? -zx * zy / om : -rho / om - zx * zy / om + quad * rho / (om * om);
            gp.at(4, t, a) += scale * d_rho * raw_om;  // d tanh(r)/dr = 1 - rho^2
          }
      });
}

/// KL(q || p) for diagonal Gaussians given as (mean, log-variance) tensors of
/// shape (L, T, N): summed over latent channels and time, averaged over the
/// N agents.
inline Var kl_diag_gaussians(const LatentGaussian& q, const LatentGaussian& p) {
  auto& tape = detail::same_tape(q.mu, p.mu);
  tape.check_owner(q.logvar);
  tape.check_owner(p.logvar);
  const auto& qm = q.mu.value();
  const Shape& shape = qm.shape();
  for (const Var v : {q.logvar, p.mu, p.logvar}) {
    if (v.shape() != shape) {
      throw DimensionError("kl_diag_gaussians: shape " + shape_string(v.shape()) + " vs " + shape_string(shape));
    }
  }
  const double agents = static_cast<double>(shape.back());
  const auto& ql = q.logvar.value();
  const auto& pm = p.mu.value();
  const auto& pl = p.logvar.value();
  double total = 0.0;
  for (std::size_t i = 0; i < qm.size(); ++i) {
    const double d = qm[i] - pm[i];
    total += 0.5 * (pl[i] - ql[i] + (std::exp(ql[i]) + d * d) / std::exp(pl[i]) - 1.0);
  }
  const Var qmu = q.mu, qlv = q.logvar, pmu = p.mu, plv = p.logvar;
  return tape.record(Tensor::scalar(total / agents), {qmu, qlv, pmu, plv},
                     [qmu, qlv, pmu, plv, agents](const Tensor& g, GradientSink& sink) {
                       const double s = g[0] / agents;
                       const auto& qm = qmu.value();
                       const auto& ql = qlv.value();
                       const auto& pm = pmu.value();
                       const auto& pl = plv.value();
                       Tensor* gqm = sink.wants(qmu) ? &sink.slot(qmu) : nullptr;
                       Tensor* gql = sink.wants(qlv) ? &sink.slot(qlv) : nullptr;
                       Tensor* gpm = sink.wants(pmu) ? &sink.slot(pmu) : nullptr;
                       Tensor* gpl = sink.wants(plv) ? &sink.slot(plv) : nullptr;
                       for (std::size_t i = 0; i < qm.size(); ++i) {
                         const double inv_vp = std::exp(-pl[i]);
                         const double vq = std::exp(ql[i]);
                         const double d = qm[i] - pm[i];
                         if (gqm) (*gqm)[i] += s * d * inv_vp;
                         if (gpm) (*gpm)[i] -= s * d * inv_vp;
                         if (gql) (*gql)[i] += s * 0.5 * (vq * inv_vp - 1.0);
                         if (gpl) (*gpl)[i] += s * 0.5 * (1.0 - (vq + d * d) * inv_vp);
                       }
                     });
}

/// Linear KL annealing: weight = slope * min(epoch, cap_epochs).
struct AnnealSchedule {
  double slope = 2e-5;
  std::size_t cap_epochs = 250;
};

inline double anneal_weight(long long epoch, const AnnealSchedule& schedule = {}) {
  if (epoch < 0) throw ParameterError("anneal_weight: epoch must be nonnegative, got " + std::to_string(epoch));
  const auto capped = std::min<unsigned long long>(static_cast<unsigned long long>(epoch), schedule.cap_epochs);
  return schedule.slope * static_cast<double>(capped);
}

struct LossReport {
  double total = 0.0;
  double rec = 0.0;
  double kl = 0.0;
  double weight = 0.0;
  std::size_t epoch = 0;
};

struct Loss {
  Var total;
  LossReport report;
};

/// rec + w_KL(epoch) * kl, with reconstruction over all decoded frames.
inline Loss total_loss(Var pred, const Tensor& target, const LatentGaussian& q, const LatentGaussian& p,
                       std::size_t epoch, const AnnealSchedule& schedule = {}) {
  const Var rec = bivariate_nll(pred, target, 0, target.dim(1));
  const Var kl = kl_diag_gaussians(q, p);
  const double w = anneal_weight(static_cast<long long>(epoch), schedule);
  const Var total = add(rec, scale(kl, w));
  LossReport r;
  r.rec = rec.value()[0];
  r.kl = kl.value()[0];
  r.weight = w;
  r.total = r.rec + w * r.kl;
  r.epoch = epoch;
  return {total, r};
}

inline constexpr const char* kMetricsHeader = "epoch,step,total,rec,kl,w_kl";

inline std::string metrics_row(const LossReport& r, std::size_t step) {
  std::ostringstream os;
  os.precision(10);
  os << r.epoch << ',' << step << ',' << r.total << ',' << r.rec << ',' << r.kl << ',' << r.weight;
  return os.str();
}

}  // namespace stgcvae
