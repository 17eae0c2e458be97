#pragma once

// Synthetic walker corpora for smoke tests and overfitting checks.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "trajdata.hpp"

namespace stgcvae {

enum class Pattern { const_velocity, turn, stop };

inline const char* pattern_name(Pattern p) {
  switch (p) {
    case Pattern::const_velocity: return "const-velocity";
    case Pattern::turn: return "turn";
    case Pattern::stop: return "stop";
  }
  return "?";
}

inline Pattern pattern_from_name(const std::string& s) {
  if (s == "const-velocity") return Pattern::const_velocity;
  if (s == "turn") return Pattern::turn;
  if (s == "stop") return Pattern::stop;
  throw ConfigError("unknown pattern '" + s + "' (expected const-velocity, turn or stop)");
}

enum class TurnSide { left, right, random };

inline TurnSide turn_side_from_name(const std::string& s) {
  if (s == "left") return TurnSide::left;
  if (s == "right") return TurnSide::right;
  if (s == "random") return TurnSide::random;
  throw ConfigError("unknown turn side '" + s + "' (expected left, right or random)");
}

inline constexpr std::size_t kTurnFrame = 10;
inline constexpr std::size_t kStopFrame = 12;

struct SyntheticOptions {
  std::size_t agents = 1;
  std::size_t windows = 8;
  Pattern pattern = Pattern::const_velocity;
  std::uint64_t seed = 0;
  TurnSide turn_side = TurnSide::left;
  double jitter = 0.02;     // std of positional noise, meters
  double min_speed = 0.3;   // meters per frame
  double max_speed = 0.6;
};

/// Walkers with a random heading and speed. `turn` agents rotate their
/// velocity by 90 degrees at frame 10 (counter-clockwise for `left`); `stop` agents halt at
/// frame 12. Every position then receives independent Gaussian jitter.
inline std::vector<SequenceWindow> generate_synthetic(const SyntheticOptions& o) {
  if (o.agents == 0) throw ParameterError("gen-synthetic: agents must be at least 1");
  if (o.jitter < 0.0 || o.min_speed > o.max_speed) throw ParameterError("gen-synthetic: invalid speed or jitter");
  Rng rng(o.seed);
  std::vector<SequenceWindow> out;
  out.reserve(o.windows);
  for (std::size_t wi = 0; wi < o.windows; ++wi) {
    SequenceWindow w;
    w.scene = pattern_name(o.pattern);
    w.start_frame = static_cast<std::int64_t>(wi * kSeqLen);
    w.positions = Tensor({kSeqLen, o.agents, 2});
    for (std::size_t a = 0; a < o.agents; ++a) {
      w.agent_ids.push_back(static_cast<std::int32_t>(a));
      const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double speed = rng.uniform(o.min_speed, o.max_speed);
      double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
      const bool coin = rng.bernoulli(0.5);
      const double side = o.turn_side == TurnSide::left    ? 1.0
                          : o.turn_side == TurnSide::right ? -1.0
                                                           : (coin ? 1.0 : -1.0);
      double x = rng.uniform(-5.0, 5.0) + 4.0 * static_cast<double>(a);
      double y = rng.uniform(-5.0, 5.0);
      for (std::size_t t = 0; t < kSeqLen; ++t) {
        if (t > 0) {
          x += vx;
          y += vy;
        }
        w.positions.at(t, a, 0) = x;
        w.positions.at(t, a, 1) = y;
        if (o.pattern == Pattern::turn && t == kTurnFrame) {
          const double nvx = -side * vy, nvy = side * vx;
          vx = nvx;
          vy = nvy;
        } else if (o.pattern == Pattern::stop && t == kStopFrame) {
          vx = vy = 0.0;
        }
      }
    }
    if (o.jitter > 0.0)
      for (auto& v : w.positions.data()) v += rng.normal(0.0, o.jitter);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace stgcvae
