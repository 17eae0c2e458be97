#pragma once

// Per-frame social adjacency: inverse-distance kernel and symmetric
// normalisation of A + I.

#include <cmath>
#include <vector>

#include "diffcore.hpp"
#include "errors.hpp"

namespace stgcvae {

/// Distances at or below this are treated as co-located (weight 0).
inline constexpr double kColocationEps = 1e-6;

/// Stack of T per-frame N x N matrices, stored as a (T, N, N) tensor.
struct AdjacencySeries {
  Tensor matrices;
  bool normalized = false;

  std::size_t frames() const { return matrices.dim(0); }
  std::size_t agents() const { return matrices.dim(1); }
};

/// Raw kernel for one frame. `positions` is (N, 2); returns (N, N) with
/// a_ij = 1 / |p_i - p_j| and zeros on the diagonal and for co-located pairs.
inline Tensor kernel_adjacency(const Tensor& positions) {
  if (positions.rank() != 2 || positions.dim(1) != 2) {
    throw DimensionError("kernel_adjacency: expected (N, 2), got " + shape_string(positions.shape()));
  }
  const std::size_t n = positions.dim(0);
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = std::hypot(positions.at(i, 0) - positions.at(j, 0), positions.at(i, 1) - positions.at(j, 1));
      const double w = d > kColocationEps ? 1.0 / d : 0.0;
      a.at(i, j) = w;
      a.at(j, i) = w;
    }
  return a;
}

/// Raw adjacency for frames [begin, end) of a (T, N, 2) position tensor.
inline AdjacencySeries build_adjacency(const Tensor& positions, std::size_t begin, std::size_t end) {
  if (positions.rank() != 3 || positions.dim(2) != 2 || begin >= end || end > positions.dim(0)) {
    throw DimensionError("build_adjacency: bad frame range for positions " + shape_string(positions.shape()));
  }
  const std::size_t n = positions.dim(1);
  AdjacencySeries series{Tensor({end - begin, n, n}), false};
  Tensor frame({n, 2});
  for (std::size_t t = begin; t < end; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      frame.at(i, 0) = positions.at(t, i, 0);
      frame.at(i, 1) = positions.at(t, i, 1);
    }
    const Tensor a = kernel_adjacency(frame);
    std::copy(a.data().begin(), a.data().end(), series.matrices.data().begin() + static_cast<std::ptrdiff_t>((t - begin) * n * n));
  }
  return series;
}

/// Each frame A -> D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I.
inline AdjacencySeries normalize(const AdjacencySeries& raw) {
  if (raw.normalized) return raw;
  const std::size_t t_len = raw.frames(), n = raw.agents();
  AdjacencySeries out{Tensor(raw.matrices.shape()), true};
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double deg = 1.0;
      for (std::size_t j = 0; j < n; ++j) deg += raw.matrices.at(t, i, j);
      inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double a = raw.matrices.at(t, i, j) + (i == j ? 1.0 : 0.0);
        out.matrices.at(t, i, j) = inv_sqrt_deg[i] * a * inv_sqrt_deg[j];
      }
  }
  return out;
}

/// Extends a series to `total_frames` by repeating its final frame.
inline AdjacencySeries extend_with_last_frame(const AdjacencySeries& a, std::size_t total_frames) {
  const std::size_t have = a.frames(), n = a.agents();
  if (total_frames <= have) return a;
  std::vector<double> data(a.matrices.data().begin(), a.matrices.data().end());
  const std::vector<double> last(data.end() - static_cast<std::ptrdiff_t>(n * n), data.end());
  for (std::size_t t = have; t < total_frames; ++t) data.insert(data.end(), last.begin(), last.end());
  return AdjacencySeries{Tensor({total_frames, n, n}, std::move(data)), a.normalized};
}

/// Normalised adjacency over frames [begin, end), padded to `total_frames`
/// by repeating the last computed frame.
inline AdjacencySeries normalized_adjacency(const Tensor& positions, std::size_t begin, std::size_t end,
                                            std::size_t total_frames = 0) {
  return extend_with_last_frame(normalize(build_adjacency(positions, begin, end)), total_frames);
}

}  // namespace stgcvae
