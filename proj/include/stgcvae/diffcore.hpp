#pragma once

// Dense float64 tensors and a define-by-run reverse-mode tape covering the
// operations the trajectory model needs. Nothing more: no general
// broadcasting, no views, no devices.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace stgcvae {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (numel(shape_) != data_.size()) {
      throw DimensionError("Tensor: shape " + shape_string(shape_) + " holds " +
                           std::to_string(numel(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double item() const {
    if (data_.size() != 1) throw DimensionError("Tensor::item on shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same(const Tensor& other, const char* op) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(shape_) + " vs " +
                           shape_string(other.shape_));
    }
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("Tensor: rank-0 shapes are not supported; use {1}");
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("Tensor: zero dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient accumulators handed to backward closures. Only nodes that
/// require a gradient get a slot.
class GradientSink {
 public:
  bool wants(Var v) const { return required_[v.id()]; }

  /// Accumulator for v, zero-initialised on first use.
  Tensor& slot(Var v) {
    auto& g = grads_[v.id()];
    if (g.empty()) g = Tensor(v.shape());
    return g;
  }

 private:
  friend class Tape;
  GradientSink(std::vector<Tensor>& grads, const std::vector<bool>& required)
      : grads_(grads), required_(required) {}
  std::vector<Tensor>& grads_;
  const std::vector<bool>& required_;
};

/// Result of a backward pass: d(loss)/d(node) for every node that reaches the
/// loss. Unreached nodes report zeros of their own shape.
class Gradients {
 public:
  Tensor of(Var v) const {
    const auto& g = grads_.at(v.id());
    return g.empty() ? Tensor(v.shape()) : g;
  }
  bool reached(Var v) const { return !grads_.at(v.id()).empty(); }

 private:
  friend class Tape;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  std::vector<Tensor> grads_;
};

/// One computation record. Rebuilt for every forward pass; single-threaded.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, GradientSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var variable(Tensor value) { return push(std::move(value), true, nullptr); }

  /// Records an op result. The closure is kept only if some parent needs a
  /// gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || required_[p.id()];
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return required_[v.id()]; }
  std::size_t size() const { return nodes_.size(); }

  void check_owner(Var v) const {
    if (v.tape() != this) throw ContractError("Var belongs to a different computation record");
  }

  /// Reverse sweep from a scalar loss. Does not mutate the record, so repeated
  /// calls return identical results.
  Gradients backward(Var loss) const {
    check_owner(loss);
    if (value(loss).size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_string(value(loss).shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    GradientSink sink(grads, required_);
    if (!required_[loss.id()]) return Gradients(std::move(grads));
    grads[loss.id()] = Tensor(value(loss).shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (grads[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(grads[i], sink);
    }
    return Gradients(std::move(grads));
  }

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), std::move(fn)});
    required_.push_back(needs_grad);
    return Var(this, nodes_.size() - 1);
  }

  // deque: references to values stay valid while the record grows.
  std::deque<Node> nodes_;
  std::vector<bool> required_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw ContractError("operands belong to different computation records");
  }
  return *a.tape();
}

enum class Bcast { same, lhs_scalar, rhs_scalar };

inline Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (a.size() == 1) return Bcast::lhs_scalar;
  if (b.size() == 1) return Bcast::rhs_scalar;
  throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()) + " are neither identical nor scalar-vs-tensor");
}

// Reduces an elementwise gradient to the operand's shape (sums for scalars).
inline void accumulate_reduced(GradientSink& sink, Var target, const Tensor& g, double factor) {
  if (!sink.wants(target)) return;
  auto& slot = sink.slot(target);
  if (slot.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += factor * g[i];
  } else {
    double s = 0.0;
    for (double v : g.data()) s += v;
    slot[0] += factor * s;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "add");
  Tensor out(kind == detail::Bcast::lhs_scalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[kind == detail::Bcast::lhs_scalar ? 0 : i] +
             bv[kind == detail::Bcast::rhs_scalar ? 0 : i];
  }
  return tape.record(std::move(out), {a, b}, [a, b](const Tensor& g, GradientSink& sink) {
    detail::accumulate_reduced(sink, a, g, 1.0);
    detail::accumulate_reduced(sink, b, g, 1.0);
  });
}

inline Var sub(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "sub");
  Tensor out(kind == detail::Bcast::lhs_scalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[kind == detail::Bcast::lhs_scalar ? 0 : i] -
             bv[kind == detail::Bcast::rhs_scalar ? 0 : i];
  }
  return tape.record(std::move(out), {a, b}, [a, b](const Tensor& g, GradientSink& sink) {
    detail::accumulate_reduced(sink, a, g, 1.0);
    detail::accumulate_reduced(sink, b, g, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "mul");
  const bool a_scalar = kind == detail::Bcast::lhs_scalar;
  const bool b_scalar = kind == detail::Bcast::rhs_scalar;
  Tensor out(a_scalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[a_scalar ? 0 : i] * bv[b_scalar ? 0 : i];
  return tape.record(std::move(out), {a, b},
                     [a, b, a_scalar, b_scalar](const Tensor& g, GradientSink& sink) {
                       const auto& av = a.value();
                       const auto& bv = b.value();
                       if (sink.wants(a)) {
                         auto& ga = sink.slot(a);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           ga[a_scalar ? 0 : i] += g[i] * bv[b_scalar ? 0 : i];
                       }
                       if (sink.wants(b)) {
                         auto& gb = sink.slot(b);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gb[b_scalar ? 0 : i] += g[i] * av[a_scalar ? 0 : i];
                       }
                     });
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return x.tape()->record(std::move(out), {x}, [x, factor](const Tensor& g, GradientSink& sink) {
    detail::accumulate_reduced(sink, x, g, factor);
  });
}

inline Var exp(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::exp(v);
  return x.tape()->record(std::move(out), {x}, [x](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * std::exp(xv[i]);
  });
}

inline Var tanh(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return x.tape()->record(std::move(out), {x}, [x](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = std::tanh(xv[i]);
      gx[i] += g[i] * (1.0 - t * t);
    }
  });
}

/// Parametric ReLU with one learned slope shared by every element.
inline Var prelu(Var x, Var slope) {
  auto& tape = detail::same_tape(x, slope);
  if (slope.value().size() != 1) {
    throw DimensionError("prelu: slope must be scalar, got " + shape_string(slope.shape()));
  }
  const double a = slope.value()[0];
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : a * v;
  return tape.record(std::move(out), {x, slope}, [x, slope](const Tensor& g, GradientSink& sink) {
    const auto& xv = x.value();
    const double a = slope.value()[0];
    if (sink.wants(x)) {
      auto& gx = sink.slot(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0.0 ? g[i] : a * g[i];
    }
    if (sink.wants(slope)) {
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] <= 0.0) s += g[i] * xv[i];
      sink.slot(slope)[0] += s;
    }
  });
}

/// Inverted dropout. Identity when not training or when rate is 0; otherwise
/// survivors are scaled by 1/(1-rate).
inline Var dropout(Var x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (auto& m : mask.data()) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape()->record(std::move(out), {x},
                          [x, mask = std::move(mask)](const Tensor& g, GradientSink& sink) {
                            if (!sink.wants(x)) return;
                            auto& gx = sink.slot(x);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                          });
}

/// Elementwise clamp; the gradient is passed through inside [lo, hi] only.
inline Var clamp(Var x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return x.tape()->record(std::move(out), {x}, [x, lo, hi](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x}, [x](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    for (auto& v : gx.data()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// ---------------------------------------------------------------------------
// Linear algebra and convolutions
// ---------------------------------------------------------------------------

/// Matrix product of two rank-2 operands.
inline Var matmul(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * bv.at(p, j);
    }
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor& g, GradientSink& sink) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (sink.wants(a)) {
      auto& ga = sink.slot(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.at(i, j) * bv.at(p, j);
          ga.at(i, p) += s;
        }
    }
    if (sink.wants(b)) {
      auto& gb = sink.slot(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av.at(i, p);
          for (std::size_t j = 0; j < n; ++j) gb.at(p, j) += aip * g.at(i, j);
        }
    }
  });
}

/// 1-D convolution along axis 1 of a (C_in, T, N) tensor, applied
/// independently to every column n. Kernel is (C_out, C_in, K); zero padding
/// on both ends of the time axis. Output is (C_out, T + 2*padding - K + 1, N).
inline Var conv_time(Var x, Var kernel, std::size_t padding) {
  auto& tape = detail::same_tape(x, kernel);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  if (xv.rank() != 3 || kv.rank() != 3 || kv.dim(1) != xv.dim(0)) {
    throw DimensionError("conv_time: input " + shape_string(xv.shape()) +
                         " incompatible with kernel " + shape_string(kv.shape()));
  }
  const std::size_t cin = xv.dim(0), t_in = xv.dim(1), n = xv.dim(2);
  const std::size_t cout = kv.dim(0), klen = kv.dim(2);
  if (klen > t_in + 2 * padding) {
    throw DimensionError("conv_time: kernel length " + std::to_string(klen) +
                         " exceeds padded input length " + std::to_string(t_in + 2 * padding));
  }
  const std::size_t t_out = t_in + 2 * padding - klen + 1;
  Tensor out({cout, t_out, n});
  const double* xd = xv.data().data();
  const double* kd = kv.data().data();
  double* od = out.data().data();
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t q = 0; q < klen; ++q) {
        const double w = kd[(o * cin + i) * klen + q];
        for (std::size_t t = 0; t < t_out; ++t) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + q) - static_cast<std::ptrdiff_t>(padding);
          if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_in)) continue;
          const double* xrow = xd + (i * t_in + static_cast<std::size_t>(s)) * n;
          double* orow = od + (o * t_out + t) * n;
          for (std::size_t c = 0; c < n; ++c) orow[c] += w * xrow[c];
        }
      }
  return tape.record(
      std::move(out), {x, kernel},
      [x, kernel, padding, cin, t_in, n, cout, klen, t_out](const Tensor& g, GradientSink& sink) {
        const double* xd = x.value().data().data();
        const double* kd = kernel.value().data().data();
        const double* gd = g.data().data();
        double* gx = sink.wants(x) ? sink.slot(x).data().data() : nullptr;
        double* gk = sink.wants(kernel) ? sink.slot(kernel).data().data() : nullptr;
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < cin; ++i)
            for (std::size_t q = 0; q < klen; ++q) {
              const std::size_t widx = (o * cin + i) * klen + q;
              const double w = kd[widx];
              double acc = 0.0;
              for (std::size_t t = 0; t < t_out; ++t) {
                const std::ptrdiff_t s =
                    static_cast<std::ptrdiff_t>(t + q) - static_cast<std::ptrdiff_t>(padding);
                if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_in)) continue;
                const std::size_t xoff = (i * t_in + static_cast<std::size_t>(s)) * n;
                const double* grow = gd + (o * t_out + t) * n;
                if (gx) {
                  for (std::size_t c = 0; c < n; ++c) gx[xoff + c] += w * grow[c];
                }
                if (gk) {
                  for (std::size_t c = 0; c < n; ++c) acc += grow[c] * xd[xoff + c];
                }
              }
              if (gk) gk[widx] += acc;
            }
      });
}

/// Adds bias[c] to every element of channel c of a (C, ...) tensor.
inline Var channel_bias(Var x, Var bias) {
  auto& tape = detail::same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw DimensionError("channel_bias: bias " + shape_string(bv.shape()) +
                         " does not match channels of " + shape_string(xv.shape()));
  }
  const std::size_t c = xv.dim(0);
  const std::size_t inner = xv.size() / c;
  Tensor out = xv;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t j = 0; j < inner; ++j) out[k * inner + j] += bv[k];
  return tape.record(std::move(out), {x, bias}, [x, bias, c, inner](const Tensor& g, GradientSink& sink) {
    if (sink.wants(x)) sink.slot(x) += g;
    if (sink.wants(bias)) {
      auto& gb = sink.slot(bias);
      for (std::size_t k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < inner; ++j) s += g[k * inner + j];
        gb[k] += s;
      }
    }
  });
}

/// Per-frame graph aggregation: out[c, t, j] = sum_i x[c, t, i] * adj[t, i, j].
/// The adjacency series is data, not a trainable quantity.
inline Var graph_aggregate(Var x, const Tensor& adjacency) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || adjacency.rank() != 3 || adjacency.dim(0) != xv.dim(1) ||
      adjacency.dim(1) != xv.dim(2) || adjacency.dim(2) != xv.dim(2)) {
    throw DimensionError("graph_aggregate: features " + shape_string(xv.shape()) +
                         " incompatible with adjacency " + shape_string(adjacency.shape()));
  }
  const std::size_t c = xv.dim(0), t = xv.dim(1), n = xv.dim(2);
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t i = 0; i < n; ++i) {
        const double xi = xv.at(k, f, i);
        if (xi == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out.at(k, f, j) += xi * adjacency.at(f, i, j);
      }
  return x.tape()->record(std::move(out), {x}, [x, adjacency, c, t, n](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t f = 0; f < t; ++f)
        for (std::size_t i = 0; i < n; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.at(k, f, j) * adjacency.at(f, i, j);
          gx.at(k, f, i) += s;
        }
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// (A, B, C) -> (B, A, C).
inline Var swap_leading_axes(Var x) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("swap_leading_axes: rank-3 input required, got " + shape_string(xv.shape()));
  const std::size_t a = xv.dim(0), b = xv.dim(1), c = xv.dim(2);
  Tensor out({b, a, c});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k) out.at(j, i, k) = xv.at(i, j, k);
  return x.tape()->record(std::move(out), {x}, [x, a, b, c](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < c; ++k) gx.at(i, j, k) += g.at(j, i, k);
  });
}

/// Concatenation along axis 0. Trailing dimensions must agree.
inline Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_channels: nothing to concatenate");
  Tape& tape = *parts.front().tape();
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  out_shape[0] = 0;
  for (const auto& p : parts) {
    tape.check_owner(p);
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw DimensionError("concat_channels: " + shape_string(s) + " does not stack with " +
                           shape_string(first));
    }
    out_shape[0] += s[0];
  }
  std::vector<double> data;
  data.reserve(numel(out_shape));
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> saved(parts.begin(), parts.end());
  return tape.record(Tensor(out_shape, std::move(data)), parts, [saved](const Tensor& g, GradientSink& sink) {
    std::size_t offset = 0;
    for (const auto& p : saved) {
      const std::size_t len = p.value().size();
      if (sink.wants(p)) {
        auto& gp = sink.slot(p);
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
      }
      offset += len;
    }
  });
}

inline Var concat_channels(std::initializer_list<Var> parts) {
  return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

/// Channels [begin, end) of a (C, ...) tensor.
inline Var slice_channels(Var x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (begin >= end || end > xv.dim(0)) {
    throw DimensionError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(xv.shape()));
  }
  const std::size_t inner = xv.size() / xv.dim(0);
  Shape s = xv.shape();
  s[0] = end - begin;
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                           xv.data().begin() + static_cast<std::ptrdiff_t>(end * inner));
  return x.tape()->record(Tensor(s, std::move(data)), {x}, [x, begin, inner](const Tensor& g, GradientSink& sink) {
    if (!sink.wants(x)) return;
    auto& gx = sink.slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * inner + i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

/// Pathwise Gaussian sample mu + exp(logvar/2) * eps, eps ~ N(0, I) drawn in
/// element order from rng. logvar is clamped to [-10, 10] first. Gradients
/// reach mu and logvar; eps is treated as data.
inline Var reparameterize(Var mu, Var logvar, Rng& rng) {
  auto& tape = detail::same_tape(mu, logvar);
  mu.value().require_same(logvar.value(), "reparameterize");
  const std::size_t size = mu.value().size();
  Tensor eps(mu.shape());
  for (auto& e : eps.data()) e = rng.normal();
  Tensor out(mu.shape());
  for (std::size_t i = 0; i < size; ++i) {
    const double lv = std::clamp(logvar.value()[i], kLogvarMin, kLogvarMax);
    out[i] = mu.value()[i] + std::exp(0.5 * lv) * eps[i];
  }
  return tape.record(std::move(out), {mu, logvar},
                     [mu, logvar, eps = std::move(eps)](const Tensor& g, GradientSink& sink) {
                       if (sink.wants(mu)) sink.slot(mu) += g;
                       if (sink.wants(logvar)) {
                         auto& gl = sink.slot(logvar);
                         const auto& lvv = logvar.value();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const double lv = lvv[i];
                           if (lv < kLogvarMin || lv > kLogvarMax) continue;
                           gl[i] += g[i] * 0.5 * std::exp(0.5 * lv) * eps[i];
                         }
                       }
                     });
}

}  // namespace stgcvae
