#pragma once

// The three networks of the conditional VAE over spatio-temporal graphs:
// conditional prior, recognition (approximate posterior) and decoder. All
// layers are convolutional over (channels, time, agents) tensors, so one set
// of parameters serves any number of agents.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "binary_io.hpp"
#include "diffcore.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "stgraph.hpp"
#include "trajdata.hpp"

namespace stgcvae {

inline constexpr std::size_t kInputChannels = 2;
inline constexpr std::size_t kOutputChannels = 5;  // mu_x, mu_y, log sigma_x, log sigma_y, atanh rho
inline constexpr double kSigmaLogFloor = -10.0;

struct ModelConfig {
  std::size_t latent_length = 20;
  std::size_t embed_channels = 5;
  std::size_t prior_layers = 3;  // GCN + TCN pairs in the prior embedding
  std::size_t recog_layers = 2;  // GCN + TCN pairs in the recognition embedding
  std::size_t txp_layers = 8;    // convolutions per TXP-CNN block
  std::size_t kernel = 3;        // temporal kernel for TCN and TXP-CNN layers
  double dropout = 0.1;          // recognition network, training only
  double posterior_noise = 0.01; // std of noise added to the recognition mean, training only

  void validate() const {
    if (latent_length == 0 || embed_channels == 0 || prior_layers == 0 || recog_layers == 0 || txp_layers == 0 ||
        kernel == 0) {
      throw ConfigError("model config: dimensions and layer counts must be positive");
    }
    if (kernel % 2 == 0) throw ConfigError("model config: temporal kernel must be odd");
    if (prior_layers <= recog_layers) {
      throw ConfigError("model config: prior network must have more layers than the recognition network");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0, 1)");
    if (!(posterior_noise >= 0.0)) throw ConfigError("model config: posterior_noise must be nonnegative");
  }

  std::size_t padding() const { return kernel / 2; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Network { prior, recognition, decoder };

inline const char* network_name(Network n) {
  switch (n) {
    case Network::prior: return "prior";
    case Network::recognition: return "recognition";
    case Network::decoder: return "decoder";
  }
  return "?";
}

enum class ParamKind { weight, bias, slope };

struct ParamEntry {
  std::string name;
  Network network;
  ParamKind kind;
  Tensor value;
};

/// Named parameter tensors in declaration order.
class ParamStore {
 public:
  void add(std::string name, Network network, ParamKind kind, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(ParamEntry{std::move(name), network, kind, std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::optional<std::size_t> find(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const ParamEntry& entry(std::size_t i) const { return entries_.at(i); }
  ParamEntry& entry(std::size_t i) { return entries_.at(i); }
  const Tensor& get(const std::string& name) const { return entries_.at(at(name)).value; }
  Tensor& get(const std::string& name) { return entries_.at(at(name)).value; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.network != y.network || !(x.value == y.value)) return false;
    }
    return true;
  }

 private:
  std::size_t at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::size_t count_params(const ParamStore& store) {
  std::size_t total = 0;
  for (const auto& e : store.entries()) total += e.value.size();
  return total;
}

inline std::size_t count_params(const ParamStore& store, Network network) {
  std::size_t total = 0;
  for (const auto& e : store.entries())
    if (e.network == network) total += e.value.size();
  return total;
}

/// Connects a ParamStore to one computation record. Each parameter becomes a
/// tape leaf on first use. In declaring mode, unknown names are added to the
/// store with zero values; this is how init_params discovers the layout.
class Binding {
 public:
  enum class Mode { trainable, frozen, declaring };

  Binding(Tape& tape, ParamStore& store, Mode mode) : tape_(tape), store_(&store), mode_(mode) {}
  Binding(Tape& tape, const ParamStore& store, bool trainable = true)
      : tape_(tape), store_(const_cast<ParamStore*>(&store)), mode_(trainable ? Mode::trainable : Mode::frozen) {}

  Tape& tape() { return tape_; }

  Var param(const std::string& name, Network network, ParamKind kind, const Shape& shape) {
    auto idx = store_->find(name);
    if (!idx) {
      if (mode_ != Mode::declaring) throw ConfigError("parameter store has no entry " + name);
      store_->add(name, network, kind, Tensor(shape));
      idx = store_->size() - 1;
    }
    if (*idx >= vars_.size()) vars_.resize(store_->size());
    if (vars_[*idx]) return *vars_[*idx];
    const auto& value = store_->entry(*idx).value;
    if (value.shape() != shape) {
      throw DimensionError("parameter " + name + " has shape " + shape_string(value.shape()) + ", layer expects " +
                           shape_string(shape));
    }
    const Var v = mode_ == Mode::frozen ? tape_.constant(value) : tape_.variable(value);
    vars_[*idx] = v;
    return v;
  }

  Var constant(Tensor t) { return tape_.constant(std::move(t)); }

  /// Gradient per store entry, zeros for entries the loss never touched.
  std::vector<Tensor> gradients(const Gradients& grads) const {
    std::vector<Tensor> out;
    out.reserve(store_->size());
    for (std::size_t i = 0; i < store_->size(); ++i) {
      if (i < vars_.size() && vars_[i]) {
        out.push_back(grads.of(*vars_[i]));
      } else {
        out.emplace_back(store_->entry(i).value.shape());
      }
    }
    return out;
  }

 private:
  Tape& tape_;
  ParamStore* store_;
  Mode mode_;
  std::vector<std::optional<Var>> vars_;
};

/// Diagonal Gaussian over the latent transition tensor, (L, T_obs, N).
struct LatentGaussian {
  Var mu;
  Var logvar;
};

/// Decoder output viewed as per-agent per-frame bivariate Gaussians. `raw` is
/// (5, T_out, N): mu_x, mu_y, s_x, s_y, r with sigma = exp(s), rho = tanh(r).
struct BivariateGaussianSeq {
  Tensor raw;

  std::size_t frames() const { return raw.dim(1); }
  std::size_t agents() const { return raw.dim(2); }
  double mu_x(std::size_t t, std::size_t n) const { return raw.at(0, t, n); }
  double mu_y(std::size_t t, std::size_t n) const { return raw.at(1, t, n); }
  double sigma_x(std::size_t t, std::size_t n) const { return std::exp(std::max(raw.at(2, t, n), kSigmaLogFloor)); }
  double sigma_y(std::size_t t, std::size_t n) const { return std::exp(std::max(raw.at(3, t, n), kSigmaLogFloor)); }
  double rho(std::size_t t, std::size_t n) const { return std::tanh(raw.at(4, t, n)); }
};

enum class RunMode { train, eval };

namespace layers {

inline Var conv(Binding& b, Network net, const std::string& name, Var x, std::size_t cin, std::size_t cout,
                std::size_t kernel, std::size_t padding) {
  const Var w = b.param(name + ".weight", net, ParamKind::weight, {cout, cin, kernel});
  const Var bias = b.param(name + ".bias", net, ParamKind::bias, {cout});
  return channel_bias(conv_time(x, w, padding), bias);
}

inline Var activation(Binding& b, Network net, const std::string& name, Var x) {
  return prelu(x, b.param(name, net, ParamKind::slope, {1}));
}

/// Per-frame graph convolution: channel mix, then aggregation over the
/// normalised adjacency of each frame.
inline Var graph_conv(Binding& b, Network net, const std::string& name, Var x, const AdjacencySeries& adj,
                      std::size_t cin, std::size_t cout) {
  return graph_aggregate(conv(b, net, name, x, cin, cout, 1, 0), adj.matrices);
}

/// Convolution over the time axis treated as channels: (C, T_in, N) ->
/// (C, T_out, N), kernel running along C.
inline Var time_extrapolate(Binding& b, Network net, const std::string& name, Var x, std::size_t t_in,
                            std::size_t t_out, std::size_t kernel, std::size_t padding) {
  return swap_leading_axes(conv(b, net, name, swap_leading_axes(x), t_in, t_out, kernel, padding));
}

}  // namespace layers

/// Spatio-temporal graph embedding: `blocks` residual blocks, each
///   prelu(tcn(prelu(gcn(x))) + residual(x)).
/// The residual is identity when shapes agree, a 1x1 convolution when only
/// channels change, and a matching temporal convolution when the last block
/// shortens time to `out_frames`. Dropout follows each TCN when training.
inline Var stgcnn_embed(Binding& b, Network net, const std::string& prefix, Var v, const AdjacencySeries& adj,
                        const ModelConfig& cfg, std::size_t blocks, std::size_t out_frames, double dropout_rate,
                        Rng* rng, bool training) {
  const auto& shape = v.shape();
  if (shape.size() != 3 || adj.frames() != shape[1] || adj.agents() != shape[2]) {
    throw DimensionError("stgcnn_embed: features " + shape_string(shape) + " do not match adjacency " +
                         shape_string(adj.matrices.shape()));
  }
  const std::size_t t_in = shape[1];
  if (out_frames > t_in || out_frames == 0) throw DimensionError("stgcnn_embed: cannot produce more frames than given");
  const std::size_t width = cfg.embed_channels;
  Var h = v;
  std::size_t cin = shape[0];
  for (std::size_t k = 0; k < blocks; ++k) {
    const std::string name = prefix + ".block" + std::to_string(k);
    const bool reduce = k + 1 == blocks && out_frames != t_in;
    const std::size_t tk = reduce ? t_in - out_frames + 1 : cfg.kernel;
    const std::size_t pad = reduce ? 0 : cfg.padding();

    Var g = layers::activation(b, net, name + ".gcn_prelu", layers::graph_conv(b, net, name + ".gcn", h, adj, cin, width));
    Var t = layers::conv(b, net, name + ".tcn", g, width, width, tk, pad);
    if (training && dropout_rate > 0.0) t = dropout(t, dropout_rate, *rng, true);
    Var res = h;
    if (reduce) {
      res = layers::conv(b, net, name + ".residual", h, cin, width, tk, 0);
    } else if (cin != width) {
      res = layers::conv(b, net, name + ".residual", h, cin, width, 1, 0);
    }
    h = layers::activation(b, net, name + ".out_prelu", add(t, res));
    cin = width;
  }
  return h;
}

namespace detail {

inline LatentGaussian latent_heads(Binding& b, Network net, const std::string& prefix, Var emb, const ModelConfig& cfg) {
  const Var mu = layers::conv(b, net, prefix + ".mu", emb, cfg.embed_channels, cfg.latent_length, 1, 0);
  const Var lv = layers::conv(b, net, prefix + ".logvar", emb, cfg.embed_channels, cfg.latent_length, 1, 0);
  return {mu, clamp(lv, kLogvarMin, kLogvarMax)};
}

inline void require_frames(const Tensor& features, std::size_t frames, const char* who) {
  if (features.rank() != 3 || features.dim(0) != kInputChannels || features.dim(1) != frames) {
    throw DimensionError(std::string(who) + ": expected (2, " + std::to_string(frames) + ", N) features, got " +
                         shape_string(features.shape()));
  }
}

}  // namespace detail

/// Conditional prior p(z | observed graph). `obs` is (2, 8, N) displacements,
/// `adj` the normalised 8-frame adjacency. Deterministic.
inline LatentGaussian prior_forward(Binding& b, const ModelConfig& cfg, const Tensor& obs, const AdjacencySeries& adj) {
  detail::require_frames(obs, kObsLen, "prior_forward");
  const Var v = b.constant(obs);
  const Var emb = stgcnn_embed(b, Network::prior, "prior", v, adj, cfg, cfg.prior_layers, kObsLen, 0.0, nullptr, false);
  return detail::latent_heads(b, Network::prior, "prior", emb, cfg);
}

/// Recognition network q(z | observed + future graph). `full` is (2, 20, N);
/// the last embedding block reduces time 20 -> 8 so the latent grid matches
/// the prior. In training mode dropout runs inside the embedding and
/// N(0, posterior_noise^2) is added to the mean.
inline LatentGaussian recog_forward(Binding& b, const ModelConfig& cfg, const Tensor& full, const AdjacencySeries& adj,
                                    RunMode mode, Rng& rng) {
  detail::require_frames(full, kSeqLen, "recog_forward");
  const bool training = mode == RunMode::train;
  const Var v = b.constant(full);
  const Var emb = stgcnn_embed(b, Network::recognition, "recog", v, adj, cfg, cfg.recog_layers, kObsLen, cfg.dropout,
                               &rng, training);
  LatentGaussian q = detail::latent_heads(b, Network::recognition, "recog", emb, cfg);
  if (training && cfg.posterior_noise > 0.0) {
    Tensor noise(q.mu.shape());
    for (auto& e : noise.data()) e = rng.normal(0.0, cfg.posterior_noise);
    q.mu = add(q.mu, b.constant(std::move(noise)));
  }
  return q;
}

/// Decoder p(future | z, observed graph). Returns raw (5, 20, N) output; the
/// last 12 frames are the prediction. Future frames reuse the final observed
/// adjacency.
inline Var decode(Binding& b, const ModelConfig& cfg, Var z, const Tensor& obs, const AdjacencySeries& adj) {
  detail::require_frames(obs, kObsLen, "decode");
  const auto& zs = z.shape();
  if (zs.size() != 3 || zs[0] != cfg.latent_length || zs[1] != kObsLen || zs[2] != obs.dim(2)) {
    throw DimensionError("decode: latent " + shape_string(zs) + " incompatible with observation " +
                         shape_string(obs.shape()));
  }
  if (adj.frames() != kObsLen || adj.agents() != obs.dim(2)) {
    throw DimensionError("decode: adjacency " + shape_string(adj.matrices.shape()) + " does not match observation");
  }
  constexpr auto net = Network::decoder;
  const std::size_t width = cfg.embed_channels;
  const std::size_t k = cfg.kernel, pad = cfg.padding();

  const Var obs_emb = layers::activation(
      b, net, "dec.obs.prelu", layers::graph_conv(b, net, "dec.obs.gcn", b.constant(obs), adj, kInputChannels, width));
  const Var z_emb =
      layers::activation(b, net, "dec.latent.prelu", layers::conv(b, net, "dec.latent.conv", z, cfg.latent_length, width, 1, 0));

  // Cascade fusion, then the first TXP-CNN block extends time 8 -> 20.
  const auto extend = [&](Var x) {
    return layers::activation(b, net, "dec.txp1.layer0.prelu",
                              layers::time_extrapolate(b, net, "dec.txp1.layer0", x, kObsLen, kSeqLen, k, pad));
  };
  Var h = extend(concat_channels({obs_emb, z_emb}));
  for (std::size_t l = 1; l < cfg.txp_layers; ++l) {
    const std::string name = "dec.txp1.layer" + std::to_string(l);
    h = add(layers::activation(b, net, name + ".prelu", layers::time_extrapolate(b, net, name, h, kSeqLen, kSeqLen, k, pad)),
            h);
  }

  // Latent skip: the re-embedded z, extended by the same extrapolation, joins
  // the latent half of the fused channels.
  const Var z_skip = extend(z_emb);
  h = concat_channels({slice_channels(h, 0, width), add(slice_channels(h, width, 2 * width), z_skip)});

  // Second TXP-CNN block at 20 frames, opened by a graph convolution.
  const AdjacencySeries adj_ext = extend_with_last_frame(adj, kSeqLen);
  h = add(layers::activation(b, net, "dec.txp2.gcn_prelu",
                             layers::graph_conv(b, net, "dec.txp2.gcn", h, adj_ext, 2 * width, 2 * width)),
          h);
  for (std::size_t l = 0; l < cfg.txp_layers; ++l) {
    const std::string name = "dec.txp2.layer" + std::to_string(l);
    h = add(layers::activation(b, net, name + ".prelu", layers::time_extrapolate(b, net, name, h, kSeqLen, kSeqLen, k, pad)),
            h);
  }
  return layers::conv(b, net, "dec.out", h, 2 * width, kOutputChannels, 1, 0);
}

/// Model inputs derived from one window.
struct PreparedWindow {
  const SequenceWindow* window = nullptr;
  Tensor displacements;         // (2, T, N)
  Tensor obs_displacements;     // (2, 8, N)
  AdjacencySeries obs_adjacency;   // normalised, 8 frames
  AdjacencySeries full_adjacency;  // normalised, 20 frames (training windows only)
};

inline PreparedWindow prepare_window(const SequenceWindow& w) {
  if (w.agents() == 0 || w.frames() < kObsLen) {
    throw DimensionError("prepare_window: window needs at least 8 frames and one agent");
  }
  PreparedWindow p;
  p.window = &w;
  p.displacements = to_displacements(w.positions).values;
  const std::size_t n = w.agents();
  p.obs_displacements = Tensor({kInputChannels, kObsLen, n});
  for (std::size_t c = 0; c < kInputChannels; ++c)
    for (std::size_t t = 0; t < kObsLen; ++t)
      for (std::size_t a = 0; a < n; ++a) p.obs_displacements.at(c, t, a) = p.displacements.at(c, t, a);
  p.obs_adjacency = normalized_adjacency(w.positions, 0, kObsLen);
  if (w.has_future()) p.full_adjacency = normalized_adjacency(w.positions, 0, kSeqLen);
  return p;
}

/// Configuration plus parameters.
struct Model {
  ModelConfig config;
  ParamStore params;
};

/// Discovers the parameter layout by tracing every network once, then draws
/// weights from U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases start at zero and
/// PReLU slopes at 0.25.
inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore store;
  {
    Tape tape;
    Binding b(tape, store, Binding::Mode::declaring);
    SequenceWindow probe;
    probe.positions = Tensor({kSeqLen, 1, 2});
    const auto prepared = prepare_window(probe);
    Rng scratch(0);
    const auto p = prior_forward(b, cfg, prepared.obs_displacements, prepared.obs_adjacency);
    recog_forward(b, cfg, prepared.displacements, prepared.full_adjacency, RunMode::train, scratch);
    decode(b, cfg, p.mu, prepared.obs_displacements, prepared.obs_adjacency);
  }
  for (auto& e : store.entries()) {
    switch (e.kind) {
      case ParamKind::weight: {
        const auto& s = e.value.shape();
        const double fan_in = static_cast<double>(numel(s) / s[0]);
        const double bound = std::sqrt(1.0 / fan_in);
        for (auto& v : e.value.data()) v = rng.uniform(-bound, bound);
        break;
      }
      case ParamKind::bias: e.value.fill(0.0); break;
      case ParamKind::slope: e.value.fill(0.25); break;
    }
  }
  return store;
}

inline Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return Model{cfg, init_params(cfg, rng)};
}

// ---------------------------------------------------------------------------
// STGC checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "STGC";
/// Version 1 stores float32 values; version 2 stores float64 values so a
/// training state can resume exactly.
enum class Precision : std::uint8_t { f32 = 1, f64 = 2 };

inline Network network_from_name(const std::string& name) {
  if (name.rfind("prior.", 0) == 0) return Network::prior;
  if (name.rfind("recog.", 0) == 0) return Network::recognition;
  return Network::decoder;
}

inline ParamKind kind_from_name(const std::string& name) {
  if (name.size() >= 5 && name.compare(name.size() - 5, 5, "prelu") == 0) return ParamKind::slope;
  if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) return ParamKind::bias;
  return ParamKind::weight;
}

/// Layout (little-endian): magic, version byte, u32 entry count, then per
/// entry: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, values.
inline std::vector<char> encode_checkpoint(const ParamStore& store, Precision precision) {
  binary::Writer w;
  w.bytes(kCheckpointMagic);
  w.u8(static_cast<std::uint8_t>(precision));
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.value.data()) {
      if (precision == Precision::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.buffer();
}

inline ParamStore decode_checkpoint(binary::Reader r) {
  if (r.bytes(4) != kCheckpointMagic) throw FormatError(r.label() + ": not a checkpoint (bad magic)");
  const auto version = r.u8();
  if (version != 1 && version != 2) {
    throw FormatError(r.label() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.u32();
  ParamStore store;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.u32();
    if (len > r.remaining()) throw FormatError(r.label() + ": truncated file");
    std::string name = r.bytes(len);
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(r.label() + ": bad rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u32();
      if (d == 0) throw FormatError(r.label() + ": zero dimension in " + name);
      shape.push_back(d);
    }
    const std::size_t n = numel(shape);
    if (n * (version == 1 ? 4 : 8) > r.remaining()) throw FormatError(r.label() + ": truncated file");
    std::vector<double> data(n);
    for (auto& v : data) v = version == 1 ? static_cast<double>(r.f32()) : r.f64();
    try {
      store.add(name, network_from_name(name), kind_from_name(name), Tensor(std::move(shape), std::move(data)));
    } catch (const ConfigError& e) {
      throw FormatError(r.label() + ": " + e.what());
    }
  }
  if (!r.at_end()) throw FormatError(r.label() + ": trailing bytes after last entry");
  return store;
}

/// Plain-text `key=value` sidecar written next to every checkpoint.
using Metadata = std::map<std::string, std::string>;

inline std::filesystem::path metadata_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".meta");
}

inline void write_metadata(const std::filesystem::path& path, const Metadata& meta) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& [k, v] : meta) out << k << '=' << v << '\n';
}

inline Metadata parse_metadata_text(std::string_view text, const std::string& label) {
  Metadata meta;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError(label + ":" + std::to_string(line_no) + ": expected key=value", line_no);
    }
    meta[std::string(detail::trim(t.substr(0, eq)))] = std::string(detail::trim(t.substr(eq + 1)));
  }
  return meta;
}

inline Metadata read_metadata(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing checkpoint metadata " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_metadata_text(ss.str(), path.string());
}

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::size_t meta_size(const Metadata& m, const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint metadata lacks " + key);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError("checkpoint metadata: bad value for " + key);
  }
}

inline double meta_double(const Metadata& m, const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint metadata lacks " + key);
  try {
    std::size_t used = 0;
    const auto v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw FormatError("checkpoint metadata: bad value for " + key);
  }
}

}  // namespace detail

inline void model_config_to_metadata(const ModelConfig& cfg, Metadata& meta) {
  meta["latent_length"] = std::to_string(cfg.latent_length);
  meta["embed_channels"] = std::to_string(cfg.embed_channels);
  meta["prior_layers"] = std::to_string(cfg.prior_layers);
  meta["recog_layers"] = std::to_string(cfg.recog_layers);
  meta["txp_layers"] = std::to_string(cfg.txp_layers);
  meta["kernel"] = std::to_string(cfg.kernel);
  meta["dropout"] = detail::format_double(cfg.dropout);
  meta["posterior_noise"] = detail::format_double(cfg.posterior_noise);
}

inline ModelConfig model_config_from_metadata(const Metadata& meta) {
  ModelConfig cfg;
  cfg.latent_length = detail::meta_size(meta, "latent_length");
  cfg.embed_channels = detail::meta_size(meta, "embed_channels");
  cfg.prior_layers = detail::meta_size(meta, "prior_layers");
  cfg.recog_layers = detail::meta_size(meta, "recog_layers");
  cfg.txp_layers = detail::meta_size(meta, "txp_layers");
  cfg.kernel = detail::meta_size(meta, "kernel");
  cfg.dropout = detail::meta_double(meta, "dropout");
  cfg.posterior_noise = detail::meta_double(meta, "posterior_noise");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  return cfg;
}

/// Writes parameters and a metadata sidecar. Extra keys are merged in.
inline void save_model(const std::filesystem::path& path, const Model& model, Precision precision = Precision::f32,
                       const Metadata& extra = {}) {
  Metadata meta = extra;
  model_config_to_metadata(model.config, meta);
  binary::Writer w;
  const auto bytes = encode_checkpoint(model.params, precision);
  w.bytes(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
  write_metadata(metadata_path(path), meta);
}

/// Loads a checkpoint and its sidecar; verifies the stored layout matches the
/// layout the recorded configuration produces.
inline Model load_model(const std::filesystem::path& path, Metadata* meta_out = nullptr) {
  ParamStore params = decode_checkpoint(binary::Reader::load(path));
  const Metadata meta = read_metadata(metadata_path(path));
  const ModelConfig cfg = model_config_from_metadata(meta);
  Rng rng(0);
  const ParamStore layout = init_params(cfg, rng);
  if (layout.size() != params.size()) throw FormatError(path.string() + ": parameter layout does not match config");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& want = layout.entry(i);
    const auto& got = params.entry(i);
    if (want.name != got.name || want.value.shape() != got.value.shape()) {
      throw FormatError(path.string() + ": parameter " + got.name + " does not match config layout");
    }
    params.entry(i).kind = want.kind;
    params.entry(i).network = want.network;
  }
  if (meta_out) *meta_out = meta;
  return Model{cfg, std::move(params)};
}

}  // namespace stgcvae
