#include <gtest/gtest.h>

#include <cmath>

#include "stgcvae/cvae_model.hpp"
#include "support.hpp"

using namespace stgcvae;
using testing_support::TempDir;

namespace {

struct Outputs {
  Tensor prior_mu, prior_lv, recog_mu, recog_lv, decoded;
};

// Every network in deterministic mode; the latent fed to the decoder is `z`.
Outputs run_all(const Model& m, const SequenceWindow& w, const Tensor& z) {
  const auto p = prepare_window(w);
  Tape tape;
  Binding b(tape, m.params, false);
  Rng rng(0);
  const auto prior = prior_forward(b, m.config, p.obs_displacements, p.obs_adjacency);
  const auto recog = recog_forward(b, m.config, p.displacements, p.full_adjacency, RunMode::eval, rng);
  const Var dec = decode(b, m.config, b.constant(z), p.obs_displacements, p.obs_adjacency);
  return {prior.mu.value(), prior.logvar.value(), recog.mu.value(), recog.logvar.value(), dec.value()};
}

SequenceWindow permute_agents(const SequenceWindow& w, const std::vector<std::size_t>& perm) {
  SequenceWindow out = w;
  for (std::size_t t = 0; t < w.frames(); ++t)
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (std::size_t c = 0; c < 2; ++c) out.positions.at(t, i, c) = w.positions.at(t, perm[i], c);
  return out;
}

// Permutes the trailing (agent) axis of a (C, T, N) tensor.
Tensor permute_last(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape());
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t t = 0; t < x.dim(1); ++t)
      for (std::size_t i = 0; i < perm.size(); ++i) out.at(c, t, i) = x.at(c, t, perm[i]);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST(ModelConfig, RejectsInvalidSettings) {
  ModelConfig c;
  c.kernel = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.prior_layers = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.latent_length = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(CountParams, EmptyStoreIsZero) {
  EXPECT_EQ(count_params(ParamStore{}), 0u);
}

TEST(CountParams, WeightAndBias) {
  ParamStore s;
  s.add("w", Network::decoder, ParamKind::weight, Tensor({3, 4}));
  s.add("b", Network::decoder, ParamKind::bias, Tensor({4}));
  EXPECT_EQ(count_params(s), 16u);
  EXPECT_THROW(s.add("w", Network::decoder, ParamKind::weight, Tensor({1})), ConfigError);
}

TEST(CountParams, DefaultConfigWithinCorridorAndOrderedByLatentLength) {
  std::size_t previous = 0;
  for (std::size_t l : {10u, 20u, 30u}) {
    ModelConfig c;
    c.latent_length = l;
    const auto m = make_model(c, 0);
    const auto total = count_params(m.params);
    EXPECT_EQ(total, count_params(m.params, Network::prior) + count_params(m.params, Network::recognition) +
                         count_params(m.params, Network::decoder));
    EXPECT_GT(total, previous);
    previous = total;
    if (l == 20) {
      EXPECT_GE(total, 15000u);
      EXPECT_LE(total, 35000u);
    }
  }
}

TEST(InitParams, SameSeedIsBitIdenticalAndSeedsDiffer) {
  const auto a = make_model(ModelConfig{}, 5);
  const auto b = make_model(ModelConfig{}, 5);
  const auto c = make_model(ModelConfig{}, 6);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_FALSE(a.params == c.params);
}

TEST(InitParams, WeightsWithinFanInBound) {
  ModelConfig c;
  c.latent_length = 100;
  const auto m = make_model(c, 1);
  bool saw_fan_in_100 = false;
  for (const auto& e : m.params.entries()) {
    if (e.kind == ParamKind::bias) {
      for (double v : e.value.data()) EXPECT_EQ(v, 0.0);
      continue;
    }
    if (e.kind == ParamKind::slope) {
      EXPECT_EQ(e.value[0], 0.25);
      continue;
    }
    const auto& s = e.value.shape();
    const std::size_t fan_in = numel(s) / s[0];
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    if (fan_in == 100) {
      saw_fan_in_100 = true;
      EXPECT_DOUBLE_EQ(bound, 0.1);
    }
    for (double v : e.value.data()) {
      EXPECT_GT(v, -bound);
      EXPECT_LT(v, bound);
    }
  }
  EXPECT_TRUE(saw_fan_in_100);
}

TEST(Networks, ShapesForVariableAgentCounts) {
  const auto m = make_model(ModelConfig{}, 2);
  Rng rng(40);
  for (std::size_t n : {1u, 2u, 3u, 5u, 7u, 12u}) {
    const auto w = testing_support::random_window(n, rng);
    const auto o = run_all(m, w, testing_support::random_tensor({20, kObsLen, n}, rng));
    EXPECT_EQ(o.prior_mu.shape(), (Shape{20, kObsLen, n}));
    EXPECT_EQ(o.prior_lv.shape(), (Shape{20, kObsLen, n}));
    EXPECT_EQ(o.recog_mu.shape(), (Shape{20, kObsLen, n}));
    EXPECT_EQ(o.decoded.shape(), (Shape{kOutputChannels, kSeqLen, n}));
    const BivariateGaussianSeq seq{o.decoded};
    for (std::size_t t = 0; t < kSeqLen; ++t)
      for (std::size_t a = 0; a < n; ++a) {
        EXPECT_GT(seq.sigma_x(t, a), 0.0);
        EXPECT_GT(seq.sigma_y(t, a), 0.0);
        EXPECT_LT(std::abs(seq.rho(t, a)), 1.0);
      }
  }
}

TEST(Networks, EmbeddingShapeForThreeAgents) {
  const auto m = make_model(ModelConfig{}, 3);
  Rng rng(41);
  const auto w = testing_support::random_window(3, rng);
  const auto p = prepare_window(w);
  Tape tape;
  Binding b(tape, m.params, false);
  const Var emb = stgcnn_embed(b, Network::prior, "prior", b.constant(p.obs_displacements), p.obs_adjacency, m.config,
                               m.config.prior_layers, kObsLen, 0.0, nullptr, false);
  EXPECT_EQ(emb.shape(), (Shape{5, kObsLen, 3}));
}

TEST(Networks, SingleAgentGraphConvReducesToLinearMap) {
  // With N = 1 the normalised adjacency is [[1]], so a GCN layer is a 1x1
  // convolution followed by PReLU.
  ParamStore store;
  store.add("g.weight", Network::prior, ParamKind::weight, Tensor({2, 2, 1}, {1, 0, 0, 1}));
  store.add("g.bias", Network::prior, ParamKind::bias, Tensor({2}));
  store.add("g.prelu", Network::prior, ParamKind::slope, Tensor({1}, {0.25}));
  const Tensor v({2, 3, 1}, {1.0, -2.0, 0.5, -1.0, 3.0, -4.0});
  const AdjacencySeries adj = normalize(AdjacencySeries{Tensor({3, 1, 1}), false});
  Tape tape;
  Binding b(tape, store, false);
  const Var out = layers::activation(b, Network::prior, "g.prelu",
                                     layers::graph_conv(b, Network::prior, "g", b.constant(v), adj, 2, 2));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(out.value()[i], v[i] > 0 ? v[i] : 0.25 * v[i]);
}

TEST(Networks, PriorIsDeterministic) {
  const auto m = make_model(ModelConfig{}, 4);
  Rng rng(42);
  const auto w = testing_support::random_window(3, rng);
  const Tensor z = testing_support::random_tensor({20, kObsLen, 3}, rng);
  const auto a = run_all(m, w, z);
  const auto b = run_all(m, w, z);
  EXPECT_EQ(a.prior_mu, b.prior_mu);
  EXPECT_EQ(a.recog_mu, b.recog_mu);
  EXPECT_EQ(a.decoded, b.decoded);
}

TEST(Networks, RecognitionTrainModeIsStochastic) {
  const auto m = make_model(ModelConfig{}, 5);
  Rng data(43);
  const auto w = testing_support::random_window(2, data);
  const auto p = prepare_window(w);
  const auto run = [&](std::uint64_t seed) {
    Tape tape;
    Binding b(tape, m.params, false);
    Rng rng(seed);
    return recog_forward(b, m.config, p.displacements, p.full_adjacency, RunMode::train, rng).mu.value();
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_FALSE(run(1) == run(2));
}

TEST(Networks, AgentPermutationEquivariance) {
  Rng rng(44);
  auto m = make_model(ModelConfig{}, 6);
  for (auto& e : m.params.entries())
    if (e.kind != ParamKind::weight)
      for (auto& v : e.value.data()) v += rng.uniform(-0.1, 0.1);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto w = testing_support::random_window(5, rng);
  const Tensor z = testing_support::random_tensor({20, kObsLen, 5}, rng);
  const auto base = run_all(m, w, z);
  const auto moved = run_all(m, permute_agents(w, perm), permute_last(z, perm));
  EXPECT_LT(max_abs_diff(moved.prior_mu, permute_last(base.prior_mu, perm)), 1e-9);
  EXPECT_LT(max_abs_diff(moved.prior_lv, permute_last(base.prior_lv, perm)), 1e-9);
  EXPECT_LT(max_abs_diff(moved.recog_mu, permute_last(base.recog_mu, perm)), 1e-9);
  EXPECT_LT(max_abs_diff(moved.recog_lv, permute_last(base.recog_lv, perm)), 1e-9);
  EXPECT_LT(max_abs_diff(moved.decoded, permute_last(base.decoded, perm)), 1e-9);
}

TEST(Networks, MismatchedInputsAreRejected) {
  const auto m = make_model(ModelConfig{}, 7);
  Rng rng(45);
  const auto w = testing_support::random_window(2, rng);
  const auto p = prepare_window(w);
  Tape tape;
  Binding b(tape, m.params, false);
  EXPECT_THROW(prior_forward(b, m.config, p.displacements, p.obs_adjacency), DimensionError);
  EXPECT_THROW(decode(b, m.config, b.constant(Tensor({20, kObsLen, 3})), p.obs_displacements, p.obs_adjacency),
               DimensionError);
  SequenceWindow shortw;
  shortw.positions = Tensor({5, 1, 2});
  EXPECT_THROW(prepare_window(shortw), DimensionError);
}

TEST(Checkpoint, RoundTripAtBothPrecisions) {
  TempDir dir;
  ModelConfig c;
  c.latent_length = 10;
  const auto m = make_model(c, 8);
  save_model(dir / "m64.stgc", m, Precision::f64);
  const auto back = load_model(dir / "m64.stgc");
  EXPECT_EQ(back.config, m.config);
  EXPECT_TRUE(back.params == m.params);

  save_model(dir / "m32.stgc", m, Precision::f32);
  const auto back32 = load_model(dir / "m32.stgc");
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (std::size_t j = 0; j < m.params.entry(i).value.size(); ++j)
      EXPECT_EQ(back32.params.entry(i).value[j], static_cast<double>(static_cast<float>(m.params.entry(i).value[j])));
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  TempDir dir;
  const auto m = make_model(ModelConfig{}, 9);
  save_model(dir / "m.stgc", m);
  const std::string bytes = testing_support::read_text(dir / "m.stgc");
  const std::string meta = testing_support::read_text(metadata_path(dir / "m.stgc"));

  testing_support::write_text(dir / "magic.stgc", "STGX" + bytes.substr(4));
  testing_support::write_text(metadata_path(dir / "magic.stgc"), meta);
  EXPECT_THROW(load_model(dir / "magic.stgc"), FormatError);

  testing_support::write_text(dir / "short.stgc", bytes.substr(0, bytes.size() / 2));
  testing_support::write_text(metadata_path(dir / "short.stgc"), meta);
  EXPECT_THROW(load_model(dir / "short.stgc"), FormatError);

  testing_support::write_text(dir / "nometa.stgc", bytes);
  EXPECT_THROW(load_model(dir / "nometa.stgc"), FormatError);

  // Layout recorded for L = 20 but metadata claims L = 30.
  std::string wrong = meta;
  wrong.replace(wrong.find("latent_length=20"), 16, "latent_length=30");
  testing_support::write_text(dir / "layout.stgc", bytes);
  testing_support::write_text(metadata_path(dir / "layout.stgc"), wrong);
  EXPECT_THROW(load_model(dir / "layout.stgc"), FormatError);
}
