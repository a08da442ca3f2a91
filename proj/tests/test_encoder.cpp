#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "brainmass/connectome.hpp"
#include "brainmass/encoder.hpp"
#include "brainmass/errors.hpp"
#include "test_util.hpp"

using namespace brainmass;
using namespace brainmass::nn;

namespace {

EncoderConfig tiny() { return EncoderConfig{8, 2, 2, 16, 4, 0.25}; }

EncoderParams<double> random_params(const EncoderConfig& cfg, std::uint64_t seed, double sd = 0.3) {
  std::mt19937_64 rng(seed);
  auto p = init_encoder<double>(cfg, rng, sd);
  // Non-trivial norms and biases so every path is exercised.
  std::normal_distribution<double> n(0.0, sd);
  for (auto& prm : p.parameters())
    for (auto& x : prm.tensor.mutable_values()) x += n(rng);
  return p;
}

RealMatrix fc_input(std::size_t v, std::uint64_t seed) { return pearson_fc(testutil::random_matrix(v, 3 * v, seed)).matrix; }

RealMatrix to_eigen(const Tensor<double>& t) {
  RealMatrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

// Independent block oracle in Eigen.
RealMatrix oracle_ln(const RealMatrix& x, const RealMatrix& g, const RealMatrix& b) {
  RealMatrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    out.row(i) = ((x.row(i).array() - mu) / std::sqrt(var + 1e-5)).matrix().cwiseProduct(g) + b;
  }
  return out;
}

RealMatrix oracle_softmax(const RealMatrix& s) {
  RealMatrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    double z = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) z += std::exp(s(i, j) - m);
    for (Eigen::Index j = 0; j < s.cols(); ++j) out(i, j) = std::exp(s(i, j) - m) / z;
  }
  return out;
}

RealMatrix oracle_ffn_residual(const LayerParams<double>& l, const RealMatrix& u);

RealMatrix oracle_block(const LayerParams<double>& l, const RealMatrix& h, std::size_t heads) {
  const RealMatrix n1 = oracle_ln(h, to_eigen(l.ln1_gain), to_eigen(l.ln1_bias));
  const double dk = static_cast<double>(h.cols() / heads);
  RealMatrix mixed(h.rows(), h.cols());
  for (std::size_t c = 0; c < heads; ++c) {
    const RealMatrix q = n1 * to_eigen(l.wq[c]);
    const RealMatrix k = n1 * to_eigen(l.wk[c]);
    const RealMatrix v = n1 * to_eigen(l.wv[c]);
    const RealMatrix a = oracle_softmax(q * k.transpose() / std::sqrt(dk));
    mixed.block(0, static_cast<Eigen::Index>(c * dk), h.rows(), static_cast<Eigen::Index>(dk)) = a * v;
  }
  return oracle_ffn_residual(l, h + mixed * to_eigen(l.wo));
}

RealMatrix oracle_ffn_residual(const LayerParams<double>& l, const RealMatrix& u) {
  const RealMatrix n2 = oracle_ln(u, to_eigen(l.ln2_gain), to_eigen(l.ln2_bias));
  RealMatrix pre = n2 * to_eigen(l.ffn_w1);
  for (Eigen::Index i = 0; i < pre.rows(); ++i) pre.row(i) += to_eigen(l.ffn_b1);
  RealMatrix act = pre.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); });
  RealMatrix out = act * to_eigen(l.ffn_w2);
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) += to_eigen(l.ffn_b2);
  return u + out;
}

}  // namespace

TEST(EncoderConfig, Validation) {
  EXPECT_NO_THROW(tiny().validate());
  auto c = tiny();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny();
  c.readout_dim = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny();
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.mask_ratio = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(EncoderConfig, JsonHasExactlyTheFields) {
  const auto j = to_json(tiny());
  EXPECT_EQ(j.size(), 6u);
  EXPECT_EQ(encoder_config_from_json(j), tiny());
  auto extra = j;
  extra["dropout"] = 0.1;
  EXPECT_ANY_THROW(encoder_config_from_json(extra));
  auto missing = j;
  missing.erase("n_heads");
  EXPECT_ANY_THROW(encoder_config_from_json(missing));
}

TEST(EncoderParams, CountMatchesEnumeration) {
  for (const auto& cfg : {tiny(), EncoderConfig{16, 2, 2, 32, 8, 0.2}, EncoderConfig{100, 3, 20, 64, 8, 0.2}}) {
    std::mt19937_64 rng(1);
    const auto p = init_encoder<float>(cfg, rng);
    std::size_t n = 0;
    for (const auto& prm : p.parameters()) n += prm.tensor.size();
    EXPECT_EQ(n, encoder_parameter_count(cfg));
  }
}

TEST(EncoderParams, CanonicalNamesAndInit) {
  std::mt19937_64 rng(1);
  const auto p = init_encoder<float>(tiny(), rng);
  const auto list = p.parameters("online.");
  EXPECT_EQ(list.front().name, "online.pos_embedding");
  EXPECT_EQ(list[1].name, "online.mask_embedding");
  EXPECT_EQ(list[2].name, "online.layer0.head0.wq");
  EXPECT_EQ(list.back().name, "online.readout.bias");
  for (const auto& prm : list) {
    if (prm.name.find("ln1.gain") != std::string::npos)
      for (float x : prm.tensor.values()) EXPECT_EQ(x, 1.0f);
    if (prm.name.find("bias") != std::string::npos || prm.name.find(".b1") != std::string::npos)
      for (float x : prm.tensor.values()) EXPECT_EQ(x, 0.0f);
  }
  EXPECT_TRUE(list[0].decay_exempt);
  EXPECT_TRUE(list[1].decay_exempt);
  EXPECT_FALSE(list[2].decay_exempt);
}

TEST(EmbedTokens, ZeroPositionalTableGivesConnectomeRows) {
  auto p = random_params(tiny(), 1);
  for (auto& x : p.pos_embedding.mutable_values()) x = 0;
  const auto x = to_tensor<double>(fc_input(8, 2));
  const auto h = embed_tokens(p, x, {});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(h.values()[i], x.values()[i]);
}

TEST(EmbedTokens, MaskedRowIgnoresInput) {
  const auto p = random_params(tiny(), 1);
  auto m = fc_input(8, 2);
  const std::vector<std::size_t> mask{3};
  const auto a = embed_tokens(p, to_tensor<double>(m), mask);
  m.row(3).array() += 5.0;
  const auto b = embed_tokens(p, to_tensor<double>(m), mask);
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(a.at(3, j), b.at(3, j));
    EXPECT_EQ(a.at(3, j), p.mask_embedding.at(0, j) + p.pos_embedding.at(3, j));
  }
  const std::vector<std::size_t> bad{8};
  EXPECT_THROW(embed_tokens(p, to_tensor<double>(m), bad), ParameterError);
}

TEST(Encode, MaskedTokenBlindness) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto cfg = tiny();
    const auto p = random_params(cfg, s);
    auto m = fc_input(8, s + 10);
    const std::vector<std::size_t> mask{1, 6};
    const auto a = to_eigen(encode(p, cfg, to_tensor<double>(m), mask).tokens);
    for (double delta : {10.0, -10.0}) {
      auto moved = m;
      for (auto i : mask) moved.row(static_cast<Eigen::Index>(i)).array() += delta;
      const auto b = to_eigen(encode(p, cfg, to_tensor<double>(moved), mask).tokens);
      EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Encode, MaskedRowsReceiveZeroGradient) {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 4);
  auto x = to_tensor<double>(fc_input(8, 3));
  x.set_requires_grad(true);
  const std::vector<std::size_t> mask{0, 5};
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const auto z = readout(p, encode(p, cfg, x, mask).tokens);
  tape.backward(sum_all(mul(z, z)));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const double g = x.grad()[r * 8 + c];
      if (r == 0 || r == 5)
        EXPECT_EQ(g, 0.0);
      else if (c != 0 && c != 5)
        EXPECT_NE(g, 0.0);
    }
}

TEST(TransformerBlock, ZeroQueryKeyGivesUniformAttention) {
  EncoderConfig cfg{4, 1, 1, 6, 2, 0.25};
  auto p = random_params(cfg, 7);
  auto& l = p.layers[0];
  for (auto& x : l.wq[0].mutable_values()) x = 0;
  for (auto& x : l.wk[0].mutable_values()) x = 0;
  const auto h = to_tensor<double>(fc_input(4, 1));
  std::vector<RealMatrix> maps;
  const auto out = to_eigen(transformer_block(l, h, cfg, &maps));
  ASSERT_EQ(maps.size(), 1u);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(maps[0](i, j), 0.25, 1e-15);
  // every row attends to the column mean of the value projection
  const RealMatrix vproj = oracle_ln(to_eigen(h), to_eigen(l.ln1_gain), to_eigen(l.ln1_bias)) * to_eigen(l.wv[0]);
  const RealMatrix colmean = vproj.colwise().mean();
  const RealMatrix u = to_eigen(h) + RealMatrix(colmean.replicate(4, 1)) * to_eigen(l.wo);
  EXPECT_LE((oracle_ffn_residual(l, u) - out).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TransformerBlock, TwoTokenHandSetWeightsMatchOracle) {
  EncoderConfig cfg{2, 1, 1, 3, 1, 0.5};
  std::mt19937_64 rng(0);
  auto p = init_encoder<double>(cfg, rng);
  auto& l = p.layers[0];
  auto set = [](Tensor<double>& t, std::initializer_list<double> v) { std::copy(v.begin(), v.end(), t.mutable_values().begin()); };
  set(l.wq[0], {0.5, -0.25, 1.0, 0.75});
  set(l.wk[0], {-0.5, 0.3, 0.2, 1.1});
  set(l.wv[0], {1.0, 0.5, -0.5, 2.0});
  set(l.wo, {0.9, -0.1, 0.4, 0.3});
  set(l.ln1_gain, {1.2, 0.8});
  set(l.ln1_bias, {0.1, -0.2});
  set(l.ffn_w1, {0.3, -0.6, 0.9, 0.2, 0.5, -0.4});
  set(l.ffn_b1, {0.05, -0.1, 0.0});
  set(l.ffn_w2, {0.7, -0.3, 0.1, 0.4, -0.8, 0.6});
  set(l.ffn_b2, {0.01, 0.02});
  set(l.ln2_gain, {0.9, 1.1});
  set(l.ln2_bias, {0.0, 0.3});
  RealMatrix h(2, 2);
  h << 1.0, 0.3, 0.3, 1.0;
  const auto out = to_eigen(transformer_block(l, to_tensor<double>(h), cfg));
  EXPECT_LE((out - oracle_block(l, h, 1)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(TransformerBlock, RandomMultiHeadMatchesOracle) {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 9);
  const auto h = fc_input(8, 5);
  const auto out = to_eigen(transformer_block(p.layers[1], to_tensor<double>(h), cfg));
  EXPECT_LE((out - oracle_block(p.layers[1], h, 2)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Encode, AttentionRowsSumToOne) {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 2);
  const auto out = encode(p, cfg, to_tensor<double>(fc_input(8, 1)), {}, true);
  ASSERT_EQ(out.attention.maps.size(), 4u);
  for (const auto& m : out.attention.maps)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      EXPECT_NEAR(m.row(i).sum(), 1.0, 1e-6);
      EXPECT_GE(m.row(i).minCoeff(), 0.0);
    }
}

TEST(Encode, StatelessAndSensitiveToUnmaskedRows) {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 2);
  const auto x = fc_input(8, 1);
  const auto a = to_eigen(encode(p, cfg, to_tensor<double>(x)).tokens);
  const auto b = to_eigen(encode(p, cfg, to_tensor<double>(x)).tokens);
  EXPECT_TRUE(a == b);
  EXPECT_TRUE(a.allFinite());
  for (Eigen::Index r = 0; r < 8; ++r) {
    auto moved = x;
    moved(r, (r + 1) % 8) += 0.1;
    const auto c = to_eigen(encode(p, cfg, to_tensor<double>(moved)).tokens);
    EXPECT_GT((a - c).cwiseAbs().maxCoeff(), 1e-8) << "row " << r;
  }
}

TEST(Readout, LengthIsDTimesV) {
  EncoderConfig cfg{100, 1, 20, 8, 8, 0.2};
  std::mt19937_64 rng(1);
  const auto p = init_encoder<float>(cfg, rng);
  const auto z = readout(p, Tensor<float>::zeros({100, 100}));
  EXPECT_EQ(z.size(), 800u);
  EXPECT_EQ(cfg.embedding_dim(), 800u);
}

TEST(Readout, SelectorProjection) {
  const auto cfg = tiny();
  auto p = random_params(cfg, 1);
  auto w = p.readout_weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t k = 0; k < 4; ++k) w[k * 4 + k] = 1.0;
  for (auto& b : p.readout_bias.mutable_values()) b = 0;
  const auto tokens = to_tensor<double>(fc_input(8, 3));
  const auto z = readout(p, tokens);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(z.values()[i * 4 + k], tokens.at(i, k));
}

TEST(Readout, MatchesMatmulThenConcatOracle) {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 5);
  const auto tokens = fc_input(8, 6);
  const auto z = readout(p, to_tensor<double>(tokens));
  const RealMatrix proj = tokens * to_eigen(p.readout_weight);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_NEAR(z.values()[i * 4 + k], proj(i, k) + p.readout_bias.at(0, k), 1e-12);
}

TEST(Heatmap, LayerSelectParsing) {
  EXPECT_EQ(parse_layer_select("first"), LayerSelect::first);
  EXPECT_EQ(parse_layer_select("last"), LayerSelect::last);
  EXPECT_EQ(parse_layer_select("mean"), LayerSelect::mean);
  EXPECT_THROW(parse_layer_select("middle"), ParameterError);
}

TEST(Heatmap, MinmaxDegenerateRangeIsZero) {
  const auto z = minmax_normalize(RealMatrix::Constant(3, 3, 0.25));
  EXPECT_TRUE(z.isZero());
  RealMatrix m(1, 3);
  m << 1, 2, 3;
  const auto n = minmax_normalize(m);
  EXPECT_EQ(n(0, 0), 0.0);
  EXPECT_EQ(n(0, 1), 0.5);
  EXPECT_EQ(n(0, 2), 1.0);
}

TEST(Heatmap, SingleSubjectSingleHeadFirstLayer) {
  EncoderConfig cfg{8, 2, 1, 8, 2, 0.25};
  std::mt19937_64 rng(3);
  const auto p = init_encoder<float>(cfg, rng, 0.5);
  const Connectome fc{fc_input(8, 1), "s", {}, {}};
  const auto heat = attention_heatmap(p, cfg, std::span<const Connectome>(&fc, 1), LayerSelect::first);
  const auto out = encode(p, cfg, to_tensor<float>(fc.matrix), {}, true);
  const auto expected = minmax_normalize(out.attention.at(0, 0));
  EXPECT_LE((heat - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GE(heat.minCoeff(), 0.0);
  EXPECT_LE(heat.maxCoeff(), 1.0);
}

TEST(Heatmap, UniformAttentionMapsToZero) {
  EncoderConfig cfg{4, 1, 1, 4, 2, 0.25};
  std::mt19937_64 rng(3);
  auto p = init_encoder<float>(cfg, rng);
  for (auto& x : p.layers[0].wq[0].mutable_values()) x = 0;
  const Connectome fc{fc_input(4, 1), "s", {}, {}};
  const auto heat = attention_heatmap(p, cfg, std::span<const Connectome>(&fc, 1), LayerSelect::mean);
  EXPECT_TRUE(heat.isZero());
}

TEST(Heatmap, TwoSubjectMeanAveragesBeforeNormalizing) {
  const auto cfg = tiny();
  std::mt19937_64 rng(3);
  const auto p = init_encoder<float>(cfg, rng, 0.5);
  const std::vector<Connectome> cohort{{fc_input(8, 1), "a", {}, {}}, {fc_input(8, 2), "b", {}, {}}};
  for (auto sel : {LayerSelect::first, LayerSelect::last, LayerSelect::mean}) {
    const auto heat = attention_heatmap(p, cfg, cohort, sel);
    RealMatrix acc = RealMatrix::Zero(8, 8);
    for (const auto& fc : cohort) {
      const auto out = encode(p, cfg, to_tensor<float>(fc.matrix), {}, true);
      RealMatrix avg = RealMatrix::Zero(8, 8);
      std::vector<std::size_t> layers = sel == LayerSelect::first  ? std::vector<std::size_t>{0}
                                        : sel == LayerSelect::last ? std::vector<std::size_t>{1}
                                                                   : std::vector<std::size_t>{0, 1};
      for (auto l : layers)
        for (std::size_t c = 0; c < 2; ++c) avg += out.attention.at(l, c);
      acc += avg / static_cast<double>(layers.size() * 2);
    }
    EXPECT_LE((heat - minmax_normalize(acc / 2.0)).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(attention_heatmap(p, cfg, std::span<const Connectome>(), LayerSelect::mean), ParameterError);
}

TEST(EncoderGradCheck, TransformerBlock) {
  const auto cfg = tiny();
  auto p = random_params(cfg, 11);
  auto params = p.parameters();
  ParameterList<double> block;
  for (auto& prm : params)
    if (prm.name.rfind("layer0.", 0) == 0) block.push_back(prm);
  const auto h = to_tensor<double>(fc_input(8, 2));
  const auto w = to_tensor<double>(testutil::random_matrix(8, 8, 77));
  const auto r = grad_check([&] { return sum_all(mul(transformer_block(p.layers[0], h, cfg), w)); }, block);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

TEST(EncoderGradCheck, FullTinyEncoderWithReadout) {
  const auto cfg = tiny();
  auto p = random_params(cfg, 12);
  auto params = p.parameters();
  const auto x = to_tensor<double>(fc_input(8, 4));
  const std::vector<std::size_t> mask{2, 7};
  const auto w = to_tensor<double>(testutil::random_matrix(1, 32, 78));
  const auto r = grad_check([&] { return sum_all(mul(readout(p, encode(p, cfg, x, mask).tokens), w)); }, params);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst_parameter;
}
