#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "common.hpp"
#include "dsaa/adapter.hpp"
#include "dsaa/encoder.hpp"
#include "dsaa/experiment.hpp"
#include "dsaa/ops.hpp"

using namespace dsaa;
using dsaa::testing::bit_equal;
using dsaa::testing::grad_check;
using dsaa::testing::random_tensor;

namespace {

EncoderConfig tiny_encoder(std::size_t layers = 2, std::size_t D = 16) {
  EncoderConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.model_dim = D;
  c.ff_dim = 2 * D;
  c.max_len = 16;
  c.vocab_size = 12;
  c.modulated_layers.clear();
  for (std::size_t l = 1; l <= layers; ++l) c.modulated_layers.push_back(l);
  return c;
}

void randomize(Tensor& t, Rng& rng, double std) {
  for (auto& x : t.mutable_data()) x = rng.normal(0, std);
}

text::AttributeSpanSet spans_of(std::vector<std::vector<std::size_t>> groups) {
  text::AttributeSpanSet s;
  for (auto& g : groups) s.spans.push_back({"x", std::move(g)});
  return s;
}

}  // namespace

TEST(Embed, ZeroTablesGiveZeros) {
  Rng rng(1);
  EncoderConfig cfg = tiny_encoder();
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  for (auto& x : w.tok_emb.mutable_data()) x = 0;
  for (auto& x : w.pos_emb.mutable_data()) x = 0;
  text::TokenSeq t{{4, 5, 6}, {"a", "b", "c"}};
  Tensor e = embed(w, t);
  ASSERT_EQ(e.rows(), 3u);
  for (double x : e.data()) EXPECT_EQ(x, 0.0);
}

TEST(Embed, SingleTokenIsTokenPlusFirstPosition) {
  Rng rng(2);
  EncoderConfig cfg = tiny_encoder();
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor e = embed(w, text::TokenSeq{{7}, {"x"}});
  for (std::size_t d = 0; d < cfg.model_dim; ++d) EXPECT_EQ(e.at(0, d), w.tok_emb.at(7, d) + w.pos_emb.at(0, d));
}

TEST(Embed, SwappingTokensChangesOnlyTheirTokenParts) {
  Rng rng(3);
  EncoderConfig cfg = tiny_encoder();
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor a = embed(w, text::TokenSeq{{4, 5, 6}, {"", "", ""}});
  Tensor b = embed(w, text::TokenSeq{{6, 5, 4}, {"", "", ""}});
  for (std::size_t d = 0; d < cfg.model_dim; ++d) {
    EXPECT_EQ(a.at(1, d), b.at(1, d));
    EXPECT_NEAR(b.at(0, d) - w.pos_emb.at(0, d), w.tok_emb.at(6, d), 1e-15);
    EXPECT_NEAR(b.at(2, d) - w.pos_emb.at(2, d), w.tok_emb.at(4, d), 1e-15);
  }
}

TEST(Encode, AbsentAndUnitScalesAreBitIdentical) {
  Rng rng(4);
  EncoderConfig cfg = tiny_encoder(3);
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor x = random_tensor(rng, {6, cfg.model_dim}, 1.0, false);
  EncodeResult plain = encode(w, cfg, x);
  ScalePair ones{Tensor::full({cfg.model_dim}, 1.0), Tensor::full({cfg.model_dim}, 1.0)};
  EncodeOptions opt;
  opt.attr_rows = {1, 2};
  opt.scales = &ones;
  EncodeResult unit = encode(w, cfg, x, opt);
  EXPECT_TRUE(bit_equal(plain.hidden, unit.hidden));
  EXPECT_TRUE(bit_equal(plain.pooled, unit.pooled));
  opt.scales = nullptr;
  EXPECT_TRUE(bit_equal(plain.pooled, encode(w, cfg, x, opt).pooled));
}

TEST(Encode, EmptyStackPassesInputThrough) {
  Rng rng(5);
  EncoderConfig cfg = tiny_encoder(0);
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor x = random_tensor(rng, {5, cfg.model_dim}, 1.0, false);
  EncodeOptions opt;
  opt.prefix_rows = 2;
  EncodeResult r = encode(w, cfg, x, opt);
  EXPECT_TRUE(bit_equal(r.hidden, x));
  for (std::size_t d = 0; d < cfg.model_dim; ++d) {
    EXPECT_NEAR(r.pooled[d], (x.at(2, d) + x.at(3, d) + x.at(4, d)) / 3.0, 1e-15);
  }
}

TEST(Encode, PooledIgnoresPrefixRowsDirectly) {
  Rng rng(6);
  EncoderConfig cfg = tiny_encoder(2);
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor x = random_tensor(rng, {5, cfg.model_dim}, 1.0, false);
  EncodeOptions opt;
  opt.prefix_rows = 2;
  EncodeResult r = encode(w, cfg, x, opt);
  Tensor expect = ops::mean_rows(ops::slice_rows(r.hidden, 2, 5));
  EXPECT_TRUE(bit_equal(r.pooled, expect));
}

TEST(Encode, RejectsBadInputs) {
  Rng rng(7);
  EncoderConfig cfg = tiny_encoder();
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  EXPECT_THROW(encode(w, cfg, Tensor::zeros({3, cfg.model_dim + 1})), DimensionError);
  EXPECT_THROW(encode(w, cfg, Tensor::zeros({cfg.max_len + 1, cfg.model_dim})), ContractError);
  EncodeOptions opt;
  opt.attr_rows = {3};
  ScalePair ones{Tensor::full({cfg.model_dim}, 1.0), Tensor::full({cfg.model_dim}, 1.0)};
  opt.scales = &ones;
  EXPECT_THROW(encode(w, cfg, Tensor::zeros({3, cfg.model_dim}), opt), ContractError);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c = tiny_encoder();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_encoder();
  c.modulated_layers = {3};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_encoder();
  EXPECT_NO_THROW(c.validate());
}

// Modulation at layers 2..3 of 4. Layer 1 must match an unmodulated run
// everywhere; inside a modulated layer the hook touches only attribute rows;
// layer 4 is left alone by the hook.
TEST(Locality, HookTouchesOnlyAttributeRowsAndLaterLayers) {
  Rng rng(8);
  EncoderConfig cfg = tiny_encoder(4);
  cfg.modulated_layers = {2, 3};
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  Tensor x = random_tensor(rng, {7, cfg.model_dim}, 1.0, false);
  ScalePair s{random_tensor(rng, {cfg.model_dim}, 0.05, false), random_tensor(rng, {cfg.model_dim}, 0.05, false)};
  for (auto* t : {&s.s_k, &s.s_v})
    for (auto& v : t->mutable_data()) v += 1.0;

  EncodeOptions plain_opt;
  plain_opt.record_kv = true;
  EncodeOptions mod_opt = plain_opt;
  mod_opt.attr_rows = {2, 4};
  mod_opt.scales = &s;
  EncodeResult plain = encode(w, cfg, x, plain_opt), mod = encode(w, cfg, x, mod_opt);
  ASSERT_EQ(mod.per_layer_kv.size(), 4u);

  EXPECT_TRUE(bit_equal(plain.per_layer_kv[0].k_post, mod.per_layer_kv[0].k_post));
  EXPECT_TRUE(bit_equal(plain.per_layer_kv[0].v_post, mod.per_layer_kv[0].v_post));
  EXPECT_TRUE(bit_equal(plain.per_layer_kv[1].k_pre, mod.per_layer_kv[1].k_pre));

  for (std::size_t l = 0; l < 4; ++l) {
    const auto& kv = mod.per_layer_kv[l];
    const bool modulated = cfg.is_modulated(l + 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const bool attr = r == 2 || r == 4;
      const bool same = bit_equal(ops::row(kv.k_pre, r), ops::row(kv.k_post, r)) &&
                        bit_equal(ops::row(kv.v_pre, r), ops::row(kv.v_post, r));
      EXPECT_EQ(same, !(modulated && attr)) << "layer " << l + 1 << " row " << r;
    }
  }
}

TEST(Apa, ZeroBranchIsIdentity) {
  Rng rng(9);
  ApaWeights w = ApaWeights::init(16, 4, 0.02, rng);
  for (auto& x : w.w1.mutable_data()) x = 0;
  Tensor a = random_tensor(rng, {16}, 1.0, false);
  Tensor p = apa_prefix(w, a);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(p[i], a[i], 1e-15);
}

TEST(Apa, PreservesNorm) {
  Rng rng(10);
  for (int t = 0; t < 200; ++t) {
    ApaWeights w = ApaWeights::init(16, 4, 0.02, rng);
    randomize(w.w1, rng, 1.0);
    randomize(w.w2, rng, 3.0);
    Tensor a = random_tensor(rng, {16}, rng.uniform(0.01, 10), false);
    Tensor p = apa_prefix(w, a);
    EXPECT_NEAR(ops::l2_norm(p).item(), ops::l2_norm(a).item(), 1e-9);
  }
}

TEST(Apa, ZeroInputUnchanged) {
  Rng rng(11);
  ApaWeights w = ApaWeights::init(8, 2, 0.5, rng);
  randomize(w.w2, rng, 1.0);
  Tensor p = apa_prefix(w, Tensor::zeros({8}));
  for (double x : p.data()) EXPECT_EQ(x, 0.0);
}

TEST(Apa, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  ApaWeights w = ApaWeights::init(8, 3, 0.5, rng);
  randomize(w.w2, rng, 0.5);
  randomize(w.ln_g, rng, 1.0);
  Tensor a = random_tensor(rng, {8});
  Tensor readout = random_tensor(rng, {8}, 1.0, false);
  auto f = [&](const std::vector<Tensor>&) { return ops::dot(apa_prefix(w, a), readout); };
  EXPECT_TRUE(grad_check(f, {w.w1, w.w2, w.ln_g, w.ln_b, a}).ok());
}

TEST(BuildPrefixes, EmptySpansGiveNoRows) {
  Rng rng(13);
  ApaWeights w = ApaWeights::init(8, 2, 0.02, rng);
  Tensor p = build_prefixes(w, random_tensor(rng, {4, 8}, 1.0, false), {});
  EXPECT_EQ(p.rows(), 0u);
  EXPECT_EQ(p.cols(), 8u);
}

TEST(BuildPrefixes, OneRowPerAttributePosition) {
  Rng rng(14);
  ApaWeights w = ApaWeights::init(8, 2, 0.3, rng);
  randomize(w.w2, rng, 0.3);
  Tensor e = random_tensor(rng, {4, 8}, 1.0, false);
  Tensor p = build_prefixes(w, e, spans_of({{2}, {3}}));
  ASSERT_EQ(p.rows(), 2u);
  EXPECT_TRUE(bit_equal(ops::row(p, 0), apa_prefix(w, ops::row(e, 1))));
  EXPECT_TRUE(bit_equal(ops::row(p, 1), apa_prefix(w, ops::row(e, 2))));
}

TEST(BuildPrefixes, DuplicateEmbeddingsGiveIdenticalRows) {
  Rng rng(15);
  ApaWeights w = ApaWeights::init(8, 2, 0.3, rng);
  Tensor r = random_tensor(rng, {1, 8}, 1.0, false);
  Tensor e = ops::concat_rows({r, r, r});
  Tensor p = build_prefixes(w, e, spans_of({{1}, {3}}));
  EXPECT_TRUE(bit_equal(ops::row(p, 0), ops::row(p, 1)));
}

TEST(ConditionVector, SingleSpanIsItsMean) {
  Tensor e = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 9});
  Tensor c = condition_vector(e, spans_of({{2, 3}}));
  EXPECT_NEAR(c[0], 4.0, 1e-15);
  EXPECT_NEAR(c[1], 6.5, 1e-15);
}

TEST(ConditionVector, LengthWeightedPrototypes) {
  // p = row 1, q = mean of rows 2..4, c = (p + 3q) / 4.
  Tensor e = Tensor::matrix(4, 2, {1, 0, 0, 3, 3, 3, 6, 0});
  Tensor c = condition_vector(e, spans_of({{1}, {2, 3, 4}}));
  const double q0 = 3.0, q1 = 2.0;
  EXPECT_NEAR(c[0], (1 + 3 * q0) / 4, 1e-15);
  EXPECT_NEAR(c[1], (0 + 3 * q1) / 4, 1e-15);
}

TEST(ConditionVector, EqualEmbeddingsGiveThatVector) {
  Tensor e = Tensor::matrix(3, 2, {0.5, -2, 0.5, -2, 0.5, -2});
  Tensor c = condition_vector(e, spans_of({{1}, {2, 3}}));
  EXPECT_NEAR(c[0], 0.5, 1e-15);
  EXPECT_NEAR(c[1], -2.0, 1e-15);
}

TEST(ModulationScales, ZeroWeightsGiveOnes) {
  Rng rng(16);
  ModulatorWeights w = ModulatorWeights::init(8, 2, 0.1, 0.1, 0.02, rng);
  ScalePair s = modulation_scales(w, random_tensor(rng, {8}, 1.0, false));
  for (double x : s.s_k.data()) EXPECT_EQ(x, 1.0);
  for (double x : s.s_v.data()) EXPECT_EQ(x, 1.0);
}

TEST(ModulationScales, StayInsideBandUnderSaturation) {
  Rng rng(17);
  ModulatorWeights w = ModulatorWeights::init(8, 2, 0.1, 0.2, 0.02, rng);
  for (Tensor* t : {&w.wk1, &w.wk2, &w.wv1, &w.wv2}) randomize(*t, rng, 100.0);
  ScalePair s = modulation_scales(w, random_tensor(rng, {8}, 100.0, false));
  for (double x : s.s_k.data()) EXPECT_LT(std::abs(x - 1), 0.1);
  for (double x : s.s_v.data()) EXPECT_LT(std::abs(x - 1), 0.2);
}

TEST(ModulationScales, GradientMatchesFiniteDifferences) {
  Rng rng(18);
  ModulatorWeights w = ModulatorWeights::init(8, 3, 0.1, 0.1, 0.5, rng);
  randomize(w.wk2, rng, 0.5);
  randomize(w.wv2, rng, 0.5);
  Tensor c = random_tensor(rng, {8});
  Tensor rk = random_tensor(rng, {8}, 1.0, false), rv = random_tensor(rng, {8}, 1.0, false);
  auto f = [&](const std::vector<Tensor>&) {
    ScalePair s = modulation_scales(w, c);
    return ops::add(ops::dot(s.s_k, rk), ops::dot(s.s_v, rv));
  };
  EXPECT_TRUE(grad_check(f, {w.wk1, w.wk2, w.wv1, w.wv2, c}).ok());
}

TEST(DsaaConfig, Validation) {
  DsaaConfig c;
  c.gamma_k = 0;
  EXPECT_THROW(c.validate(64), std::invalid_argument);
  c = DsaaConfig{};
  c.apa_bottleneck = 64;
  EXPECT_THROW(c.validate(64), std::invalid_argument);
  EXPECT_NO_THROW(DsaaConfig{}.validate(64));
}

TEST(DsaaParams, InitialisationIsIdentity) {
  Rng rng(19);
  DsaaParams p = DsaaParams::init(DsaaConfig{}, 64, rng);
  for (const Tensor* t : {&p.apa.w2, &p.mod.wk2, &p.mod.wv2})
    for (double x : t->data()) EXPECT_EQ(x, 0.0);
  double s = 0;
  for (double x : p.apa.w1.data()) s += x * x;
  EXPECT_GT(s, 0.0);
}

TEST(DsaaParams, CheckpointRoundTrip) {
  Rng rng(20);
  DsaaParams p = DsaaParams::init(DsaaConfig{}, 32, rng);
  randomize(p.apa.w2, rng, 1.0);
  const auto path = std::filesystem::temp_directory_path() / "dsaa_params_roundtrip.ckpt";
  save_checkpoint(path, p.to_checkpoint());
  Checkpoint back = load_checkpoint(path);
  DsaaParams q = DsaaParams::from_checkpoint(back, DsaaConfig{}, 32);
  auto a = p.named(), b = q.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(bit_equal(a[i].second, b[i].second)) << a[i].first;
  }
  EXPECT_EQ(checkpoint_digest(p.to_checkpoint()), checkpoint_digest(back));
  EXPECT_THROW(DsaaParams::from_checkpoint(back, DsaaConfig{}, 64), CheckpointError);
  std::filesystem::remove(path);
}

TEST(EncoderWeights, CheckpointRoundTrip) {
  Rng rng(21);
  EncoderConfig cfg = tiny_encoder();
  EncoderWeights w = EncoderWeights::init(cfg, rng);
  EncoderWeights back = EncoderWeights::from_checkpoint(w.to_checkpoint(cfg), cfg);
  auto a = w.named(), b = back.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(a[i].second, b[i].second)) << a[i].first;
  EncoderConfig wider = cfg;
  wider.model_dim = 32;
  EXPECT_THROW(EncoderWeights::from_checkpoint(w.to_checkpoint(cfg), wider), CheckpointError);
}
