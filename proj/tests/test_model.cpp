#include <gtest/gtest.h>

#include "densformer/gradcheck.hpp"
#include "support.hpp"

using namespace densformer;
using testsupport::random_tensor;
using testsupport::randomize;
using testsupport::small_config;

namespace {

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void zero(ParamStore<float>& s, const std::string& name) {
  for (float& v : s.get(name).mutable_data()) v = 0.0f;
}

ModelConfig tiny() { return tiny_model_config(); }

FfnParams<float> random_ffn(std::size_t c, std::size_t hidden, Rng& rng) {
  return {{random_tensor({c, hidden}, rng), random_tensor({hidden}, rng)},
          DepthwiseConv2dParams<float>{random_tensor({hidden, 1, 3, 3}, rng), random_tensor({hidden}, rng)},
          {random_tensor({hidden, c}, rng), random_tensor({c}, rng)}};
}

double gelu_ref(double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); }

// Tokens [n, C] on an h x w grid through the five LeFF stages, in double.
std::vector<double> naive_leff(const Tensor<float>& tok, std::size_t h, std::size_t w, const FfnParams<float>& p) {
  const std::size_t n = h * w, c = tok.dim(1), hid = p.fc1.weight.dim(1);
  std::vector<double> a(n * hid), b(n * hid), out(n * c);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < hid; ++j) {
      double s = p.fc1.bias[j];
      for (std::size_t i = 0; i < c; ++i) s += tok[t * c + i] * p.fc1.weight[i * hid + j];
      a[t * hid + j] = gelu_ref(s);
    }
  auto refl = [](long i, long n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t j = 0; j < hid; ++j) {
        double s = p.dw->bias[j];
        for (long ky = -1; ky <= 1; ++ky)
          for (long kx = -1; kx <= 1; ++kx) {
            const auto sy = static_cast<std::size_t>(refl(static_cast<long>(y) + ky, static_cast<long>(h)));
            const auto sx = static_cast<std::size_t>(refl(static_cast<long>(x) + kx, static_cast<long>(w)));
            s += p.dw->weight[j * 9 + static_cast<std::size_t>((ky + 1) * 3 + kx + 1)] * a[(sy * w + sx) * hid + j];
          }
        b[(y * w + x) * hid + j] = gelu_ref(s);
      }
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < c; ++j) {
      double s = p.fc2.bias[j];
      for (std::size_t i = 0; i < hid; ++i) s += b[t * hid + i] * p.fc2.weight[i * c + j];
      out[t * c + j] = s;
    }
  return out;
}

}  // namespace

TEST(Leff, ZeroInputZeroBiasGivesZero) {
  Rng rng(1);
  auto p = random_ffn(8, 32, rng);
  for (auto* t : {&p.fc1.bias, &p.dw->bias, &p.fc2.bias}) *t = Tensor<float>(t->shape(), 0.0f);
  auto y = leff_forward_tokens(Tensor<float>({16, 8}, 0.0f), 4, 4, p);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Leff, ShapePreservedAndMatchesStageOracle) {
  Rng rng(2);
  auto p = random_ffn(64, 256, rng);
  auto tok = random_tensor({64, 64}, rng);
  auto y = leff_forward_tokens(tok, 8, 8, p);
  ASSERT_EQ(y.shape(), (Shape{64, 64}));
  const auto want = naive_leff(tok, 8, 8, p);
  for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(y[i], want[i], 1e-4 * (1 + std::abs(want[i])));
}

TEST(Leff, NonRectangularGeometryAndErrors) {
  Rng rng(3);
  auto p = random_ffn(4, 8, rng);
  auto tok = random_tensor({15, 4}, rng);
  const auto want = naive_leff(tok, 3, 5, p);
  auto y = leff_forward_tokens(tok, 3, 5, p);
  for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(y[i], want[i], 1e-5);
  EXPECT_THROW(leff_forward_tokens(tok, 4, 4, p), ShapeError);
}

TEST(ETransformer, ZeroOutputProjectionsGiveIdentity) {
  auto cfg = tiny();
  auto s = init_params<float>(cfg, 3);
  randomize(s, 4);
  for (const char* n : {"attn.proj.weight", "attn.proj.bias", "ffn.fc2.weight", "ffn.fc2.bias"}) zero(s, "g0.b0.l0." + std::string(n));
  Rng rng(5);
  auto x = random_tensor({1, 8, 16, 16}, rng);
  EXPECT_TRUE(bit_equal(etransformer_forward(x, s, "g0.b0.l0.", cfg), x));
}

TEST(ETransformer, MatchesCompositionOracle) {
  for (bool strict : {false, true}) {
    for (Variant v : {Variant::vanilla, Variant::enhanced_lewin}) {
      auto cfg = tiny();
      cfg.set_variant(v);
      cfg.ffn_from_layer_input = strict;
      auto s = init_params<float>(cfg, 6);
      randomize(s, 7);
      Rng rng(8);
      auto x = random_tensor({1, 8, 16, 16}, rng);
      auto e = etransformer_params(s, "g0.b0.l0.", cfg);
      auto x1 = add(wmsa(layer_norm(x, e.norm1, kLayerNormEps, 1), cfg.attention, e.attn), x);
      auto ln2 = layer_norm(strict ? x : x1, e.norm2, kLayerNormEps, 1);
      auto f = v == Variant::vanilla ? channel_linear(gelu(channel_linear(ln2, e.ffn.fc1)), e.ffn.fc2)
                                     : channel_linear(gelu(depthwise_conv2d(gelu(channel_linear(ln2, e.ffn.fc1)), *e.ffn.dw)), e.ffn.fc2);
      auto want = add(f, x1);
      auto got = etransformer_forward(x, s, "g0.b0.l0.", cfg);
      EXPECT_EQ(got.shape(), (Shape{1, 8, 16, 16}));
      EXPECT_TRUE(bit_equal(got, want)) << to_string(v) << " strict=" << strict;
    }
  }
}

TEST(ETransformer, StrictOperandChangesOutput) {
  auto cfg = tiny();
  auto s = init_params<float>(cfg, 9);
  randomize(s, 10);
  Rng rng(11);
  auto x = random_tensor({1, 8, 8, 8}, rng);
  auto a = etransformer_forward(x, s, "g0.b0.l0.", cfg);
  cfg.ffn_from_layer_input = true;
  EXPECT_FALSE(bit_equal(a, etransformer_forward(x, s, "g0.b0.l0.", cfg)));
}

TEST(SformerBlock, ZeroConvIsIdentityAndComposition) {
  auto cfg = tiny();
  cfg.layers = 2;
  auto s = init_params<float>(cfg, 12);
  randomize(s, 13);
  Rng rng(14);
  auto f = random_tensor({1, 8, 8, 12}, rng);
  auto t = etransformer_forward(etransformer_forward(f, s, "g0.b0.l0.", cfg), s, "g0.b0.l1.", cfg);
  auto want = add(conv2d(t, s.get("g0.b0.conv.weight"), s.get("g0.b0.conv.bias")), f);
  auto got = sformer_block_forward(f, s, 0, 0, cfg);
  EXPECT_EQ(got.shape(), f.shape());
  EXPECT_TRUE(bit_equal(got, want));
  zero(s, "g0.b0.conv.weight");
  zero(s, "g0.b0.conv.bias");
  EXPECT_TRUE(bit_equal(sformer_block_forward(f, s, 0, 0, cfg), f));
}

TEST(SformerGroup, ResidualPerScheme) {
  auto cfg = tiny();
  cfg.blocks = 2;
  auto s = init_params<float>(cfg, 15);
  randomize(s, 16);
  Rng rng(17);
  auto in = random_tensor({1, 8, 8, 8}, rng);
  auto body = sformer_block_forward(sformer_block_forward(in, s, 0, 0, cfg), s, 0, 1, cfg);
  EXPECT_TRUE(bit_equal(sformer_group_forward(in, s, 0, cfg), add(body, in)));
  cfg.connection = Connection::cross;
  EXPECT_TRUE(bit_equal(sformer_group_forward(in, s, 0, cfg), body));
  // Zeroing each block's conv makes the body the identity: the group doubles
  // its input with the residual and passes it through without.
  for (std::size_t b = 0; b < 2; ++b) {
    zero(s, "g0.b" + std::to_string(b) + ".conv.weight");
    zero(s, "g0.b" + std::to_string(b) + ".conv.bias");
  }
  EXPECT_TRUE(bit_equal(sformer_group_forward(in, s, 0, cfg), in));
  cfg.connection = Connection::local;
  EXPECT_TRUE(bit_equal(sformer_group_forward(in, s, 0, cfg), add(in, in)));
}

TEST(DenseFuse, SingleInputIdentityConv) {
  Rng rng(18);
  auto x = random_tensor({1, 3, 4, 4}, rng);
  Tensor<float> w({3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_TRUE(bit_equal(dense_fuse<float>({x}, {w, Tensor<float>({3}, 0.0f)}), x));
}

TEST(DenseFuse, AveragingConvOfEqualInputs) {
  Rng rng(19);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  Tensor<float> w({2, 4, 1, 1}, {0.5f, 0, 0.5f, 0, 0, 0.5f, 0, 0.5f});
  auto y = dense_fuse<float>({x, x}, {w, Tensor<float>()});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y[i], x[i]);
}

TEST(DenseFuse, MatchesConcatConvOracle) {
  Rng rng(20);
  const std::size_t c = 3, g = 3, hw = 20;
  std::vector<Tensor<float>> prev;
  for (std::size_t i = 0; i < g; ++i) prev.push_back(random_tensor({1, c, 4, 5}, rng));
  auto w = random_tensor({c, g * c, 1, 1}, rng), b = random_tensor({c}, rng);
  auto y = dense_fuse<float>(prev, {w, b});
  for (std::size_t o = 0; o < c; ++o)
    for (std::size_t p = 0; p < hw; ++p) {
      double s = b[o];
      for (std::size_t i = 0; i < g * c; ++i) s += w[o * g * c + i] * prev[i / c][(i % c) * hw + p];
      EXPECT_NEAR(y[o * hw + p], s, 1e-5);
    }
  EXPECT_THROW(dense_fuse<float>({prev[0], random_tensor({1, c, 4, 4}, rng)}, {w, b}), ShapeError);
  EXPECT_THROW(dense_fuse<float>({}, {w, b}), ShapeError);
}

TEST(Densformer, ZeroReconstructionIsIdentity) {
  for (std::size_t cin : {1u, 3u}) {
    auto cfg = small_config(cin);
    auto s = init_params<float>(cfg, 21);
    Rng rng(22);
    auto x = random_tensor({2, cin, 12, 9}, rng, 0, 1);
    EXPECT_TRUE(bit_equal(densformer_forward(x, s, cfg), x));
  }
}

TEST(Densformer, ShapeAndChannelCheck) {
  ModelConfig cfg;
  cfg.channels = 16;
  cfg.groups = cfg.blocks = cfg.layers = 1;
  auto s = init_params<float>(cfg, 23);
  randomize(s, 24, -0.05, 0.05);
  Rng rng(25);
  auto y = densformer_forward(random_tensor({1, 3, 40, 40}, rng, 0, 1), s, cfg);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 40, 40}));
  EXPECT_THROW(densformer_forward(random_tensor({1, 1, 40, 40}, rng), s, cfg), ShapeError);
}

TEST(Densformer, ExplicitWiringOracle) {
  for (Connection conn : {Connection::dense, Connection::local, Connection::cross}) {
    auto cfg = small_config();
    cfg.groups = 3;
    cfg.connection = conn;
    auto s = init_params<float>(cfg, 26);
    randomize(s, 27);
    Rng rng(28);
    auto x = random_tensor({1, 1, 8, 8}, rng, 0, 1);
    auto f0 = conv2d(x, s.get("pre.weight"), s.get("pre.bias"));
    auto fuse = [&](std::size_t g, const std::vector<Tensor<float>>& outs) {
      const std::string n = "fuse" + std::to_string(g);
      return conv2d(concat(outs, 1), s.get(n + ".weight"), s.get(n + ".bias"));
    };
    auto o1 = sformer_group_forward(f0, s, 0, cfg);
    auto o2 = sformer_group_forward(conn == Connection::local ? o1 : fuse(1, {f0, o1}), s, 1, cfg);
    auto o3 = sformer_group_forward(conn == Connection::local ? o2 : fuse(2, {f0, o1, o2}), s, 2, cfg);
    auto want = add(x, conv2d(add(o3, f0), s.get("rec.weight"), s.get("rec.bias")));
    EXPECT_TRUE(bit_equal(densformer_forward(x, s, cfg), want)) << to_string(conn);
  }
}

TEST(Densformer, SingleGroupDenseEqualsLocal) {
  auto cfg = tiny();
  auto s = init_params<float>(cfg, 29);
  randomize(s, 30);
  Rng rng(31);
  auto x = random_tensor({1, 1, 8, 8}, rng, 0, 1);
  auto dense = densformer_forward(x, s, cfg);
  cfg.connection = Connection::local;
  EXPECT_TRUE(bit_equal(dense, densformer_forward(x, s, cfg)));
  cfg.connection = Connection::cross;  // no group residual, so it differs even here
  EXPECT_FALSE(bit_equal(dense, densformer_forward(x, s, cfg)));
}

TEST(Densformer, ForwardIsDeterministic) {
  auto cfg = small_config(3);
  auto s = init_params<float>(cfg, 32);
  randomize(s, 33);
  Rng rng(34);
  auto x = random_tensor({1, 3, 10, 10}, rng, 0, 1);
  EXPECT_TRUE(bit_equal(densformer_forward(x, s, cfg), densformer_forward(x, s, cfg)));
}

TEST(Densformer, EndToEndGradientCheck) {
  for (Variant v : {Variant::vanilla, Variant::vanilla_c, Variant::lewin, Variant::enhanced_lewin}) {
    auto cfg = tiny();
    cfg.set_variant(v);
    auto r = model_gradient_check(cfg, 41, 24, 8);
    EXPECT_GE(r.sampled, 20u);
    EXPECT_LT(r.result.rel_error, 1e-4) << to_string(v);
  }
}

TEST(ParamCount, SingleConv) {
  ParamStore<float> s;
  s.add("w", Tensor<float>({1, 1, 3, 3}));
  s.add("b", Tensor<float>({1}));
  EXPECT_EQ(s.scalar_count(), 10u);
}

TEST(ParamCount, TinyConfigHandLedger) {
  // C=8, C_in=1, one group/block/layer, M=4, two heads, ratio 4.
  const std::size_t pre = 8 * 1 * 9 + 8;
  const std::size_t norms = 2 * 8 + 2 * 8;
  const std::size_t qkv = 3 * 8 * 8;
  const std::size_t qkv_conv = 3 * (8 * 9 + 8) + 3 * (2 * 8);
  const std::size_t bias_free = 2 * 16 * 16, bias_tied = 7 * 7 * 2;
  const std::size_t proj = 8 * 8 + 8;
  const std::size_t mlp = (8 * 32 + 32) + (32 * 8 + 8);
  const std::size_t leff_dw = 32 * 9 + 32;
  const std::size_t block_conv = 8 * 8 * 9 + 8;
  const std::size_t rec = 1 * 8 * 9 + 1;
  const std::size_t shared = pre + norms + qkv + proj + mlp + block_conv + rec;

  auto cfg = tiny();
  EXPECT_EQ(param_count(cfg), shared + qkv_conv + bias_free + leff_dw);
  EXPECT_EQ(param_count(cfg), 2705u);
  cfg.attention.bias_mode = BiasMode::offset_tied;
  EXPECT_EQ(param_count(cfg), shared + qkv_conv + bias_tied + leff_dw);
  cfg.set_variant(Variant::vanilla);
  EXPECT_EQ(param_count(cfg), shared + bias_tied);
  cfg.set_variant(Variant::lewin);
  EXPECT_EQ(param_count(cfg), shared + bias_tied + leff_dw);
  cfg.set_variant(Variant::vanilla_c);
  EXPECT_EQ(param_count(cfg), shared + bias_tied + qkv_conv);
  EXPECT_EQ(init_params<float>(cfg, 0).scalar_count(), param_count(cfg));
}

TEST(ParamCount, FusionConvsSeparateSchemes) {
  auto cfg = small_config();
  cfg.groups = 3;
  const auto dense = param_count(cfg);
  cfg.connection = Connection::cross;
  EXPECT_EQ(param_count(cfg), dense);
  cfg.connection = Connection::local;
  // fuse1: 2C -> C, fuse2: 3C -> C, both 1x1 with bias
  EXPECT_EQ(dense - param_count(cfg), (16 * 8 + 8) + (24 * 8 + 8));
}

TEST(ParamCount, DefaultConfigInBudget) {
  ModelConfig cfg;
  const auto n = param_count(cfg);
  EXPECT_GE(n, 5'000'000u);
  EXPECT_LE(n, 11'000'000u);
}

TEST(InitParams, DeterministicAndZeroBiases) {
  auto cfg = small_config(3);
  auto a = init_params<float>(cfg, 77), b = init_params<float>(cfg, 77), c = init_params<float>(cfg, 78);
  EXPECT_TRUE(a.values_equal(b));
  EXPECT_FALSE(a.values_equal(c));
  for (const auto& e : a) {
    const bool is_bias = e.name.ends_with(".bias") || e.name.ends_with("rel_bias") || e.name.ends_with(".beta") ||
                         e.name.starts_with("rec.");
    if (!is_bias) continue;
    for (float v : e.tensor.data()) ASSERT_EQ(v, 0.0f) << e.name;
  }
  for (float v : a.get("g0.b0.l0.norm1.gamma").data()) EXPECT_EQ(v, 1.0f);
}

TEST(InitParams, LinearWeightStatistics) {
  auto s = init_params<float>(ModelConfig{}, 5);
  const auto& w = s.get("g0.b0.l0.attn.wq");
  ASSERT_EQ(w.shape(), (Shape{64, 64}));
  const double n = static_cast<double>(w.numel());
  double m = 0, v = 0, mx = 0;
  for (float x : w.data()) {
    m += x;
    mx = std::max(mx, std::abs(static_cast<double>(x)));
  }
  m /= n;
  for (float x : w.data()) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / n);
  // N(0, 0.02) truncated at two standard deviations.
  const double pdf2 = std::exp(-2.0) / std::sqrt(2 * std::numbers::pi), mass = std::erf(2 / std::sqrt(2.0));
  const double target_sd = 0.02 * std::sqrt(1 - 4 * pdf2 / mass);
  EXPECT_LT(std::abs(m), 3 * target_sd / std::sqrt(n));
  EXPECT_LT(std::abs(sd - target_sd), 3 * target_sd / std::sqrt(2 * n));
  EXPECT_LE(mx, 0.04 + 1e-7);
}

TEST(ParamStore, OrderStableAndCopiesDeep) {
  auto cfg = small_config();
  auto s = init_params<float>(cfg, 1);
  auto layout = param_layout(cfg);
  ASSERT_EQ(layout.size(), s.size());
  std::size_t i = 0;
  for (const auto& e : s) EXPECT_EQ(e.name, layout[i++].name);
  auto copy = s;
  copy.get("pre.weight").mutable_data()[0] += 1.0f;
  EXPECT_NE(copy.get("pre.weight")[0], s.get("pre.weight")[0]);
  EXPECT_THROW(s.add("pre.weight", Tensor<float>({1})), std::invalid_argument);
  EXPECT_THROW(s.get("nope"), std::out_of_range);
}
