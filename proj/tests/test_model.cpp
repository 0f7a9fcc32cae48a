#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "oracle/reference.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/model.hpp"
#include "w4a4/ptq.hpp"

using namespace w4a4;
using oracle::Mat;

namespace {

ModelConfig small(std::size_t layers, std::size_t d, std::size_t heads, std::size_t len) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.seq_len = len;
  c.init_std = 0.3;
  c.seed = 5;
  return c;
}

std::vector<std::int32_t> tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = static_cast<std::int32_t>(rng() % 256);
  return t;
}

// Every parameter, including gains and biases, gets a random value.
void randomize(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.4);
  for (auto& p : m.parameters()) {
    const bool gain = p.name.find("gain") != std::string::npos;
    for (auto& v : p.var->mutable_value().data()) v = static_cast<float>(gain ? 1.0 + n(rng) : n(rng));
  }
}

Mat add_bias(Mat x, const Mat& b) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += b[i % b.size()];
  return x;
}

// Straight transcription of the pre-LN block equations in double precision.
Mat reference_logits(Model& m, const std::vector<std::int32_t>& t, std::size_t batch) {
  std::map<std::string, Mat> P;
  for (auto& p : m.parameters()) P[p.name] = oracle::to_double(p.var->value());
  const auto& c = m.config();
  const std::size_t d = c.d_model, f = c.d_ff(), V = c.vocab_size, n = t.size(), len = n / batch;
  Mat x(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = P["tok_emb"][t[i] * d + j] + P["pos_emb"][(i % len) * d + j];
  const double scale = c.attn_scale ? 1.0 / std::sqrt(static_cast<double>(c.d_head())) : 1.0;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Mat y1 = oracle::layernorm(x, n, d, P[pre + "ln1.gain"], P[pre + "ln1.bias"]);
    Mat qkv = add_bias(oracle::matmul(y1, P[pre + "qkv.weight"], n, d, 3 * d), P[pre + "qkv.bias"]);
    Mat y2 = oracle::causal_attention(qkv, batch, len, d, c.n_heads, scale);
    Mat attn = add_bias(oracle::matmul(y2, P[pre + "attn_proj.weight"], n, d, d), P[pre + "attn_proj.bias"]);
    Mat z(n * d);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + attn[i];
    Mat y3 = oracle::layernorm(z, n, d, P[pre + "ln2.gain"], P[pre + "ln2.bias"]);
    Mat h = add_bias(oracle::matmul(y3, P[pre + "mlp_fc.weight"], n, d, f), P[pre + "mlp_fc.bias"]);
    for (auto& v : h) v = oracle::gelu(v);
    Mat out = add_bias(oracle::matmul(h, P[pre + "mlp_proj.weight"], n, f, d), P[pre + "mlp_proj.bias"]);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = z[i] + out[i];
  }
  Mat xf = oracle::layernorm(x, n, d, P["ln_f.gain"], P["ln_f.bias"]);
  return add_bias(oracle::matmul(xf, P["head.weight"], n, d, V), P["head.bias"]);
}

Tensor logits(Model& m, std::span<const std::int32_t> t, std::size_t batch, bool integer = false) {
  NoGradGuard g;
  ForwardOptions o;
  o.integer_matmul = integer;
  return m.forward(t, batch, o).logits.value();
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = small(2, 6, 4, 8);
  EXPECT_THROW(c.validate(), ConfigError);
  c = small(0, 8, 2, 8);
  EXPECT_THROW(c.validate(), ConfigError);
  c = small(2, 8, 2, 8);
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(small(2, 8, 2, 8).validate());
  EXPECT_EQ(small(2, 8, 2, 8).d_ff(), 32u);
}

TEST(ModelShape, ParameterShapes) {
  Model m(small(2, 8, 2, 16));
  std::map<std::string, Shape> shapes;
  for (auto& p : m.parameters()) shapes[p.name] = p.var->shape();
  EXPECT_EQ(shapes["layers.0.qkv.weight"], (Shape{8, 24}));
  EXPECT_EQ(shapes["layers.1.attn_proj.weight"], (Shape{8, 8}));
  EXPECT_EQ(shapes["layers.0.mlp_fc.weight"], (Shape{8, 32}));
  EXPECT_EQ(shapes["layers.1.mlp_proj.weight"], (Shape{32, 8}));
  EXPECT_EQ(shapes["head.weight"], (Shape{8, 256}));
  EXPECT_EQ(shapes["pos_emb"], (Shape{16, 8}));
}

TEST(ModelForward, BaselineMatchesHandWrittenReference) {
  for (bool scale : {true, false}) {
    auto cfg = small(2, 4, 2, 6);
    cfg.attn_scale = scale;
    Model m(cfg);
    randomize(m, 11);
    auto t = tokens(12, 3);
    auto got = logits(m, t, 2);
    auto ref = reference_logits(m, t, 2);
    EXPECT_LT(oracle::rel_err(oracle::to_double(got), ref), 1e-5) << "attn_scale " << scale;
  }
}

TEST(ModelForward, RandomInitLogitsAreFinite) {
  Model m(ModelConfig{});
  auto t = tokens(64, 4);
  auto out = logits(m, t, 1);
  for (float v : out.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(ModelForward, SingleTokenAttentionReturnsValueRow) {
  Model m(small(1, 8, 2, 4));
  randomize(m, 12);
  Tensor qkv, attn_in;
  ActivationTap tap = [&](std::size_t, std::string_view site, const Tensor& v) {
    if (site == "qkv_out") qkv = v;
    if (site == "AttnProj_Input") attn_in = v;
  };
  ForwardOptions o;
  o.tap = &tap;
  std::vector<std::int32_t> t = {42};
  m.forward(t, 1, o);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(attn_in[c], qkv[16 + c]);
}

TEST(ModelForward, LiteralMlpInputWiring) {
  auto cfg = small(1, 8, 2, 4);
  cfg.literal_mlp_input = true;
  Model m(cfg);
  Tensor attn_in, mlp_in;
  ActivationTap tap = [&](std::size_t, std::string_view site, const Tensor& v) {
    if (site == "AttnProj_Input") attn_in = v;
    if (site == "MLP_Input") mlp_in = v;
  };
  ForwardOptions o;
  o.tap = &tap;
  auto t = tokens(4, 5);
  m.forward(t, 1, o);
  EXPECT_EQ(attn_in, mlp_in);
}

TEST(ModelForward, SequenceErrors) {
  Model m(small(1, 8, 2, 4));
  auto t = tokens(10, 6);
  EXPECT_THROW(m.forward(t, 1), DimensionError);
  EXPECT_THROW(m.forward(std::span(t).first(9), 2), DimensionError);
  std::vector<std::int32_t> bad = {1, 2, 300, 4};
  EXPECT_THROW(m.forward(bad, 1), InputError);
}

TEST(ModelQat, SixteenBitMatchesBaseline) {
  auto base_cfg = small(2, 16, 2, 8);
  auto qat_cfg = base_cfg;
  qat_cfg.qat.enabled = true;
  qat_cfg.qat.bits = 16;
  Model base(base_cfg), qat(qat_cfg);
  auto t = tokens(16, 7);
  std::vector<std::pair<std::string, Tensor>> inputs;
  ActivationTap tap = [&](std::size_t l, std::string_view site, const Tensor& v) {
    if (parse_site(site)) inputs.emplace_back(std::to_string(l) + std::string(site), v);
  };
  ForwardOptions o;
  o.tap = &tap;
  Tensor q_logits;
  {
    NoGradGuard g;
    q_logits = qat.forward(t, 2, o).logits.value();
  }
  ASSERT_EQ(inputs.size(), 8u);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ClipParam& c = qat.clips()[i];
    const Tensor& x = inputs[i].second;
    auto fq = fakequant_forward(x, c);
    for (std::size_t k = 0; k < x.numel(); ++k) {
      ASSERT_LT(std::fabs(x[k]), c.clip_hi);
      ASSERT_LE(std::fabs(fq[k] - x[k]), 0.5 / c.scale() + 1e-7) << inputs[i].first;
    }
  }
  EXPECT_LT(oracle::rel_err(oracle::to_double(q_logits), oracle::to_double(logits(base, t, 2))), 1e-3);
}

TEST(ModelQat, EveryClipReceivesGradient) {
  auto cfg = small(2, 16, 2, 8);
  cfg.qat.enabled = true;
  Model m(cfg);
  randomize(m, 13);
  for (auto& c : m.clips()) c.clip_lo = -0.05, c.clip_hi = 0.05;
  auto t = tokens(16, 8);
  std::vector<std::int32_t> tgt(t.begin() + 1, t.end());
  tgt.push_back(0);
  auto fr = m.forward(t, 2);
  backward(ops::cross_entropy(fr.logits, tgt));
  for (std::size_t i = 0; i < m.clips().size(); ++i) {
    EXPECT_NE(m.clips()[i].grad_hi, 0.0) << i;
    EXPECT_NE(m.clips()[i].grad_lo, 0.0) << i;
  }
}

TEST(ModelQat, DisabledSitesHaveNoQuantizer) {
  auto cfg = small(1, 8, 2, 4);
  cfg.qat.enabled = true;
  cfg.qat.sites = {true, false, true, false};
  Model m(cfg);
  EXPECT_EQ(m.act_policy(0, SiteKind::kQkvInput).mode, ActQuantMode::kLearnedClip);
  EXPECT_EQ(m.act_policy(0, SiteKind::kAttnProjInput).mode, ActQuantMode::kNone);
  EXPECT_FALSE(m.clip_enabled()[1]);
}

TEST(ModelInteger, IntegerPathMatchesFakeQuantPath) {
  for (bool qat : {true, false}) {
    auto cfg = small(2, 16, 2, 8);
    cfg.qat.enabled = qat;
    Model m(cfg);
    randomize(m, 14);
    apply_ptq(m, PTQPlan{4, WeightMethod::kRtn, 4});
    auto t = tokens(16, 9);
    auto fake = logits(m, t, 2, false);
    auto integer = logits(m, t, 2, true);
    EXPECT_LT(oracle::rel_err(oracle::to_double(integer), oracle::to_double(fake)), 1e-4) << "qat " << qat;
  }
}

TEST(ModelSites, NamesAndResidualTags) {
  EXPECT_EQ(site_name(SiteKind::kQkvInput), "QKV_Input");
  EXPECT_EQ(site_name(SiteKind::kAttnProjInput), "AttnProj_Input");
  EXPECT_EQ(site_name(SiteKind::kMlpInput), "MLP_Input");
  EXPECT_EQ(site_name(SiteKind::kMlpProjInput), "MLPProj_Input");
  EXPECT_TRUE(is_residual_stream(SiteKind::kQkvInput));
  EXPECT_TRUE(is_residual_stream(SiteKind::kMlpInput));
  EXPECT_FALSE(is_residual_stream(SiteKind::kAttnProjInput));
  EXPECT_FALSE(is_residual_stream(SiteKind::kMlpProjInput));
  EXPECT_EQ(parse_site("MLP_Input"), SiteKind::kMlpInput);
  EXPECT_FALSE(parse_site("nope").has_value());
  EXPECT_EQ(output_id(1, SiteKind::kMlpProjInput), "layers.1.mlp_proj_out");
}

TEST(ModelKurtosis, OutputsAreCollectedPerLinear) {
  Model m(small(2, 8, 2, 4));
  ForwardOptions o;
  o.collect_outputs = true;
  auto t = tokens(4, 10);
  auto fr = m.forward(t, 1, o);
  ASSERT_EQ(fr.outputs.size(), 8u);
  EXPECT_EQ(fr.outputs[0].site, "layers.0.qkv_out");
  KurtosisConfig k{1e-5, kKurtosisEpsilon, {"layers.1.mlp_fc_out"}};
  auto loss = kurtosis_loss(fr.outputs, k);
  backward(loss);
  EXPECT_GT(loss.value().item(), 0.0f);
  double g = 0.0;
  const Tensor grad = m.layers()[1].w_fc.grad();
  for (float v : grad.data()) g += std::fabs(v);
  EXPECT_GT(g, 0.0);
}
