#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle/reference.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/model.hpp"
#include "w4a4/ptq.hpp"

using namespace w4a4;

namespace {

ModelConfig tiny_config(bool qat) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.seq_len = 8;
  c.qat.enabled = qat;
  c.init_std = 0.2;
  return c;
}

std::vector<std::int32_t> tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = static_cast<std::int32_t>(rng() % 256);
  return t;
}

Tensor logits(Model& m, std::span<const std::int32_t> t, std::size_t batch) {
  NoGradGuard g;
  return m.forward(t, batch).logits.value();
}

}  // namespace

TEST(PtqPlan, ValidationAndLabel) {
  PTQPlan p{4, WeightMethod::kGptq, 4};
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(p.label(), "W4A4-gptq");
  EXPECT_THROW((PTQPlan{16, WeightMethod::kRtn, 16}.validate()), ConfigError);
  EXPECT_THROW((PTQPlan{4, WeightMethod::kNone, 16}.validate()), ConfigError);
  EXPECT_THROW((PTQPlan{8, WeightMethod::kRtn, 16}.validate()), ConfigError);
  EXPECT_THROW((PTQPlan{4, WeightMethod::kRtn, 8}.validate()), ConfigError);
  PTQPlan no_calib{4, WeightMethod::kGptq, 16};
  no_calib.calib_tokens = 0;
  EXPECT_THROW(no_calib.validate(), ConfigError);
  EXPECT_THROW(parse_weight_method("awq"), ConfigError);
}

TEST(Rtn, GridWeightsAreFixedPoint) {
  std::mt19937_64 rng(1);
  auto w = oracle::random_tensor({6, 5}, rng);
  auto once = rtn_quantize_weights(w, 4).dequantize();
  auto twice = rtn_quantize_weights(once, 4).dequantize();
  for (std::size_t i = 0; i < once.numel(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-6);
}

TEST(Rtn, ColumnExtremesMapToEndCodes) {
  auto q = rtn_quantize_weights(Tensor::matrix({{-1}, {1}}), 4);
  auto codes = q.codes();
  EXPECT_EQ(codes.codes[0], 0);
  EXPECT_EQ(codes.codes[1], 15);
  EXPECT_DOUBLE_EQ(q.scales[0], 7.5);
}

TEST(Rtn, ErrorWithinHalfStepPerColumn) {
  std::mt19937_64 rng(2);
  for (int bits : {3, 4}) {
    auto w = oracle::random_tensor({16, 16}, rng);
    auto wq = rtn_quantize_weights(w, bits).dequantize();
    for (std::size_t c = 0; c < 16; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t r = 0; r < 16; ++r) lo = std::min<double>(lo, w.at(r, c)), hi = std::max<double>(hi, w.at(r, c));
      const double half = 0.5 * (hi - lo) / ((1 << bits) - 1);
      for (std::size_t r = 0; r < 16; ++r) EXPECT_LE(std::fabs(wq.at(r, c) - w.at(r, c)), half + 1e-6);
    }
  }
}

TEST(Gptq, OrthonormalCalibrationEqualsRtn) {
  std::mt19937_64 rng(3);
  auto w = oracle::random_tensor({8, 8}, rng);
  Tensor x({8, 8});
  for (std::size_t i = 0; i < 8; ++i) x.at(i, i) = 1.0f;
  auto g = gptq_quantize_weights(w, 4, x);
  auto r = rtn_quantize_weights(w, 4);
  EXPECT_EQ(g.codes().codes, r.codes().codes);
  EXPECT_EQ(g.scales, r.scales);
  EXPECT_EQ(g.zero_points, r.zero_points);
}

TEST(Gptq, NotWorseThanRtnPerLayer) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = oracle::random_tensor({32, 32}, rng);
    auto x = oracle::random_tensor({256, 32}, rng);
    const double lg = proxy_loss(x, w, gptq_quantize_weights(w, 4, x).dequantize());
    const double lr = proxy_loss(x, w, rtn_quantize_weights(w, 4).dequantize());
    EXPECT_LE(lg, lr + 1e-6) << "trial " << trial;
  }
}

// Greedy error feedback on a fixed grid loses to RTN on roughly one 8x8 layer
// in ten, so small layers are only checked on aggregate.
TEST(Gptq, BetterThanRtnOnAggregateFor8x8) {
  std::mt19937_64 rng(5);
  double total_g = 0.0, total_r = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto w = oracle::random_tensor({8, 8}, rng);
    auto x = oracle::random_tensor({64, 8}, rng);
    total_g += proxy_loss(x, w, gptq_quantize_weights(w, 4, x).dequantize());
    total_r += proxy_loss(x, w, rtn_quantize_weights(w, 4).dequantize());
  }
  EXPECT_LT(total_g, total_r);
}

TEST(Gptq, RankDeficientCalibrationSucceedsWithDamping) {
  std::mt19937_64 rng(5);
  auto w = oracle::random_tensor({8, 4}, rng);
  auto base = oracle::random_tensor({2, 8}, rng);
  Tensor x({16, 8});
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 8; ++c) x.at(r, c) = base.at(r % 2, c);
  QuantizedLayer q;
  ASSERT_NO_THROW(q = gptq_quantize_weights(w, 4, x, 0.01));
  const Tensor wq = q.dequantize();
  for (float v : wq.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Gptq, ZeroCalibrationChannelIsHandled) {
  std::mt19937_64 rng(6);
  auto w = oracle::random_tensor({4, 3}, rng);
  auto x = oracle::random_tensor({32, 4}, rng);
  for (std::size_t r = 0; r < 32; ++r) x.at(r, 2) = 0.0f;
  EXPECT_NO_THROW(gptq_quantize_weights(w, 3, x));
}

TEST(Gptq, ErrorsOnBadArguments) {
  EXPECT_THROW(gptq_quantize_weights(Tensor({4, 2}), 4, Tensor({8, 3})), DimensionError);
  EXPECT_THROW(gptq_quantize_weights(Tensor({4, 2}), 4, Tensor({8, 4}), 0.0), ParameterError);
}

TEST(QuantizedLayer, DequantizedWeightsRoundTrip) {
  std::mt19937_64 rng(7);
  auto w = oracle::random_tensor({12, 6}, rng);
  auto x = oracle::random_tensor({48, 12}, rng);
  for (const auto& q : {rtn_quantize_weights(w, 3), gptq_quantize_weights(w, 4, x)}) {
    auto wq = q.dequantize();
    EXPECT_EQ(wq.shape(), w.shape());
    auto codes = q.codes();
    std::vector<QuantSpec> specs;
    for (std::size_t c = 0; c < 6; ++c) {
      QuantSpec s;
      s.bits = codes.bits;
      s.granularity = Granularity::kColumn;
      s.clip_lo = (0 - codes.zero_points[c]) / codes.scales[c];
      s.clip_hi = (codes.bits == 3 ? 7 : 15) / codes.scales[c] + s.clip_lo;
      specs.push_back(s);
    }
    EXPECT_EQ(quantize(wq, specs).codes, codes.codes);
  }
}

TEST(ApplyPtq, IdentityPlanLeavesModelUnchanged) {
  Model m(tiny_config(false));
  auto t = tokens(16, 1);
  auto before = logits(m, t, 2);
  apply_ptq(m, PTQPlan{16, WeightMethod::kNone, 16});
  EXPECT_EQ(logits(m, t, 2), before);
}

TEST(ApplyPtq, SamePlanIsIdempotentDifferentPlanRejected) {
  Model m(tiny_config(true));
  auto t = tokens(16, 2);
  PTQPlan plan{4, WeightMethod::kRtn, 4};
  apply_ptq(m, plan);
  auto once = logits(m, t, 2);
  apply_ptq(m, plan);
  EXPECT_EQ(logits(m, t, 2), once);
  EXPECT_THROW(apply_ptq(m, PTQPlan{3, WeightMethod::kRtn, 4}), ConfigError);
}

TEST(ApplyPtq, GptqNeedsCalibration) {
  Model m(tiny_config(false));
  PTQPlan plan{4, WeightMethod::kGptq, 16};
  EXPECT_THROW(apply_ptq(m, plan), ConfigError);
  auto calib = tokens(64, 3);
  plan.calib_tokens = 64;
  EXPECT_NO_THROW(apply_ptq(m, plan, calib));
  EXPECT_EQ(m.quantized_layers().size(), 8u);
}

TEST(ApplyPtq, ActivationPathPolicies) {
  Model qat(tiny_config(true));
  apply_ptq(qat, PTQPlan{4, WeightMethod::kRtn, 4});
  EXPECT_EQ(qat.act_policy(0, SiteKind::kQkvInput).mode, ActQuantMode::kLearnedClip);

  Model base(tiny_config(false));
  apply_ptq(base, PTQPlan{4, WeightMethod::kRtn, 4});
  EXPECT_EQ(base.act_policy(1, SiteKind::kMlpProjInput).mode, ActQuantMode::kPerToken);

  Model qat16(tiny_config(true));
  apply_ptq(qat16, PTQPlan{16, WeightMethod::kNone, 16});
  EXPECT_EQ(qat16.act_policy(0, SiteKind::kQkvInput).mode, ActQuantMode::kNone);
}

TEST(ApplyPtq, WeightsLandOnTheirGrid) {
  Model m(tiny_config(false));
  apply_ptq(m, PTQPlan{3, WeightMethod::kRtn, 16});
  const auto* q = m.quantized_layer(linear_name(1, SiteKind::kMlpInput));
  ASSERT_NE(q, nullptr);
  EXPECT_EQ(m.layers()[1].w_fc.value(), q->dequantize());
}
