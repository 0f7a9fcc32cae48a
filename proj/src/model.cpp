#include "w4a4/model.hpp"

#include <cmath>
#include <random>

#include "w4a4/errors.hpp"
#include "w4a4/intgemm.hpp"

namespace w4a4 {

namespace {
constexpr std::array<std::string_view, 4> kSiteNames = {"QKV_Input", "AttnProj_Input", "MLP_Input", "MLPProj_Input"};
constexpr std::array<std::string_view, 4> kOutputNames = {"qkv_out", "attn_proj_out", "mlp_fc_out", "mlp_proj_out"};
constexpr std::array<std::string_view, 4> kLinearNames = {"qkv", "attn_proj", "mlp_fc", "mlp_proj"};
}  // namespace

std::string_view site_name(SiteKind k) { return kSiteNames[static_cast<int>(k)]; }
std::string_view output_name(SiteKind k) { return kOutputNames[static_cast<int>(k)]; }

std::optional<SiteKind> parse_site(std::string_view name) {
  for (int i = 0; i < 4; ++i)
    if (kSiteNames[i] == name) return static_cast<SiteKind>(i);
  return std::nullopt;
}

std::optional<SiteKind> parse_output(std::string_view name) {
  for (int i = 0; i < 4; ++i)
    if (kOutputNames[i] == name) return static_cast<SiteKind>(i);
  return std::nullopt;
}

bool is_residual_stream(SiteKind k) { return k == SiteKind::kQkvInput || k == SiteKind::kMlpInput; }

std::string linear_name(std::size_t layer, SiteKind k) {
  return "layers." + std::to_string(layer) + "." + std::string(kLinearNames[static_cast<int>(k)]);
}

std::string output_id(std::size_t layer, SiteKind k) {
  return "layers." + std::to_string(layer) + "." + std::string(output_name(k));
}

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("model.n_layers must be >= 1");
  if (d_model == 0 || n_heads == 0) throw ConfigError("model.d_model and model.n_heads must be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
  if (vocab_size == 0) throw ConfigError("model.vocab_size must be >= 1");
  if (seq_len == 0) throw ConfigError("model.seq_len must be >= 1");
  if (qat.enabled && (qat.bits < 2 || qat.bits > 16)) throw ConfigError("qat.bits must be in [2, 16]");
  if (qat.clip_init <= 0.0) throw ConfigError("qat.clip_init must be > 0");
  if (qat.lower_sign != 1.0 && qat.lower_sign != -1.0) throw ConfigError("qat.lower_sign must be -1 or +1");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be > 0");
  kurtosis.validate();
}

Var& LayerParams::weight(SiteKind k) {
  switch (k) {
    case SiteKind::kQkvInput: return w_qkv;
    case SiteKind::kAttnProjInput: return w_proj;
    case SiteKind::kMlpInput: return w_fc;
    case SiteKind::kMlpProjInput: return w_out;
  }
  return w_qkv;
}

Var& LayerParams::bias(SiteKind k) {
  switch (k) {
    case SiteKind::kQkvInput: return b_qkv;
    case SiteKind::kAttnProjInput: return b_proj;
    case SiteKind::kMlpInput: return b_fc;
    case SiteKind::kMlpProjInput: return b_out;
  }
  return b_qkv;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.d_model, f = cfg_.d_ff();
  const double std0 = cfg_.init_std;
  const double std_resid = std0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  tok_emb_ = parameter(normal_tensor({cfg_.vocab_size, d}, std0, rng));
  pos_emb_ = parameter(normal_tensor({cfg_.seq_len, d}, std0, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    LayerParams p;
    p.ln1_gain = parameter(Tensor({d}, 1.0f));
    p.ln1_bias = parameter(Tensor({d}));
    p.w_qkv = parameter(normal_tensor({d, 3 * d}, std0, rng));
    p.b_qkv = parameter(Tensor({3 * d}));
    p.w_proj = parameter(normal_tensor({d, d}, std_resid, rng));
    p.b_proj = parameter(Tensor({d}));
    p.ln2_gain = parameter(Tensor({d}, 1.0f));
    p.ln2_bias = parameter(Tensor({d}));
    p.w_fc = parameter(normal_tensor({d, f}, std0, rng));
    p.b_fc = parameter(Tensor({f}));
    p.w_out = parameter(normal_tensor({f, d}, std_resid, rng));
    p.b_out = parameter(Tensor({d}));
    layers_.push_back(std::move(p));
  }
  lnf_gain_ = parameter(Tensor({d}, 1.0f));
  lnf_bias_ = parameter(Tensor({d}));
  w_head_ = parameter(normal_tensor({d, cfg_.vocab_size}, std0, rng));
  b_head_ = parameter(Tensor({cfg_.vocab_size}));

  act_policy_.assign(cfg_.n_layers * 4, ActQuantPolicy{});
  if (cfg_.qat.enabled) {
    clips_.reserve(cfg_.n_layers * 4);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      for (SiteKind k : kAllSites) {
        ClipParam c = ClipParam::initial(cfg_.qat.bits, false, cfg_.qat.clip_init);
        c.align_zero = cfg_.qat.align_zero;
        c.lower_sign = cfg_.qat.lower_sign;
        clips_.push_back(c);
        const bool on = cfg_.qat.sites[static_cast<int>(k)];
        clip_enabled_.push_back(on);
        if (on) act_policy(l, k) = ActQuantPolicy{ActQuantMode::kLearnedClip, cfg_.qat.bits};
      }
    }
  }
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  out.push_back({"tok_emb", &tok_emb_, false});
  out.push_back({"pos_emb", &pos_emb_, false});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& p = layers_[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "ln1.gain", &p.ln1_gain, false});
    out.push_back({pre + "ln1.bias", &p.ln1_bias, false});
    out.push_back({pre + "qkv.weight", &p.w_qkv, true});
    out.push_back({pre + "qkv.bias", &p.b_qkv, false});
    out.push_back({pre + "attn_proj.weight", &p.w_proj, true});
    out.push_back({pre + "attn_proj.bias", &p.b_proj, false});
    out.push_back({pre + "ln2.gain", &p.ln2_gain, false});
    out.push_back({pre + "ln2.bias", &p.ln2_bias, false});
    out.push_back({pre + "mlp_fc.weight", &p.w_fc, true});
    out.push_back({pre + "mlp_fc.bias", &p.b_fc, false});
    out.push_back({pre + "mlp_proj.weight", &p.w_out, true});
    out.push_back({pre + "mlp_proj.bias", &p.b_out, false});
  }
  out.push_back({"ln_f.gain", &lnf_gain_, false});
  out.push_back({"ln_f.bias", &lnf_bias_, false});
  out.push_back({"head.weight", &w_head_, true});
  out.push_back({"head.bias", &b_head_, false});
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.var->value().numel();
  return n;
}

ClipParam* Model::clip(std::size_t layer, SiteKind k) {
  if (clips_.empty()) return nullptr;
  const std::size_t i = layer * 4 + static_cast<std::size_t>(k);
  return clip_enabled_[i] ? &clips_[i] : nullptr;
}

const QuantizedLayer* Model::quantized_layer(std::string_view name) const {
  for (const auto& [n, q] : quantized_)
    if (n == name) return &q;
  return nullptr;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.var->zero_grad();
  for (auto& c : clips_) c.zero_grad();
}

QuantizedTensor per_token_codes(const Tensor& x, int bits) {
  return quantize(x, minmax_calibrate(x, bits, Granularity::kRow));
}

QuantizedTensor clip_codes(const Tensor& x, const ClipParam& p) {
  QuantSpec spec{p.bits, p.clip_lo, p.clip_hi, p.align_zero, Granularity::kTensor};
  return quantize(x, spec);
}

namespace ops {

Var per_token_quant(const Var& x, int bits) {
  Tensor out = dequantize(per_token_codes(x.value(), bits));
  return make_op(std::move(out), {x}, [](TapeNode& self) { accumulate_grad(*self.inputs[0], self.grad); });
}

}  // namespace ops

Var Model::quantize_site(std::size_t layer, SiteKind k, const Var& x, std::optional<QuantizedTensor>* codes,
                         bool want_codes) {
  const ActQuantPolicy& pol = act_policy(layer, k);
  switch (pol.mode) {
    case ActQuantMode::kNone: return x;
    case ActQuantMode::kLearnedClip: {
      ClipParam& c = clips_.at(layer * 4 + static_cast<std::size_t>(k));
      if (want_codes && c.bits <= 8 && c.align_zero) {
        *codes = clip_codes(x.value(), c);
        return x;
      }
      return ops::fake_quant(x, c);
    }
    case ActQuantMode::kPerToken: {
      if (want_codes && pol.bits <= 8) {
        *codes = per_token_codes(x.value(), pol.bits);
        return x;
      }
      return ops::per_token_quant(x, pol.bits);
    }
  }
  return x;
}

Var Model::run_linear(std::size_t layer, SiteKind k, const Var& x, const ForwardOptions& opts) {
  if (opts.tap) (*opts.tap)(layer, site_name(k), x.value());
  LayerParams& p = layers_[layer];
  const QuantizedLayer* ql = nullptr;
  if (opts.integer_matmul && !grad_enabled()) ql = quantized_layer(linear_name(layer, k));
  std::optional<QuantizedTensor> act_codes;
  Var xq = quantize_site(layer, k, x, &act_codes, ql != nullptr);
  if (ql && act_codes) {
    Tensor out = intmm(*act_codes, ql->codes());
    auto bias = p.bias(k).value().data();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
    }
    return constant(std::move(out));
  }
  return ops::linear(xq, p.weight(k), p.bias(k));
}

ForwardResult Model::forward(std::span<const std::int32_t> tokens, std::size_t batch, const ForwardOptions& opts) {
  if (batch == 0 || tokens.size() % batch != 0) throw DimensionError("forward: token count not divisible by batch");
  const std::size_t len = tokens.size() / batch;
  if (len == 0 || len > cfg_.seq_len) {
    throw DimensionError("forward: sequence length " + std::to_string(len) + " outside [1, " +
                         std::to_string(cfg_.seq_len) + "]");
  }
  std::vector<std::int32_t> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<std::int32_t>(i % len);

  ForwardResult result;
  auto record = [&](std::size_t l, SiteKind k, const Var& v) {
    if (opts.tap) (*opts.tap)(l, output_name(k), v.value());
    if (opts.collect_outputs) result.outputs.push_back({output_id(l, k), v});
  };

  const double score_scale = cfg_.attn_scale ? 1.0 / std::sqrt(static_cast<double>(cfg_.d_head())) : 1.0;
  Var x = ops::add(ops::embedding(tok_emb_, tokens), ops::embedding(pos_emb_, positions));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    LayerParams& p = layers_[l];
    Var y1 = ops::layernorm(x, p.ln1_gain, p.ln1_bias);
    Var qkv = run_linear(l, SiteKind::kQkvInput, y1, opts);
    record(l, SiteKind::kQkvInput, qkv);
    Var y2 = ops::causal_attention(qkv, len, cfg_.n_heads, score_scale);
    Var attn = run_linear(l, SiteKind::kAttnProjInput, y2, opts);
    record(l, SiteKind::kAttnProjInput, attn);
    Var z = ops::add(x, attn);
    Var y3 = cfg_.literal_mlp_input ? y2 : ops::layernorm(z, p.ln2_gain, p.ln2_bias);
    Var h = run_linear(l, SiteKind::kMlpInput, y3, opts);
    record(l, SiteKind::kMlpInput, h);
    Var y4 = ops::gelu(h);
    Var mlp = run_linear(l, SiteKind::kMlpProjInput, y4, opts);
    record(l, SiteKind::kMlpProjInput, mlp);
    x = ops::add(z, mlp);
  }
  Var xf = ops::layernorm(x, lnf_gain_, lnf_bias_);
  result.logits = ops::linear(xf, w_head_, b_head_);
  return result;
}

}  // namespace w4a4
