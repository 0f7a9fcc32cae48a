#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "w4a4/autograd.hpp"
#include "w4a4/fakequant.hpp"
#include "w4a4/kurtosis.hpp"
#include "w4a4/ptq.hpp"

namespace w4a4 {

/// Inputs of the four linear layers of a block.
enum class SiteKind : int { kQkvInput = 0, kAttnProjInput = 1, kMlpInput = 2, kMlpProjInput = 3 };
inline constexpr std::array<SiteKind, 4> kAllSites = {SiteKind::kQkvInput, SiteKind::kAttnProjInput,
                                                      SiteKind::kMlpInput, SiteKind::kMlpProjInput};

/// "QKV_Input", "AttnProj_Input", "MLP_Input", "MLPProj_Input"
std::string_view site_name(SiteKind k);
std::optional<SiteKind> parse_site(std::string_view name);
/// QKV and MLP inputs read (a LayerNorm of) the residual stream.
bool is_residual_stream(SiteKind k);
/// Outputs of the same four linear layers: "qkv_out", "attn_proj_out", "mlp_fc_out", "mlp_proj_out".
std::string_view output_name(SiteKind k);
std::optional<SiteKind> parse_output(std::string_view name);
/// "layers.<l>.qkv" etc.
std::string linear_name(std::size_t layer, SiteKind k);
/// "layers.<l>.<output_name>"
std::string output_id(std::size_t layer, SiteKind k);

struct QatConfig {
  bool enabled = false;
  int bits = 4;
  std::array<bool, 4> sites = {true, true, true, true};
  bool align_zero = true;
  double clip_init = kClipInit;
  double lower_sign = -1.0;
};

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 256;
  std::size_t seq_len = 256;
  QatConfig qat;
  KurtosisConfig kurtosis{0.0, kKurtosisEpsilon, {}};
  /// Regularized output kinds (expanded over layers); empty = all four.
  std::vector<SiteKind> kurtosis_sites;
  /// Multiply attention scores by 1/sqrt(d_head).
  bool attn_scale = true;
  /// Feed the attention output (instead of LN(Z)) into the first MLP matrix.
  bool literal_mlp_input = false;
  double init_std = 0.02;
  std::uint64_t seed = 1;

  std::size_t d_ff() const { return 4 * d_model; }
  std::size_t d_head() const { return d_model / n_heads; }
  /// Throws ConfigError if the shape is inconsistent.
  void validate() const;
};

/// How a site's input is quantized at run time.
enum class ActQuantMode { kNone, kLearnedClip, kPerToken };

struct ActQuantPolicy {
  ActQuantMode mode = ActQuantMode::kNone;
  int bits = 16;
};

struct LayerParams {
  Var ln1_gain, ln1_bias;
  Var w_qkv, b_qkv;
  Var w_proj, b_proj;
  Var ln2_gain, ln2_bias;
  Var w_fc, b_fc;
  Var w_out, b_out;

  Var& weight(SiteKind k);
  Var& bias(SiteKind k);
};

struct NamedParam {
  std::string name;
  Var* var;
  bool decay;  // weight matrices only
};

/// Observer for activations during a forward pass. `site` is either an input
/// site name (QKV_Input, ...) or an output name (qkv_out, ...).
using ActivationTap = std::function<void(std::size_t layer, std::string_view site, const Tensor& value)>;

struct ForwardOptions {
  bool collect_outputs = false;
  const ActivationTap* tap = nullptr;
  /// Run linear layers whose weights and inputs are both quantized through intmm.
  bool integer_matmul = false;
};

struct ForwardResult {
  Var logits;  // [batch*len x vocab]
  std::vector<SiteOutput> outputs;
};

/// Pre-LayerNorm decoder-only transformer over a byte vocabulary.
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam> parameters();
  std::size_t parameter_count();

  /// tokens holds `batch` rows of `len` ids each, len <= seq_len.
  ForwardResult forward(std::span<const std::int32_t> tokens, std::size_t batch, const ForwardOptions& opts = {});

  bool has_clips() const { return !clips_.empty(); }
  /// Learned clips indexed [layer * 4 + site]; only enabled sites are meaningful.
  std::vector<ClipParam>& clips() { return clips_; }
  const std::vector<ClipParam>& clips() const { return clips_; }
  std::vector<bool>& clip_enabled() { return clip_enabled_; }
  const std::vector<bool>& clip_enabled() const { return clip_enabled_; }
  ClipParam* clip(std::size_t layer, SiteKind k);

  ActQuantPolicy& act_policy(std::size_t layer, SiteKind k) { return act_policy_[layer * 4 + static_cast<int>(k)]; }
  const ActQuantPolicy& act_policy(std::size_t layer, SiteKind k) const {
    return act_policy_[layer * 4 + static_cast<int>(k)];
  }

  std::vector<LayerParams>& layers() { return layers_; }
  Var& token_embedding() { return tok_emb_; }
  Var& position_embedding() { return pos_emb_; }
  Var& head_weight() { return w_head_; }
  Var& head_bias() { return b_head_; }

  const std::optional<PTQPlan>& ptq_plan() const { return ptq_plan_; }
  void set_ptq_plan(std::optional<PTQPlan> p) { ptq_plan_ = std::move(p); }
  /// Quantized weights by linear name, populated by apply_ptq.
  std::vector<std::pair<std::string, QuantizedLayer>>& quantized_layers() { return quantized_; }
  const std::vector<std::pair<std::string, QuantizedLayer>>& quantized_layers() const { return quantized_; }
  const QuantizedLayer* quantized_layer(std::string_view name) const;

  void zero_grad();

 private:
  Var quantize_site(std::size_t layer, SiteKind k, const Var& x, std::optional<QuantizedTensor>* codes, bool want_codes);
  Var run_linear(std::size_t layer, SiteKind k, const Var& x, const ForwardOptions& opts);

  ModelConfig cfg_;
  Var tok_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Var lnf_gain_, lnf_bias_;
  Var w_head_, b_head_;
  std::vector<ClipParam> clips_;
  std::vector<bool> clip_enabled_;
  std::vector<ActQuantPolicy> act_policy_;
  std::optional<PTQPlan> ptq_plan_;
  std::vector<std::pair<std::string, QuantizedLayer>> quantized_;
};

namespace ops {

/// Per-token (row) min-max fake quantization with integral zero points.
/// Gradients pass straight through.
Var per_token_quant(const Var& x, int bits);

}  // namespace ops

/// Row-quantized codes for the same per-token min-max quantizer.
QuantizedTensor per_token_codes(const Tensor& x, int bits);
/// Per-tensor codes for a learned clip pair.
QuantizedTensor clip_codes(const Tensor& x, const ClipParam& p);

}  // namespace w4a4
