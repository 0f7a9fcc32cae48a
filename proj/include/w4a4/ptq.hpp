#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "w4a4/intgemm.hpp"
#include "w4a4/quant.hpp"
#include "w4a4/tensor.hpp"

namespace w4a4 {

class Model;

enum class WeightMethod { kNone, kRtn, kGptq };

std::string_view to_string(WeightMethod m);
/// "none" | "rtn" | "gptq"; throws ConfigError otherwise.
WeightMethod parse_weight_method(std::string_view s);

inline constexpr double kGptqDamping = 0.01;
inline constexpr std::size_t kCalibTokens = 4096;

/// One cell of the evaluation grid: weight precision/quantizer and activation bits.
struct PTQPlan {
  int weight_bits = 16;
  WeightMethod weight_method = WeightMethod::kNone;
  int act_bits = 16;
  std::size_t calib_tokens = kCalibTokens;
  double damping = kGptqDamping;

  /// Throws ConfigError for combinations outside {3,4,16} x {none,rtn,gptq} x {4,16}
  /// or where none <=> 16 does not hold.
  void validate() const;
  /// e.g. "W4A4-gptq"
  std::string label() const;
  friend bool operator==(const PTQPlan&, const PTQPlan&) = default;
};

/// Weights quantized per output channel (column of a [d_in x d_out] matrix).
struct QuantizedLayer {
  Shape shape;  // {d_in, d_out}
  WeightMethod method = WeightMethod::kRtn;
  PackedIntMatrix packed;
  std::vector<double> scales;
  std::vector<std::int32_t> zero_points;

  QuantizedTensor codes() const;
  Tensor dequantize() const;
};

/// Data-free round-to-nearest with per-column min-max grids.
QuantizedLayer rtn_quantize_weights(const Tensor& w, int bits);

/// Calibrated quantization: H = 2 X^T X + damping * mean(diag H) * I, then
/// input channels (rows of w) are quantized in order and each row's error is
/// pushed onto the remaining rows through the upper Cholesky factor of H^-1.
/// Grids are the per-column min-max grids of the original w.
/// Throws NumericalError if H is not positive definite after damping.
QuantizedLayer gptq_quantize_weights(const Tensor& w, int bits, const Tensor& calib_inputs,
                                     double damping = kGptqDamping);

/// ||X (W - W_hat)||_F
double proxy_loss(const Tensor& calib_inputs, const Tensor& w, const Tensor& w_hat);

/// Sets every site's activation quantizer for `act_bits` (4 or 16) as
/// apply_ptq does, without touching weights.
void configure_activation_path(Model& model, int act_bits);

/// Converts every transformer linear layer per `plan`, and sets the
/// activation path: frozen learned clips at sites that have them, per-token
/// min-max otherwise (act_bits == 4), or no activation quantization
/// (act_bits == 16). `calib_tokens` supplies GPTQ calibration text.
/// Re-applying the plan a model already carries is a no-op; a different plan
/// on a converted model is a ConfigError.
void apply_ptq(Model& model, const PTQPlan& plan, std::span<const std::int32_t> calib_tokens = {});

}  // namespace w4a4
