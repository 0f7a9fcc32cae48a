#pragma once

#include <cstdint>

#include "w4a4/autograd.hpp"
#include "w4a4/quant.hpp"

namespace w4a4 {

inline constexpr double kClipMinGap = 1e-3;
inline constexpr double kClipInit = 4.0;

/// Learnable clip pair for one activation site, with its accumulated gradients.
struct ClipParam {
  double clip_lo = -kClipInit;
  double clip_hi = kClipInit;
  int bits = 4;
  bool align_zero = true;
  /// Input known to be nonnegative: clip_lo is frozen at 0.
  bool bounded_input = false;
  /// Sign applied to the in-range rounding-error term of the lower-clip
  /// gradient. -1 reproduces the published backward pass; +1 is the
  /// LSQ-style re-derivation.
  double lower_sign = -1.0;
  double grad_lo = 0.0;
  double grad_hi = 0.0;

  /// [-4, 4] by default, [0, 4] for bounded inputs.
  static ClipParam initial(int bits, bool bounded_input, double init = kClipInit);

  /// Throws ParameterError unless 2 <= bits <= 16 and clip_lo < clip_hi.
  void validate() const;
  double scale() const { return scalar::scale(bits, clip_lo, clip_hi); }
  std::int32_t zero_point() const { return scalar::zero_point(scale(), clip_lo, align_zero); }
  std::int32_t max_code() const { return static_cast<std::int32_t>((1u << bits) - 1u); }
  void zero_grad() { grad_lo = grad_hi = 0.0; }
};

enum class ClipRegion : std::uint8_t { kBelow, kInside, kAbove };

inline ClipRegion classify(double a, const ClipParam& p) {
  if (a < p.clip_lo) return ClipRegion::kBelow;
  if (a > p.clip_hi) return ClipRegion::kAbove;
  return ClipRegion::kInside;
}

struct RegionCounts {
  std::size_t below = 0;
  std::size_t inside = 0;
  std::size_t above = 0;
};

RegionCounts count_regions(const Tensor& a, const ClipParam& p);

/// Quantize-then-dequantize with the site's clip pair (per-tensor).
Tensor fakequant_forward(const Tensor& a, const ClipParam& p);

struct FakeQuantGrads {
  Tensor grad_a;
  double grad_hi = 0.0;
  double grad_lo = 0.0;
};

/// Straight-through backward. With Q = s (A - c_lo) and
/// E = (Q - round(Q)) / (2^b - 1):
///   grad_a  = grad_out inside [c_lo, c_hi], 0 outside
///   C_hi    = grad_out above c_hi, -E * grad_out inside, 0 below
///   C_lo    = grad_out below c_lo, lower_sign * E * grad_out inside, 0 above
/// and grad_hi / grad_lo are the sums of C_hi / C_lo accumulated in double,
/// in row-major element order.
FakeQuantGrads fakequant_backward(const Tensor& a, const ClipParam& p, const Tensor& grad_out);

/// Plain SGD on the clip pair (no momentum, no weight decay), then projection
/// so that clip_hi - clip_lo >= kClipMinGap. Zeroes the gradients.
void clip_optimizer_step(ClipParam& p, double lr);

namespace ops {

/// Fake-quantization node. The backward pass accumulates into `clip.grad_*`,
/// so `clip` must outlive the recorded graph. A null pointer-equivalent is not
/// accepted.
Var fake_quant(const Var& x, ClipParam& clip);

}  // namespace ops
}  // namespace w4a4
