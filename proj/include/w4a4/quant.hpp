#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "w4a4/tensor.hpp"

namespace w4a4 {

enum class Granularity { kTensor, kRow, kColumn };

std::string_view to_string(Granularity g);

/// Sign convention for the zero point.
///  kNegated:      z = -round(s * c_lo); codes land in [0, 2^b - 1]. Default.
///  kUnnegated: z =  round(s * c_lo); kept for A/B comparison only.
enum class ZeroPointConvention { kNegated, kUnnegated };

/// Uniform quantizer over the clip interval [clip_lo, clip_hi].
struct QuantSpec {
  int bits = 4;
  double clip_lo = -4.0;
  double clip_hi = 4.0;
  bool align_zero = true;
  Granularity granularity = Granularity::kTensor;
  ZeroPointConvention zero_point_convention = ZeroPointConvention::kNegated;

  /// Throws SpecError unless 2 <= bits <= 8, both clips finite, clip_lo < clip_hi.
  void validate() const;
  /// s = (2^b - 1) / (clip_hi - clip_lo)
  double scale() const;
  std::int32_t zero_point() const;
  std::int32_t max_code() const { return (1 << bits) - 1; }
};

/// Integer codes with per-slice scale and zero point. Codes are stored one
/// per byte; packing lives in intgemm.
struct QuantizedTensor {
  Shape shape;
  int bits = 4;
  Granularity granularity = Granularity::kTensor;
  std::vector<std::uint8_t> codes;
  std::vector<double> scales;
  std::vector<std::int32_t> zero_points;

  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  /// Index into scales/zero_points for element (r, c).
  std::size_t slice_index(std::size_t r, std::size_t c) const;
  /// Throws ContractError if codes/scales/zero points are inconsistent.
  void validate() const;
};

/// Scalar primitives shared by every quantizing path (quant-core, fake-quant,
/// per-token activation quantization). Rounding is half-to-even.
namespace scalar {

double round_half_even(double x);
double scale(int bits, double clip_lo, double clip_hi);
std::int32_t zero_point(double scale, double clip_lo, bool align_zero,
                        ZeroPointConvention conv = ZeroPointConvention::kNegated);
/// clamp_int(round(s * clamp(a, lo, hi) + z), 0, max_code)
std::int32_t quantize(double a, double s, std::int32_t z, double clip_lo, double clip_hi, std::int32_t max_code);
/// (code - z) / s
double dequantize(std::int32_t code, double s, std::int32_t z);

}  // namespace scalar

/// Number of slices a tensor of this shape has under `g`.
std::size_t slice_count(const Shape& shape, Granularity g);

QuantizedTensor quantize(const Tensor& a, const QuantSpec& spec);
/// One spec per slice; all specs must share bits, alignment and granularity.
QuantizedTensor quantize(const Tensor& a, std::span<const QuantSpec> specs);
Tensor dequantize(const QuantizedTensor& q);

inline constexpr double kDegenerateWiden = 1e-6;

/// Min-max clip values per slice. Constant slices are widened to
/// (v - delta, v + delta), delta = 1e-6 * max(1, |v|).
std::vector<QuantSpec> minmax_calibrate(const Tensor& a, int bits, Granularity g, bool align_zero = true);

}  // namespace w4a4
