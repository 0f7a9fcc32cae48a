#include "w4a4/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "w4a4/errors.hpp"

namespace w4a4 {

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::kTensor: return "tensor";
    case Granularity::kRow: return "row";
    case Granularity::kColumn: return "column";
  }
  return "?";
}

namespace scalar {

double round_half_even(double x) {
  // nearbyint honours the default FE_TONEAREST mode, which is ties-to-even.
  return std::nearbyint(x);
}

double scale(int bits, double clip_lo, double clip_hi) {
  return (std::ldexp(1.0, bits) - 1.0) / (clip_hi - clip_lo);
}

std::int32_t zero_point(double s, double clip_lo, bool align_zero, ZeroPointConvention conv) {
  if (!align_zero) return 0;
  const double r = round_half_even(s * clip_lo);
  return static_cast<std::int32_t>(conv == ZeroPointConvention::kNegated ? -r : r);
}

std::int32_t quantize(double a, double s, std::int32_t z, double clip_lo, double clip_hi, std::int32_t max_code) {
  const double c = std::clamp(a, clip_lo, clip_hi);
  const double q = round_half_even(s * c + static_cast<double>(z));
  return static_cast<std::int32_t>(std::clamp(q, 0.0, static_cast<double>(max_code)));
}

double dequantize(std::int32_t code, double s, std::int32_t z) {
  return static_cast<double>(code - z) / s;
}

}  // namespace scalar

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8) throw SpecError("quant spec: bits must be in [2, 8], got " + std::to_string(bits));
  if (!std::isfinite(clip_lo) || !std::isfinite(clip_hi)) throw SpecError("quant spec: clip values must be finite");
  if (!(clip_lo < clip_hi)) {
    throw SpecError("quant spec: clip_lo (" + std::to_string(clip_lo) + ") must be < clip_hi (" +
                    std::to_string(clip_hi) + ")");
  }
  const double s = scale();
  if (!std::isfinite(s) || s <= 0.0) throw SpecError("quant spec: scale is not finite and positive");
  if (align_zero && std::fabs(s * clip_lo) > 1e9) throw SpecError("quant spec: zero point does not fit in 32 bits");
}

double QuantSpec::scale() const { return scalar::scale(bits, clip_lo, clip_hi); }

std::int32_t QuantSpec::zero_point() const {
  return scalar::zero_point(scale(), clip_lo, align_zero, zero_point_convention);
}

std::size_t slice_count(const Shape& shape, Granularity g) {
  switch (g) {
    case Granularity::kTensor: return 1;
    case Granularity::kRow: return shape.size() == 2 ? shape[0] : 1;
    case Granularity::kColumn: return shape.empty() ? 1 : shape.back();
  }
  return 1;
}

std::size_t QuantizedTensor::slice_index(std::size_t r, std::size_t c) const {
  switch (granularity) {
    case Granularity::kTensor: return 0;
    case Granularity::kRow: return r;
    case Granularity::kColumn: return c;
  }
  return 0;
}

void QuantizedTensor::validate() const {
  if (codes.size() != numel_of(shape)) throw ContractError("quantized tensor: code count does not match shape");
  const std::size_t n = slice_count(shape, granularity);
  if (scales.size() != n || zero_points.size() != n) {
    throw ContractError("quantized tensor: expected " + std::to_string(n) + " scales/zero points for " +
                        std::string(to_string(granularity)) + " granularity");
  }
  const int max_code = (1 << bits) - 1;
  for (auto c : codes) {
    if (c > max_code) throw ContractError("quantized tensor: code out of range");
  }
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ContractError("quantized tensor: scales must be finite and positive");
  }
}

namespace {

void check_rank(const Tensor& a) {
  if (a.rank() != 1 && a.rank() != 2) {
    throw DimensionError("quantize: expected rank 1 or 2, got " + shape_str(a.shape()));
  }
}

}  // namespace

QuantizedTensor quantize(const Tensor& a, const QuantSpec& spec) {
  if (spec.granularity != Granularity::kTensor) {
    throw SpecError("quantize: a single spec requires tensor granularity; pass one spec per slice");
  }
  return quantize(a, std::span<const QuantSpec>(&spec, 1));
}

QuantizedTensor quantize(const Tensor& a, std::span<const QuantSpec> specs) {
  check_rank(a);
  if (specs.empty()) throw SpecError("quantize: no specs");
  const QuantSpec& first = specs.front();
  const std::size_t n = slice_count(a.shape(), first.granularity);
  if (specs.size() != n) {
    throw SpecError("quantize: " + std::to_string(specs.size()) + " specs for " + std::to_string(n) + " slices");
  }
  QuantizedTensor q;
  q.shape = a.shape();
  q.bits = first.bits;
  q.granularity = first.granularity;
  q.scales.reserve(n);
  q.zero_points.reserve(n);
  std::vector<double> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = specs[i];
    s.validate();
    if (s.bits != first.bits || s.granularity != first.granularity || s.align_zero != first.align_zero) {
      throw SpecError("quantize: per-slice specs must share bits, granularity and alignment");
    }
    q.scales.push_back(s.scale());
    q.zero_points.push_back(s.zero_point());
    lo[i] = s.clip_lo;
    hi[i] = s.clip_hi;
  }
  const std::size_t rows = q.rows(), cols = q.cols();
  const std::int32_t max_code = first.max_code();
  q.codes.resize(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float v = a[r * cols + c];
      if (!std::isfinite(v)) throw InputError("quantize: non-finite input value");
      const std::size_t k = q.slice_index(r, c);
      q.codes[r * cols + c] =
          static_cast<std::uint8_t>(scalar::quantize(v, q.scales[k], q.zero_points[k], lo[k], hi[k], max_code));
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  q.validate();
  Tensor out(q.shape);
  const std::size_t rows = q.rows(), cols = q.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t k = q.slice_index(r, c);
      out[r * cols + c] = static_cast<float>(scalar::dequantize(q.codes[r * cols + c], q.scales[k], q.zero_points[k]));
    }
  }
  return out;
}

std::vector<QuantSpec> minmax_calibrate(const Tensor& a, int bits, Granularity g, bool align_zero) {
  check_rank(a);
  if (a.numel() == 0) throw InputError("minmax_calibrate: empty tensor");
  const std::size_t n = slice_count(a.shape(), g);
  const std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t cols = a.shape().back();
  std::vector<double> lo(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = a[r * cols + c];
      if (!std::isfinite(v)) continue;
      const std::size_t k = g == Granularity::kTensor ? 0 : (g == Granularity::kRow ? r : c);
      lo[k] = std::min(lo[k], v);
      hi[k] = std::max(hi[k], v);
    }
  }
  std::vector<QuantSpec> specs(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::isfinite(lo[k])) throw InputError("minmax_calibrate: slice " + std::to_string(k) + " has no finite value");
    if (lo[k] == hi[k]) {
      const double delta = kDegenerateWiden * std::max(1.0, std::fabs(lo[k]));
      lo[k] -= delta;
      hi[k] += delta;
    }
    specs[k] = QuantSpec{bits, lo[k], hi[k], align_zero, g};
    specs[k].validate();
  }
  return specs;
}

}  // namespace w4a4
