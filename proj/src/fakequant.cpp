#include "w4a4/fakequant.hpp"

#include <cmath>
#include <vector>

#include "w4a4/errors.hpp"

namespace w4a4 {

ClipParam ClipParam::initial(int bits, bool bounded_input, double init) {
  ClipParam p;
  p.bits = bits;
  p.bounded_input = bounded_input;
  p.clip_lo = bounded_input ? 0.0 : -init;
  p.clip_hi = init;
  p.validate();
  return p;
}

void ClipParam::validate() const {
  if (bits < 2 || bits > 16) throw ParameterError("clip param: bits must be in [2, 16], got " + std::to_string(bits));
  if (!std::isfinite(clip_lo) || !std::isfinite(clip_hi) || !(clip_lo < clip_hi)) {
    throw ParameterError("clip param: invalid clip pair (" + std::to_string(clip_lo) + ", " +
                         std::to_string(clip_hi) + ")");
  }
  if (bounded_input && clip_lo != 0.0) throw ParameterError("clip param: bounded input requires clip_lo == 0");
}

RegionCounts count_regions(const Tensor& a, const ClipParam& p) {
  RegionCounts counts;
  for (float v : a.data()) {
    switch (classify(v, p)) {
      case ClipRegion::kBelow: ++counts.below; break;
      case ClipRegion::kInside: ++counts.inside; break;
      case ClipRegion::kAbove: ++counts.above; break;
    }
  }
  return counts;
}

Tensor fakequant_forward(const Tensor& a, const ClipParam& p) {
  p.validate();
  const double s = p.scale();
  const std::int32_t z = p.zero_point();
  const std::int32_t max_code = p.max_code();
  Tensor out(a.shape());
  auto in = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::int32_t code = scalar::quantize(in[i], s, z, p.clip_lo, p.clip_hi, max_code);
    od[i] = static_cast<float>(scalar::dequantize(code, s, z));
  }
  return out;
}

FakeQuantGrads fakequant_backward(const Tensor& a, const ClipParam& p, const Tensor& grad_out) {
  require_same_shape(a, grad_out, "fakequant_backward");
  p.validate();
  const double s = p.scale();
  const double levels = std::ldexp(1.0, p.bits) - 1.0;
  const double lo = p.clip_lo, hi = p.clip_hi;
  const std::size_t n = a.numel();
  auto ad = a.data();
  auto gd = grad_out.data();

  FakeQuantGrads out{Tensor(a.shape()), 0.0, 0.0};
  auto ga = out.grad_a.data();
  std::vector<double> c_hi(n), c_lo(n);
  // Branch-free per-element pass, then an ordered reduction.
  for (std::size_t i = 0; i < n; ++i) {
    const double v = ad[i];
    const double g = gd[i];
    const double q = s * (v - lo);
    const double e = (q - scalar::round_half_even(q)) / levels;
    const bool above = v > hi;
    const bool below = v < lo;
    const bool inside = !above && !below;
    ga[i] = inside ? gd[i] : 0.0f;
    c_hi[i] = above ? g : (inside ? -e * g : 0.0);
    c_lo[i] = below ? g : (inside ? p.lower_sign * e * g : 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.grad_hi += c_hi[i];
    out.grad_lo += c_lo[i];
  }
  return out;
}

void clip_optimizer_step(ClipParam& p, double lr) {
  p.clip_hi -= lr * p.grad_hi;
  if (!p.bounded_input) p.clip_lo -= lr * p.grad_lo;
  if (p.clip_hi - p.clip_lo < kClipMinGap) {
    if (p.bounded_input) {
      p.clip_hi = p.clip_lo + kClipMinGap;
    } else {
      const double mid = 0.5 * (p.clip_hi + p.clip_lo);
      p.clip_lo = mid - 0.5 * kClipMinGap;
      p.clip_hi = mid + 0.5 * kClipMinGap;
    }
  }
  p.zero_grad();
}

namespace ops {

Var fake_quant(const Var& x, ClipParam& clip) {
  Tensor out = fakequant_forward(x.value(), clip);
  // The backward uses the clip pair that produced this forward.
  ClipParam snapshot = clip;
  ClipParam* target = &clip;
  return make_op(std::move(out), {x}, [snapshot, target](TapeNode& self) {
    TapeNode& xn = *self.inputs[0];
    FakeQuantGrads g = fakequant_backward(xn.value, snapshot, self.grad);
    accumulate_grad(xn, g.grad_a);
    target->grad_hi += g.grad_hi;
    if (!target->bounded_input) target->grad_lo += g.grad_lo;
  }, /*always_record=*/true);
}

}  // namespace ops
}  // namespace w4a4
