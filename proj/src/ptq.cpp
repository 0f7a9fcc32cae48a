#include "w4a4/ptq.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>

#include "w4a4/autograd.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/model.hpp"

namespace w4a4 {

std::string_view to_string(WeightMethod m) {
  switch (m) {
    case WeightMethod::kNone: return "none";
    case WeightMethod::kRtn: return "rtn";
    case WeightMethod::kGptq: return "gptq";
  }
  return "?";
}

WeightMethod parse_weight_method(std::string_view s) {
  if (s == "none") return WeightMethod::kNone;
  if (s == "rtn") return WeightMethod::kRtn;
  if (s == "gptq") return WeightMethod::kGptq;
  throw ConfigError("unknown weight method '" + std::string(s) + "' (expected none, rtn or gptq)");
}

void PTQPlan::validate() const {
  if (weight_bits != 3 && weight_bits != 4 && weight_bits != 16) {
    throw ConfigError("ptq plan: weight bits must be 3, 4 or 16, got " + std::to_string(weight_bits));
  }
  if (act_bits != 4 && act_bits != 16) throw ConfigError("ptq plan: activation bits must be 4 or 16");
  if ((weight_method == WeightMethod::kNone) != (weight_bits == 16)) {
    throw ConfigError("ptq plan: weight method 'none' goes with 16-bit weights and only with them");
  }
  if (weight_method == WeightMethod::kGptq && calib_tokens == 0) throw ConfigError("ptq plan: gptq needs calib_tokens > 0");
  if (!(damping > 0.0)) throw ConfigError("ptq plan: damping must be > 0");
}

std::string PTQPlan::label() const {
  return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits) + "-" + std::string(to_string(weight_method));
}

QuantizedTensor QuantizedLayer::codes() const {
  QuantizedTensor q;
  q.shape = shape;
  q.bits = packed.bits;
  q.granularity = Granularity::kColumn;
  q.codes = unpack(packed);
  q.scales = scales;
  q.zero_points = zero_points;
  return q;
}

Tensor QuantizedLayer::dequantize() const { return w4a4::dequantize(codes()); }

namespace {

QuantizedLayer make_layer(const QuantizedTensor& q, WeightMethod method) {
  QuantizedLayer out;
  out.shape = q.shape;
  out.method = method;
  out.packed = pack(q.codes, q.rows(), q.cols(), q.bits);
  out.scales = q.scales;
  out.zero_points = q.zero_points;
  return out;
}

void check_weight(const Tensor& w, int bits) {
  require_rank2(w, "weight quantization");
  if (bits < 2 || bits > 8) throw SpecError("weight quantization: bits must be in [2, 8]");
}

}  // namespace

QuantizedLayer rtn_quantize_weights(const Tensor& w, int bits) {
  check_weight(w, bits);
  auto specs = minmax_calibrate(w, bits, Granularity::kColumn);
  return make_layer(quantize(w, specs), WeightMethod::kRtn);
}

QuantizedLayer gptq_quantize_weights(const Tensor& w, int bits, const Tensor& calib_inputs, double damping) {
  check_weight(w, bits);
  require_rank2(calib_inputs, "gptq calibration inputs");
  const std::size_t d_in = w.rows(), d_out = w.cols(), n = calib_inputs.rows();
  if (calib_inputs.cols() != d_in) {
    throw DimensionError("gptq: calibration inputs have " + std::to_string(calib_inputs.cols()) + " columns, weight has " +
                         std::to_string(d_in) + " rows");
  }
  if (!(damping > 0.0)) throw ParameterError("gptq: damping must be > 0");
  if (n == 0) throw InputError("gptq: no calibration rows");

  Eigen::MatrixXd x(n, d_in);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d_in; ++c) x(r, c) = calib_inputs.at(r, c);
  Eigen::MatrixXd h = 2.0 * x.transpose() * x;
  for (std::size_t i = 0; i < d_in; ++i)
    if (h(i, i) == 0.0) h(i, i) = 1.0;  // dead input channel
  h.diagonal().array() += damping * h.diagonal().mean();

  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) throw NumericalError("gptq: Hessian is not positive definite after damping");
  Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(d_in, d_in));
  hinv = 0.5 * (hinv + hinv.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success) throw NumericalError("gptq: inverse Hessian is not positive definite");
  const Eigen::MatrixXd u = llt_inv.matrixU();

  // Grids come from the original weights so GPTQ and RTN share a codebook.
  auto specs = minmax_calibrate(w, bits, Granularity::kColumn);
  std::vector<double> scale(d_out), lo(d_out), hi(d_out);
  std::vector<std::int32_t> zp(d_out);
  for (std::size_t j = 0; j < d_out; ++j) {
    scale[j] = specs[j].scale();
    zp[j] = specs[j].zero_point();
    lo[j] = specs[j].clip_lo;
    hi[j] = specs[j].clip_hi;
  }
  const std::int32_t max_code = specs[0].max_code();

  Eigen::MatrixXd wk(d_in, d_out);
  for (std::size_t r = 0; r < d_in; ++r)
    for (std::size_t c = 0; c < d_out; ++c) wk(r, c) = w.at(r, c);

  QuantizedTensor q;
  q.shape = w.shape();
  q.bits = bits;
  q.granularity = Granularity::kColumn;
  q.codes.resize(d_in * d_out);
  q.scales = scale;
  q.zero_points = zp;
  std::vector<double> err(d_out);
  for (std::size_t i = 0; i < d_in; ++i) {
    for (std::size_t j = 0; j < d_out; ++j) {
      const std::int32_t code = scalar::quantize(wk(i, j), scale[j], zp[j], lo[j], hi[j], max_code);
      q.codes[i * d_out + j] = static_cast<std::uint8_t>(code);
      err[j] = (wk(i, j) - scalar::dequantize(code, scale[j], zp[j])) / u(i, i);
    }
    for (std::size_t r = i + 1; r < d_in; ++r) {
      const double coef = u(i, r);
      for (std::size_t j = 0; j < d_out; ++j) wk(r, j) -= coef * err[j];
    }
  }
  return make_layer(q, WeightMethod::kGptq);
}

double proxy_loss(const Tensor& calib_inputs, const Tensor& w, const Tensor& w_hat) {
  require_same_shape(w, w_hat, "proxy_loss");
  require_rank2(calib_inputs, "proxy_loss");
  if (calib_inputs.cols() != w.rows()) throw DimensionError("proxy_loss: inner dimensions disagree");
  const std::size_t n = calib_inputs.rows(), k = w.rows(), m = w.cols();
  double total = 0.0;
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = calib_inputs.at(i, p);
      for (std::size_t j = 0; j < m; ++j) {
        acc[j] += xv * (static_cast<double>(w.at(p, j)) - static_cast<double>(w_hat.at(p, j)));
      }
    }
    for (double a : acc) total += a * a;
  }
  return std::sqrt(total);
}

void configure_activation_path(Model& model, int act_bits) {
  if (act_bits != 4 && act_bits != 16) throw ConfigError("activation bits must be 4 or 16");
  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    for (SiteKind k : kAllSites) {
      ActQuantPolicy& pol = model.act_policy(l, k);
      if (act_bits == 16) {
        pol = ActQuantPolicy{};
      } else if (const ClipParam* c = model.clip(l, k)) {
        pol = ActQuantPolicy{ActQuantMode::kLearnedClip, c->bits};
      } else {
        pol = ActQuantPolicy{ActQuantMode::kPerToken, act_bits};
      }
    }
  }
}

void apply_ptq(Model& model, const PTQPlan& plan, std::span<const std::int32_t> calib_tokens) {
  plan.validate();
  if (model.ptq_plan()) {
    if (*model.ptq_plan() == plan) return;
    throw ConfigError("apply_ptq: model already converted with " + model.ptq_plan()->label() + ", cannot apply " +
                      plan.label());
  }
  const std::size_t n_layers = model.config().n_layers;
  configure_activation_path(model, plan.act_bits);

  if (plan.weight_method != WeightMethod::kNone) {
    std::vector<std::int32_t> calib;
    std::size_t calib_batch = 0;
    if (plan.weight_method == WeightMethod::kGptq) {
      const std::size_t len = model.config().seq_len;
      const std::size_t want = std::min(plan.calib_tokens, calib_tokens.size()) / len * len;
      if (want == 0) {
        throw ConfigError("apply_ptq: gptq needs at least " + std::to_string(len) + " calibration tokens, got " +
                          std::to_string(calib_tokens.size()));
      }
      calib.assign(calib_tokens.begin(), calib_tokens.begin() + static_cast<std::ptrdiff_t>(want));
      calib_batch = want / len;
    }
    NoGradGuard no_grad;
    // Blocks are converted in order so later blocks calibrate on the outputs
    // of already-quantized earlier blocks.
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::array<Tensor, 4> inputs;
      if (plan.weight_method == WeightMethod::kGptq) {
        ActivationTap tap = [&](std::size_t layer, std::string_view site, const Tensor& v) {
          if (layer != l) return;
          if (auto k = parse_site(site)) inputs[static_cast<int>(*k)] = v;
        };
        ForwardOptions opts;
        opts.tap = &tap;
        model.forward(calib, calib_batch, opts);
      }
      for (SiteKind k : kAllSites) {
        Var& w = model.layers()[l].weight(k);
        QuantizedLayer ql = plan.weight_method == WeightMethod::kGptq
                                ? gptq_quantize_weights(w.value(), plan.weight_bits, inputs[static_cast<int>(k)],
                                                        plan.damping)
                                : rtn_quantize_weights(w.value(), plan.weight_bits);
        w.mutable_value() = ql.dequantize();
        model.quantized_layers().emplace_back(linear_name(l, k), std::move(ql));
      }
    }
  }
  model.set_ptq_plan(plan);
}

}  // namespace w4a4
