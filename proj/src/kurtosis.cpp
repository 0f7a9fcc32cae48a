#include "w4a4/kurtosis.hpp"

#include <algorithm>
#include <cmath>

#include "w4a4/errors.hpp"

namespace w4a4 {

void KurtosisConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("kurtosis.lambda must be >= 0");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("kurtosis.epsilon must be > 0");
}

namespace {

template <typename T>
double kurtosis_impl(std::span<const T> x, double eps) {
  if (x.empty()) throw InputError("kurtosis: empty input");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (T v : x) mean += v;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (T v : x) {
    const double d = v - mean;
    const double d2 = d * d;
    m2 += d2;
    m4 += d2 * d2;
  }
  const double var = m2 / n;
  return m4 / (var * var + eps);
}

}  // namespace

double kurtosis(std::span<const float> x, double epsilon) { return kurtosis_impl(x, epsilon); }
double kurtosis(std::span<const double> x, double epsilon) { return kurtosis_impl(x, epsilon); }

namespace ops {

Var kurtosis_rows(const Var& x, double epsilon) {
  const Tensor& in = x.value();
  require_rank2(in, "kurtosis_rows");
  double total = 0.0;
  for (std::size_t r = 0; r < in.rows(); ++r) total += kurtosis(in.row(r), epsilon);
  return make_op(Tensor::scalar(static_cast<float>(total)), {x}, [epsilon](TapeNode& self) {
    TapeNode& xn = *self.inputs[0];
    const Tensor& in = xn.value;
    const std::size_t rows = in.rows(), cols = in.cols();
    const double n = static_cast<double>(cols);
    const double up = self.grad[0];
    Tensor g(in.shape());
    std::vector<double> d(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = in.row(r);
      double mean = 0.0;
      for (float v : row) mean += v;
      mean /= n;
      double m2 = 0.0, m3 = 0.0, m4 = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        d[j] = row[j] - mean;
        const double d2 = d[j] * d[j];
        m2 += d2;
        m3 += d2 * d[j];
        m4 += d2 * d2;
      }
      const double var = m2 / n;
      const double denom = var * var + epsilon;
      const double k = m4 / denom;
      const double mean_d3 = m3 / n;
      // dK/dx_j = 4 (d_j^3 - mean(d^3)) / D - K * 4 var d_j / (n D)
      auto gr = g.row(r);
      for (std::size_t j = 0; j < cols; ++j) {
        const double dj = d[j];
        const double grad = 4.0 * (dj * dj * dj - mean_d3) / denom - k * 4.0 * var * dj / (n * denom);
        gr[j] = static_cast<float>(up * grad);
      }
    }
    accumulate_grad(xn, g);
  });
}

}  // namespace ops

Var kurtosis_loss(std::span<const SiteOutput> outputs, const KurtosisConfig& cfg) {
  cfg.validate();
  std::vector<const SiteOutput*> selected;
  if (cfg.sites.empty()) {
    for (const auto& o : outputs) selected.push_back(&o);
  } else {
    for (const auto& name : cfg.sites) {
      auto it = std::find_if(outputs.begin(), outputs.end(), [&](const SiteOutput& o) { return o.site == name; });
      if (it == outputs.end()) throw ConfigError("kurtosis.sites: unknown site '" + name + "'");
      selected.push_back(&*it);
    }
  }
  if (cfg.lambda == 0.0 || selected.empty()) return constant(Tensor::scalar(0.0f));
  Var total = ops::kurtosis_rows(selected.front()->value, cfg.epsilon);
  for (std::size_t i = 1; i < selected.size(); ++i) {
    total = ops::add(total, ops::kurtosis_rows(selected[i]->value, cfg.epsilon));
  }
  return ops::scale(total, cfg.lambda);
}

}  // namespace w4a4
