#pragma once

#include <span>
#include <string>
#include <vector>

#include "w4a4/autograd.hpp"

namespace w4a4 {

inline constexpr double kKurtosisLambda = 1e-5;
inline constexpr double kKurtosisEpsilon = 1e-6;

struct KurtosisConfig {
  double lambda = kKurtosisLambda;
  double epsilon = kKurtosisEpsilon;
  /// Regularized layer-output ids; empty means every available output.
  std::vector<std::string> sites;

  /// Throws ConfigError unless lambda >= 0 and epsilon > 0.
  void validate() const;
};

/// Sum-form kurtosis: sum_i (x_i - mu)^4 / (sigma^4 + eps), with population
/// sigma. Equals n times the classical kurtosis when eps -> 0.
double kurtosis(std::span<const float> x, double epsilon = kKurtosisEpsilon);
double kurtosis(std::span<const double> x, double epsilon = kKurtosisEpsilon);

/// A named layer output available for regularization.
struct SiteOutput {
  std::string site;
  Var value;
};

namespace ops {

/// sum over rows of kurtosis(row); differentiable.
Var kurtosis_rows(const Var& x, double epsilon = kKurtosisEpsilon);

}  // namespace ops

/// lambda * sum_sites sum_tokens kurtosis(row). Throws ConfigError if the
/// config names a site absent from `outputs`.
Var kurtosis_loss(std::span<const SiteOutput> outputs, const KurtosisConfig& cfg);

}  // namespace w4a4
