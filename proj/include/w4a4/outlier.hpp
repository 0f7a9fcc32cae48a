#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "w4a4/tensor.hpp"

namespace w4a4 {

inline constexpr double kOutlierFactor = 6.0;

/// Streaming per-channel moments over tokens (rows of [tokens x channels]).
/// Batches are merged with the pairwise update of Chan et al. / Pebay, so the
/// result does not depend on how the token stream was split.
class ChannelStats {
 public:
  ChannelStats() = default;
  explicit ChannelStats(std::size_t channels);

  void update(const Tensor& x);
  void merge(const ChannelStats& other);

  std::size_t channels() const { return mean_.size(); }
  std::size_t n_tokens() const { return n_; }
  double mean_abs(std::size_t j) const { return n_ ? abs_sum_[j] / static_cast<double>(n_) : 0.0; }
  double mean(std::size_t j) const { return mean_[j]; }
  /// Population variance.
  double variance(std::size_t j) const { return n_ ? m2_[j] / static_cast<double>(n_) : 0.0; }
  double min(std::size_t j) const { return min_[j]; }
  double max(std::size_t j) const { return max_[j]; }
  /// Sum-form kurtosis of channel j over tokens.
  double kurtosis(std::size_t j, double epsilon = 1e-6) const;

 private:
  std::size_t n_ = 0;
  std::vector<double> abs_sum_, mean_, m2_, m3_, m4_, min_, max_;
};

/// Channels whose mean |x| exceeds `factor` times the mean |x| over all channels.
std::vector<std::size_t> outlier_channels(const ChannelStats& stats, double factor = kOutlierFactor);
double outlier_fraction(const ChannelStats& stats, double factor = kOutlierFactor);

/// Mean over tokens of the sum-form kurtosis of each token's channel vector.
double mean_token_kurtosis(const Tensor& x, double epsilon = 1e-6);

/// One activation snapshot. On disk: `<base>.bin` holds the tensor
///   bytes 0-7   "ACTD\0\0\0\0"
///   u32         version (1)
///   u32         dtype (1 = f32)
///   u32         n_dims
///   u32         reserved (0)
///   u64[n_dims] dims
///   f32[]       payload, row-major
/// (all little-endian) and `<base>.json` holds the metadata.
struct ActivationDump {
  std::string site;  // input site (QKV_Input, ...) or output name (qkv_out, ...)
  std::size_t layer = 0;
  std::size_t step = 0;
  std::string model_id;
  Tensor value;
};

inline constexpr std::uint32_t kDumpVersion = 1;

void write_dump(const std::filesystem::path& base, const ActivationDump& dump);
/// `bin_path` is the .bin file; the sidecar is found by extension swap.
/// Throws InputError on a malformed file.
ActivationDump read_dump(const std::filesystem::path& bin_path);
/// Canonical location: <dir>/step_<000123>/L<layer>_<site>.bin
std::filesystem::path dump_path(const std::filesystem::path& dir, std::size_t step, std::size_t layer,
                                const std::string& site);

struct SiteSummary {
  std::size_t step = 0;
  std::string site;
  std::size_t layer = 0;
  bool is_output = false;
  bool residual_stream = false;
  std::size_t n_tokens = 0;
  std::size_t n_channels = 0;
  std::size_t n_outliers = 0;
  double outlier_fraction = 0.0;
  double mean_token_kurtosis = 0.0;
};

struct ChannelRow {
  std::size_t step = 0;
  std::string site;
  std::size_t layer = 0;
  std::size_t channel = 0;
  double mean_abs = 0, mean = 0, variance = 0, kurtosis = 0;
  bool is_outlier = false;
};

struct TrajectoryReport {
  std::string model_id;
  std::vector<std::size_t> steps;
  std::vector<SiteSummary> sites;
  std::vector<ChannelRow> channels;

  /// Mean outlier fraction over layers for one site name at one step.
  double site_outlier_fraction(std::size_t step, const std::string& site) const;
  /// Mean over input sites and layers of the outlier fraction.
  double mean_outlier_fraction(std::size_t step) const;
  /// Mean token kurtosis over every output site and layer at one step.
  double mean_output_kurtosis(std::size_t step) const;
  std::size_t final_step() const { return steps.empty() ? 0 : steps.back(); }
};

inline constexpr int kReportSchemaVersion = 1;

/// Reads every dump under `dump_dir` (recursively). Throws InputError if there are none.
TrajectoryReport analyze_dumps(const std::filesystem::path& dump_dir, double factor = kOutlierFactor);
/// Writes channels.csv, summary.csv and report.json into `out_dir`.
void write_report(const TrajectoryReport& report, const std::filesystem::path& out_dir);

}  // namespace w4a4
