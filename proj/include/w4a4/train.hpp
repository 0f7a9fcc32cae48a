#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "w4a4/checkpoint.hpp"
#include "w4a4/corpus.hpp"
#include "w4a4/model.hpp"

namespace w4a4 {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 3e-3;
  /// Cosine decay ends at min_lr_frac * lr.
  double min_lr_frac = 0.1;
  std::size_t warmup = 100;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  /// Learning rate for clip values; negative means "same as lr".
  double clip_lr = -1.0;
  std::size_t log_interval = 50;
  /// Dump cadence; 0 means max(1, steps / 50).
  std::size_t dump_interval = 0;
  /// Tokens in the fixed probe batch used for dumps and outlier metrics.
  std::size_t probe_tokens = 512;
  std::uint64_t seed = 1;

  /// Throws ConfigError on nonsensical values.
  void validate() const;
  std::size_t effective_dump_interval() const { return dump_interval ? dump_interval : std::max<std::size_t>(1, steps / 50); }
};

/// Learning rate at `step` (1-based): linear warmup, then cosine decay to min_lr_frac * lr.
double lr_at(const TrainConfig& cfg, std::size_t step);

/// One NDJSON metrics record.
struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0, ce_loss = 0, kurt_loss = 0, ppl = 0, lr = 0;
  std::vector<std::pair<std::string, std::pair<double, double>>> clips;  // "layers.0.QKV_Input" -> (lo, hi)
  double outlier_fraction = 0;

  std::string to_json() const;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::size_t steps_done = 0;
};

/// Run directory layout.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.toml"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final"; }
  std::filesystem::path dumps() const { return root / "dumps"; }
  std::filesystem::path metrics() const { return root / "metrics.ndjson"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

/// Resumable optimizer position.
struct TrainState {
  std::size_t step = 0;  // steps completed
  OptimizerState opt;
  std::string rng_state;  // empty: fresh sampler seeded from cfg.seed
};

/// Trains `model` on corpus.train. When `run` is given, metrics, dumps and the
/// final checkpoint are written under it. With `state`, training resumes from
/// state->step and `state` holds the final position on return. `until` stops
/// early after that step (0 = cfg.steps); the schedule still spans cfg.steps.
/// A non-finite loss saves checkpoints/diverged and throws NumericalError.
TrainResult train(Model& model, const TrainConfig& cfg, const Corpus& corpus, const std::string& model_id,
                  const RunPaths* run = nullptr, TrainState* state = nullptr, std::size_t until = 0);

/// Kurtosis-regularized output ids for a model (expanded over layers).
std::vector<std::string> kurtosis_output_ids(const ModelConfig& cfg);

/// Fraction of outlier channels, averaged over every input site and layer,
/// from one forward pass over `tokens`.
double probe_outlier_fraction(Model& model, std::span<const std::int32_t> tokens, std::size_t batch);

/// exp(mean NLL) over consecutive non-overlapping windows of the model's
/// seq_len (the last partial window is dropped). `max_tokens` caps the
/// evaluated prefix (0 = all). Throws InputError on a corpus shorter than
/// one window plus one token.
double eval_perplexity(Model& model, std::span<const std::int32_t> tokens, std::size_t max_tokens = 0,
                       bool integer_matmul = false);

}  // namespace w4a4
