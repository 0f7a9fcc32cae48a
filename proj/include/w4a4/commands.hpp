#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "w4a4/config.hpp"
#include "w4a4/ptq.hpp"

namespace w4a4 {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Runs `fn`, mapping toolkit errors to exit codes and printing them to `err`.
int guarded(std::ostream& err, const std::function<void()>& fn);

/// Trains into `run_dir` (default runs/<run.name>): config.toml, metrics.ndjson,
/// dumps/, checkpoints/final.{json,bin}, reports/.
int cmd_train(const std::filesystem::path& config, const std::vector<std::string>& overrides,
              const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);

/// Converts a checkpoint per `plan` and writes it to `out_base` (default:
/// "<checkpoint>-<plan label>"). `calib` is a text file for GPTQ.
int cmd_ptq(const std::filesystem::path& checkpoint, const PTQPlan& plan, const std::filesystem::path& calib,
            const std::filesystem::path& out_base, std::ostream& out, std::ostream& err);

/// Prints one JSON record with the perplexity of `checkpoint` on `corpus`.
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& corpus, std::size_t max_tokens,
             bool integer_matmul, std::ostream& out, std::ostream& err);

/// Writes channels.csv, summary.csv and report.json for the dumps under `dump_dir`.
int cmd_analyze(const std::filesystem::path& dump_dir, const std::filesystem::path& out_dir, std::ostream& out,
                std::ostream& err);

/// One column of the evaluation matrix. `native_act` evaluates activations the
/// way the model was trained (learned clips for QAT models, none otherwise);
/// otherwise activations are forced to 4 bits.
struct GridColumn {
  std::string label;
  bool native_act;
  int weight_bits;
  WeightMethod method;
};

const std::vector<GridColumn>& grid_columns();
/// Row names; each is a run directory under the grid root.
const std::vector<std::string>& grid_rows();
PTQPlan plan_for(const GridColumn& col, bool model_has_clips, const RunConfig& cfg);

/// Calibration text: held-out tokens after the evaluation window, falling back
/// to the start of the training split.
std::vector<std::int32_t> calibration_tokens(const Corpus& corpus, std::size_t eval_tokens, std::size_t calib_tokens);

/// Evaluates every row x column cell. Throws InputError if a run is missing.
nlohmann::json run_grid(const std::filesystem::path& root);

/// Writes reports/grid.json and reports/grid.csv under `root`.
int cmd_grid(const std::filesystem::path& root, std::ostream& out, std::ostream& err);

}  // namespace w4a4
