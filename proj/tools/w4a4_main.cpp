// w4a4: train, convert, evaluate and analyze toy quantized transformers.

#include <iostream>

#include "CLI11.hpp"
#include "w4a4/commands.hpp"

int main(int argc, char** argv) {
  using namespace w4a4;
  CLI::App app{"Low-bit transformer toolkit: QAT with learned clips, kurtosis regularization, PTQ"};
  app.require_subcommand(1);

  std::string config, run_dir;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train a model from a config");
  train->add_option("--config", config, "Run config (TOML subset)")->required();
  train->add_option("--set", overrides, "Override a config key, key=value (repeatable)");
  train->add_option("--out", run_dir, "Run directory (default runs/<run.name>)");

  std::string checkpoint, calib, out_base, wmethod = "none";
  int wbits = 16, abits = 16;
  std::size_t calib_tokens = kCalibTokens;
  double damping = kGptqDamping;
  auto* ptq = app.add_subcommand("ptq", "Quantize a trained checkpoint");
  ptq->add_option("checkpoint", checkpoint, "Checkpoint base path or manifest")->required();
  ptq->add_option("--wbits", wbits, "Weight bits")->check(CLI::IsMember({3, 4, 16}));
  ptq->add_option("--wmethod", wmethod, "Weight quantizer")->check(CLI::IsMember({"none", "rtn", "gptq"}));
  ptq->add_option("--abits", abits, "Activation bits")->check(CLI::IsMember({4, 16}));
  ptq->add_option("--calib", calib, "Calibration text for gptq");
  ptq->add_option("--calib-tokens", calib_tokens, "Calibration token budget");
  ptq->add_option("--damping", damping, "Hessian damping fraction");
  ptq->add_option("--out", out_base, "Output checkpoint base path");

  std::string corpus;
  std::size_t max_tokens = 0;
  bool integer = false;
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on a text file");
  eval->add_option("checkpoint", checkpoint, "Checkpoint base path or manifest")->required();
  eval->add_option("--corpus", corpus, "Text file")->required();
  eval->add_option("--max-tokens", max_tokens, "Evaluate at most this many tokens (0 = all)");
  eval->add_flag("--integer", integer, "Run quantized linear layers through the integer GEMM");

  std::string dump_dir, report_dir;
  auto* analyze = app.add_subcommand("analyze", "Outlier report from activation dumps");
  analyze->add_option("dumps", dump_dir, "Dump directory")->required();
  analyze->add_option("--out", report_dir, "Report directory (default <dumps>/../reports)");

  std::string grid_root;
  auto* grid = app.add_subcommand("grid", "Perplexity matrix over methods and quantization plans");
  grid->add_option("root", grid_root, "Directory holding baseline/, qat/, qat_kurtosis/ runs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*train) return cmd_train(config, overrides, run_dir, std::cout, std::cerr);
  if (*ptq) {
    PTQPlan plan;
    plan.weight_bits = wbits;
    plan.act_bits = abits;
    plan.calib_tokens = calib_tokens;
    plan.damping = damping;
    const int rc = guarded(std::cerr, [&] { plan.weight_method = parse_weight_method(wmethod); });
    if (rc != kExitOk) return rc;
    return cmd_ptq(checkpoint, plan, calib, out_base, std::cout, std::cerr);
  }
  if (*eval) return cmd_eval(checkpoint, corpus, max_tokens, integer, std::cout, std::cerr);
  if (*analyze) {
    std::filesystem::path out = report_dir;
    if (out.empty()) out = std::filesystem::path(dump_dir).lexically_normal().parent_path() / "reports";
    return cmd_analyze(dump_dir, out, std::cout, std::cerr);
  }
  if (*grid) return cmd_grid(grid_root, std::cout, std::cerr);
  return kExitConfig;
}
