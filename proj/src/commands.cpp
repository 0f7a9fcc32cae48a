#include "w4a4/commands.hpp"

#include <fstream>
#include <iostream>

#include "w4a4/checkpoint.hpp"
#include "w4a4/corpus.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/outlier.hpp"
#include "w4a4/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace w4a4 {

int guarded(std::ostream& err, const std::function<void()>& fn) {
  try {
    fn();
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

int cmd_train(const fs::path& config, const std::vector<std::string>& overrides, const fs::path& run_dir,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(config);
    apply_overrides(cfg, overrides);
    cfg.validate();
    cfg.corpus = fs::absolute(cfg.corpus);
    RunPaths run{run_dir.empty() ? fs::path("runs") / cfg.name : run_dir};
    fs::create_directories(run.root);
    {
      std::ofstream os(run.config());
      if (!os) throw InputError("cannot write " + run.config().string());
      os << cfg.to_toml();
    }
    Corpus corpus = split_corpus(load_tokens(cfg.corpus), cfg.eval_fraction);
    Model model(cfg.model);
    out << "training " << cfg.name << ": " << model.parameter_count() << " parameters, " << cfg.train.steps
        << " steps\n";
    TrainResult r = train(model, cfg.train, corpus, cfg.name, &run);
    write_report(analyze_dumps(run.dumps()), run.reports());
    const double ppl = eval_perplexity(model, corpus.eval, cfg.eval_tokens);
    out << "final loss " << r.metrics.back().loss << ", held-out ppl " << ppl << "\n";
    out << "run directory " << run.root.string() << "\n";
  });
}

int cmd_ptq(const fs::path& checkpoint, const PTQPlan& plan, const fs::path& calib, const fs::path& out_base,
            std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    plan.validate();
    Checkpoint ck = load_checkpoint(checkpoint);
    std::vector<std::int32_t> calib_tokens;
    if (plan.weight_method == WeightMethod::kGptq) {
      if (calib.empty()) throw ConfigError("--calib is required for gptq");
      calib_tokens = load_tokens(calib);
    }
    apply_ptq(*ck.model, plan, calib_tokens);
    fs::path dest = out_base;
    if (dest.empty()) {
      dest = checkpoint;
      if (dest.extension() == ".json" || dest.extension() == ".bin") dest.replace_extension();
      dest += "-" + plan.label();
    }
    save_checkpoint(dest, *ck.model, ck.model_id, ck.step);
    out << plan.label() << " -> " << dest.string() << ".json\n";
  });
}

int cmd_eval(const fs::path& checkpoint, const fs::path& corpus, std::size_t max_tokens, bool integer_matmul,
             std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Checkpoint ck = load_checkpoint(checkpoint);
    auto tokens = load_tokens(corpus);
    const double ppl = eval_perplexity(*ck.model, tokens, max_tokens, integer_matmul);
    const auto& plan = ck.model->ptq_plan();
    json rec = {{"checkpoint", checkpoint.string()},
                {"model_id", ck.model_id},
                {"plan", plan ? plan->label() : std::string("native")},
                {"corpus", corpus.string()},
                {"n_tokens", max_tokens ? std::min(max_tokens, tokens.size()) : tokens.size()},
                {"integer_matmul", integer_matmul},
                {"perplexity", ppl}};
    out << rec.dump() << '\n';
  });
}

int cmd_analyze(const fs::path& dump_dir, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    TrajectoryReport rep = analyze_dumps(dump_dir);
    write_report(rep, out_dir);
    out << "analyzed " << rep.steps.size() << " step(s), " << rep.sites.size() << " site snapshots -> "
        << out_dir.string() << "\n";
  });
}

const std::vector<GridColumn>& grid_columns() {
  static const std::vector<GridColumn> cols = {
      {"native 16/none", true, 16, WeightMethod::kNone}, {"native 4/gptq", true, 4, WeightMethod::kGptq},
      {"A4 4/gptq", false, 4, WeightMethod::kGptq},      {"A4 4/rtn", false, 4, WeightMethod::kRtn},
      {"A4 3/gptq", false, 3, WeightMethod::kGptq},      {"A4 3/rtn", false, 3, WeightMethod::kRtn},
  };
  return cols;
}

const std::vector<std::string>& grid_rows() {
  static const std::vector<std::string> rows = {"baseline", "qat", "qat_kurtosis"};
  return rows;
}

PTQPlan plan_for(const GridColumn& col, bool model_has_clips, const RunConfig& cfg) {
  PTQPlan p;
  p.weight_bits = col.weight_bits;
  p.weight_method = col.method;
  p.act_bits = col.native_act && !model_has_clips ? 16 : 4;
  p.calib_tokens = cfg.calib_tokens;
  p.damping = cfg.damping;
  return p;
}

std::vector<std::int32_t> calibration_tokens(const Corpus& corpus, std::size_t eval_tokens, std::size_t calib_tokens) {
  if (eval_tokens && corpus.eval.size() >= eval_tokens + calib_tokens) {
    auto b = corpus.eval.begin() + static_cast<std::ptrdiff_t>(eval_tokens);
    return {b, b + static_cast<std::ptrdiff_t>(calib_tokens)};
  }
  const std::size_t n = std::min(calib_tokens, corpus.train.size());
  return {corpus.train.begin(), corpus.train.begin() + static_cast<std::ptrdiff_t>(n)};
}

json run_grid(const fs::path& root) {
  json cols = json::array();
  for (const auto& c : grid_columns()) {
    cols.push_back({{"label", c.label},
                    {"activations", c.native_act ? "native" : "A4"},
                    {"weight_bits", c.weight_bits},
                    {"weight_method", to_string(c.method)}});
  }
  json rows = json::array(), ppl = json::array(), plans = json::array();
  for (const auto& name : grid_rows()) {
    RunPaths run{root / name};
    if (!fs::is_regular_file(run.config())) throw InputError("grid: missing run " + run.root.string());
    RunConfig cfg = load_run_config(run.config());
    Corpus corpus = split_corpus(load_tokens(cfg.corpus), cfg.eval_fraction);
    auto calib = calibration_tokens(corpus, cfg.eval_tokens, cfg.calib_tokens);
    json row_ppl = json::array(), row_plans = json::array();
    for (const auto& col : grid_columns()) {
      Checkpoint ck = load_checkpoint(run.final_checkpoint());
      PTQPlan plan = plan_for(col, ck.model->has_clips(), cfg);
      apply_ptq(*ck.model, plan, calib);
      row_ppl.push_back(eval_perplexity(*ck.model, corpus.eval, cfg.eval_tokens));
      row_plans.push_back(plan.label());
    }
    rows.push_back(name);
    ppl.push_back(row_ppl);
    plans.push_back(row_plans);
  }
  return {{"schema_version", 1}, {"rows", rows}, {"columns", cols}, {"plans", plans}, {"perplexity", ppl}};
}

int cmd_grid(const fs::path& root, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    json g = run_grid(root);
    const fs::path dir = root / "reports";
    fs::create_directories(dir);
    {
      std::ofstream os(dir / "grid.json");
      os << g.dump(2) << '\n';
    }
    std::ofstream csv(dir / "grid.csv");
    csv.precision(9);
    csv << "method";
    for (const auto& c : g["columns"]) csv << ',' << c["label"].get<std::string>();
    csv << '\n';
    for (std::size_t r = 0; r < g["rows"].size(); ++r) {
      csv << g["rows"][r].get<std::string>();
      for (const auto& v : g["perplexity"][r]) csv << ',' << v.get<double>();
      csv << '\n';
    }
    out << g["perplexity"].dump() << '\n' << "grid -> " << (dir / "grid.json").string() << '\n';
  });
}

}  // namespace w4a4
