#include "w4a4/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/kurtosis.hpp"
#include "w4a4/outlier.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace w4a4 {

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train.steps must be >= 1");
  if (batch == 0) throw ConfigError("train.batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(min_lr_frac >= 0.0 && min_lr_frac <= 1.0)) throw ConfigError("train.min_lr_frac must be in [0, 1]");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
  if (log_interval == 0) throw ConfigError("train.log_interval must be >= 1");
  if (probe_tokens == 0) throw ConfigError("train.probe_tokens must be >= 1");
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup > 0 && step <= cfg.warmup) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
  const std::size_t span = cfg.steps > cfg.warmup ? cfg.steps - cfg.warmup : 1;
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, cfg.warmup)) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cosine);
}

std::string MetricsRecord::to_json() const {
  json j;
  j["step"] = step;
  j["loss"] = loss;
  j["ce_loss"] = ce_loss;
  j["kurt_loss"] = kurt_loss;
  j["ppl"] = ppl;
  j["lr"] = lr;
  json c = json::object();
  for (const auto& [name, v] : clips) c[name] = {v.first, v.second};
  j["clips"] = c;
  j["outlier_fraction"] = outlier_fraction;
  return j.dump();
}

std::vector<std::string> kurtosis_output_ids(const ModelConfig& cfg) {
  std::vector<std::string> ids;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (SiteKind k : cfg.kurtosis_sites) ids.push_back(output_id(l, k));
  return ids;
}

double probe_outlier_fraction(Model& model, std::span<const std::int32_t> tokens, std::size_t batch) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t n = 0;
  ActivationTap tap = [&](std::size_t, std::string_view site, const Tensor& v) {
    if (!parse_site(site)) return;
    ChannelStats st(v.cols());
    st.update(v);
    total += outlier_fraction(st);
    ++n;
  };
  ForwardOptions opts;
  opts.tap = &tap;
  model.forward(tokens, batch, opts);
  return n ? total / static_cast<double>(n) : 0.0;
}

double eval_perplexity(Model& model, std::span<const std::int32_t> tokens, std::size_t max_tokens, bool integer_matmul) {
  const std::size_t len = model.config().seq_len;
  if (max_tokens && tokens.size() > max_tokens) tokens = tokens.first(max_tokens);
  if (tokens.size() < len + 1) {
    throw InputError("eval_perplexity: need at least " + std::to_string(len + 1) + " tokens, got " +
                     std::to_string(tokens.size()));
  }
  const std::size_t windows = (tokens.size() - 1) / len;
  constexpr std::size_t kChunk = 16;
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.integer_matmul = integer_matmul;
  double nll = 0.0;
  std::vector<std::int32_t> in, tgt;
  for (std::size_t w0 = 0; w0 < windows; w0 += kChunk) {
    const std::size_t nb = std::min(kChunk, windows - w0);
    in.assign(tokens.begin() + static_cast<std::ptrdiff_t>(w0 * len),
              tokens.begin() + static_cast<std::ptrdiff_t>((w0 + nb) * len));
    tgt.assign(tokens.begin() + static_cast<std::ptrdiff_t>(w0 * len + 1),
               tokens.begin() + static_cast<std::ptrdiff_t>((w0 + nb) * len + 1));
    auto fr = model.forward(in, nb, opts);
    nll += static_cast<double>(ops::cross_entropy(fr.logits, tgt).value().item()) * static_cast<double>(nb * len);
  }
  return std::exp(nll / static_cast<double>(windows * len));
}

namespace {

void write_dumps(Model& model, std::span<const std::int32_t> probe, std::size_t batch, const fs::path& dir,
                 std::size_t step, const std::string& model_id) {
  NoGradGuard no_grad;
  ActivationTap tap = [&](std::size_t layer, std::string_view site, const Tensor& v) {
    ActivationDump d{std::string(site), layer, step, model_id, v};
    write_dump(dump_path(dir, step, layer, d.site), d);
  };
  ForwardOptions opts;
  opts.tap = &tap;
  model.forward(probe, batch, opts);
}

}  // namespace

TrainResult train(Model& model, const TrainConfig& cfg, const Corpus& corpus, const std::string& model_id,
                  const RunPaths* run, TrainState* state, std::size_t until) {
  cfg.validate();
  const std::size_t last_step = until ? std::min(until, cfg.steps) : cfg.steps;
  const ModelConfig& mc = model.config();
  const std::size_t len = mc.seq_len;
  BatchSampler sampler(corpus.train, cfg.batch, len, cfg.seed);

  const std::size_t probe_batch = std::max<std::size_t>(1, cfg.probe_tokens / len);
  if (corpus.eval.size() < probe_batch * len) throw InputError("train: held-out split is smaller than the probe batch");
  std::span<const std::int32_t> probe(corpus.eval.data(), probe_batch * len);

  KurtosisConfig kcfg = mc.kurtosis;
  kcfg.sites = kurtosis_output_ids(mc);
  const bool use_kurtosis = kcfg.lambda > 0.0;

  auto params = model.parameters();
  TrainState local;
  TrainState& st = state ? *state : local;
  if (st.opt.m.empty()) {
    for (const auto& p : params) {
      st.opt.m.emplace_back(p.var->shape());
      st.opt.v.emplace_back(p.var->shape());
    }
  }
  if (st.opt.m.size() != params.size() || st.opt.v.size() != params.size()) {
    throw InputError("train: optimizer state does not match the model");
  }
  OptimizerState& opt = st.opt;
  if (!st.rng_state.empty()) sampler.set_rng_state(st.rng_state);

  std::ofstream metrics_out;
  if (run) {
    fs::create_directories(run->root);
    metrics_out.open(run->metrics(), st.step > 0 ? std::ios::app : std::ios::out);
    if (!metrics_out) throw InputError("cannot write " + run->metrics().string());
  }
  const std::size_t dump_every = cfg.effective_dump_interval();
  const double clip_lr_scale = cfg.clip_lr < 0.0 ? 1.0 : cfg.clip_lr / cfg.lr;

  TrainResult result;
  std::vector<std::int32_t> in, tgt;
  for (std::size_t step = st.step + 1; step <= last_step; ++step) {
    sampler.next(in, tgt);
    model.zero_grad();
    ForwardOptions fo;
    fo.collect_outputs = use_kurtosis;
    ForwardResult fr = model.forward(in, cfg.batch, fo);
    Var ce = ops::cross_entropy(fr.logits, tgt);
    Var loss = ce;
    double kurt = 0.0;
    if (use_kurtosis) {
      Var kl = kurtosis_loss(fr.outputs, kcfg);
      kurt = kl.value().item();
      loss = ops::add(ce, kl);
    }
    const double loss_v = loss.value().item();
    if (!std::isfinite(loss_v)) {
      if (run) save_checkpoint(run->checkpoints() / "diverged", model, model_id, step, opt, sampler.rng_state());
      throw NumericalError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss_v) + ")");
    }
    backward(loss);
    fr = ForwardResult{};

    double gnorm2 = 0.0;
    for (const auto& p : params) {
      if (!p.var->has_grad()) continue;
      for (float g : p.var->node()->grad.data()) gnorm2 += static_cast<double>(g) * g;
    }
    const double gnorm = std::sqrt(gnorm2);
    const double gscale = (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip) ? cfg.grad_clip / gnorm : 1.0;

    const double lr = lr_at(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var& v = *params[i].var;
      if (!v.has_grad()) continue;
      auto w = v.mutable_value().data();
      auto g = v.node()->grad.data();
      auto m = opt.m[i].data();
      auto s = opt.v[i].data();
      const double decay = params[i].decay ? cfg.weight_decay : 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]) * gscale;
        const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
        const double sk = cfg.beta2 * s[k] + (1.0 - cfg.beta2) * gk * gk;
        m[k] = static_cast<float>(mk);
        s[k] = static_cast<float>(sk);
        const double update = (mk / bc1) / (std::sqrt(sk / bc2) + cfg.adam_eps) + decay * w[k];
        w[k] = static_cast<float>(w[k] - lr * update);
      }
    }
    for (std::size_t i = 0; i < model.clips().size(); ++i) {
      if (model.clip_enabled()[i]) clip_optimizer_step(model.clips()[i], lr * clip_lr_scale);
    }

    const bool last = step == cfg.steps;
    st.step = step;
    if (step % cfg.log_interval == 0 || step == 1 || last) {
      MetricsRecord r;
      r.step = step;
      r.loss = loss_v;
      r.ce_loss = ce.value().item();
      r.kurt_loss = kurt;
      r.ppl = std::exp(r.ce_loss);
      r.lr = lr;
      for (std::size_t i = 0; i < model.clips().size(); ++i) {
        if (!model.clip_enabled()[i]) continue;
        const auto& c = model.clips()[i];
        r.clips.push_back({"layers." + std::to_string(i / 4) + "." + std::string(site_name(kAllSites[i % 4])),
                           {c.clip_lo, c.clip_hi}});
      }
      r.outlier_fraction = probe_outlier_fraction(model, probe, probe_batch);
      if (metrics_out.is_open()) metrics_out << r.to_json() << '\n' << std::flush;
      result.metrics.push_back(std::move(r));
    }
    if (run && (step % dump_every == 0 || last)) write_dumps(model, probe, probe_batch, run->dumps(), step, model_id);
    result.steps_done = step;
  }
  st.rng_state = sampler.rng_state();
  if (run) {
    save_checkpoint(last_step == cfg.steps ? run->final_checkpoint() : run->checkpoints() / ("step_" + std::to_string(last_step)),
                    model, model_id, last_step, opt, st.rng_state);
  }
  return result;
}

}  // namespace w4a4
