#include "w4a4/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>

#include "w4a4/errors.hpp"
#include "w4a4/ptq.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace w4a4 {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

json model_config_to_json(const ModelConfig& c) {
  json sites = json::array();
  for (SiteKind k : kAllSites)
    if (c.qat.sites[static_cast<int>(k)]) sites.push_back(site_name(k));
  json ksites = json::array();
  for (SiteKind k : c.kurtosis_sites) ksites.push_back(output_name(k));
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},
          {"seq_len", c.seq_len},
          {"attn_scale", c.attn_scale},
          {"literal_mlp_input", c.literal_mlp_input},
          {"init_std", c.init_std},
          {"seed", c.seed},
          {"qat",
           {{"enabled", c.qat.enabled},
            {"bits", c.qat.bits},
            {"sites", sites},
            {"align_zero", c.qat.align_zero},
            {"clip_init", c.qat.clip_init},
            {"lower_sign", c.qat.lower_sign}}},
          {"kurtosis", {{"lambda", c.kurtosis.lambda}, {"epsilon", c.kurtosis.epsilon}, {"sites", ksites}}}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.attn_scale = j.at("attn_scale").get<bool>();
    c.literal_mlp_input = j.at("literal_mlp_input").get<bool>();
    c.init_std = j.at("init_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& q = j.at("qat");
    c.qat.enabled = q.at("enabled").get<bool>();
    c.qat.bits = q.at("bits").get<int>();
    c.qat.sites = {false, false, false, false};
    for (const auto& s : q.at("sites")) {
      auto k = parse_site(s.get<std::string>());
      if (!k) throw InputError("checkpoint: unknown site " + s.get<std::string>());
      c.qat.sites[static_cast<int>(*k)] = true;
    }
    c.qat.align_zero = q.at("align_zero").get<bool>();
    c.qat.clip_init = q.at("clip_init").get<double>();
    c.qat.lower_sign = q.at("lower_sign").get<double>();
    const json& k = j.at("kurtosis");
    c.kurtosis.lambda = k.at("lambda").get<double>();
    c.kurtosis.epsilon = k.at("epsilon").get<double>();
    for (const auto& s : k.at("sites")) {
      auto o = parse_output(s.get<std::string>());
      if (!o) throw InputError("checkpoint: unknown output " + s.get<std::string>());
      c.kurtosis_sites.push_back(*o);
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

namespace {

fs::path with_ext(fs::path p, const char* ext) {
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  p += ext;
  return p;
}

class BlobWriter {
 public:
  explicit BlobWriter(const fs::path& p) : os_(p, std::ios::binary) {
    if (!os_) throw InputError("cannot write " + p.string());
  }
  json tensor(const std::string& name, const Tensor& t) {
    json e = {{"name", name}, {"shape", t.shape()}, {"offset", offset_}, {"nbytes", t.numel() * sizeof(float)}};
    write(t.data().data(), t.numel() * sizeof(float));
    return e;
  }
  std::pair<std::size_t, std::size_t> bytes(const std::vector<std::uint8_t>& b) {
    const std::size_t off = offset_;
    write(b.data(), b.size());
    return {off, b.size()};
  }
  void close() {
    os_.close();
    if (!os_) throw InputError("failed writing checkpoint blob");
  }

 private:
  void write(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    offset_ += n;
  }
  std::ofstream os_;
  std::size_t offset_ = 0;
};

json plan_to_json(const PTQPlan& p) {
  return {{"weight_bits", p.weight_bits},
          {"weight_method", to_string(p.weight_method)},
          {"act_bits", p.act_bits},
          {"calib_tokens", p.calib_tokens},
          {"damping", p.damping}};
}

PTQPlan plan_from_json(const json& j) {
  PTQPlan p;
  p.weight_bits = j.at("weight_bits").get<int>();
  p.weight_method = parse_weight_method(j.at("weight_method").get<std::string>());
  p.act_bits = j.at("act_bits").get<int>();
  p.calib_tokens = j.at("calib_tokens").get<std::size_t>();
  p.damping = j.at("damping").get<double>();
  return p;
}

}  // namespace

void save_checkpoint(const fs::path& base, Model& model, const std::string& model_id, std::size_t step,
                     const OptimizerState& opt, const std::string& rng_state) {
  const fs::path bin = with_ext(base, ".bin"), manifest = with_ext(base, ".json");
  if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
  auto params = model.parameters();
  if (!opt.m.empty() && (opt.m.size() != params.size() || opt.v.size() != params.size())) {
    throw InputError("save_checkpoint: optimizer state does not match the parameter list");
  }

  json j;
  j["checkpoint_version"] = kCheckpointVersion;
  j["model_id"] = model_id;
  j["step"] = step;
  j["config"] = model_config_to_json(model.config());
  j["rng_state"] = rng_state;

  BlobWriter w(bin);
  json tensors = json::array();
  for (const auto& p : params) tensors.push_back(w.tensor(p.name, p.var->value()));
  j["tensors"] = tensors;
  json moments = json::array();
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    moments.push_back(w.tensor("adam.m." + params[i].name, opt.m[i]));
    moments.push_back(w.tensor("adam.v." + params[i].name, opt.v[i]));
  }
  j["optimizer"] = moments;

  json clips = json::array();
  for (std::size_t i = 0; i < model.clips().size(); ++i) {
    const ClipParam& c = model.clips()[i];
    clips.push_back({{"layer", i / 4},
                     {"site", site_name(kAllSites[i % 4])},
                     {"enabled", static_cast<bool>(model.clip_enabled()[i])},
                     {"clip_lo", c.clip_lo},
                     {"clip_hi", c.clip_hi},
                     {"bits", c.bits}});
  }
  j["clips"] = clips;

  if (const auto& plan = model.ptq_plan()) {
    j["ptq_version"] = kPtqVersion;
    j["plan"] = plan_to_json(*plan);
    json layers = json::array();
    for (const auto& [name, q] : model.quantized_layers()) {
      auto [off, n] = w.bytes(q.packed.bytes);
      layers.push_back({{"name", name},
                        {"shape", q.shape},
                        {"bits", q.packed.bits},
                        {"method", to_string(q.method)},
                        {"scales", q.scales},
                        {"zero_points", q.zero_points},
                        {"offset", off},
                        {"nbytes", n}});
    }
    j["quantized_layers"] = layers;
  }
  w.close();

  std::ofstream ms(manifest);
  if (!ms) throw InputError("cannot write " + manifest.string());
  ms << j.dump(1) << '\n';
  if (!ms) throw InputError("failed writing " + manifest.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path bin = with_ext(path, ".bin"), manifest = with_ext(path, ".json");
  std::ifstream ms(manifest);
  if (!ms) throw InputError("checkpoint manifest " + manifest.string() + " not found");
  std::ifstream bs(bin, std::ios::binary | std::ios::ate);
  if (!bs) throw InputError("checkpoint blob " + bin.string() + " not found");
  const auto blob_size = static_cast<std::size_t>(bs.tellg());
  std::vector<char> blob(blob_size);
  bs.seekg(0);
  bs.read(blob.data(), static_cast<std::streamsize>(blob_size));

  Checkpoint ck;
  try {
    json j;
    ms >> j;
    if (j.at("checkpoint_version").get<int>() != kCheckpointVersion) {
      throw InputError("checkpoint " + manifest.string() + ": unsupported version");
    }
    ck.model = std::make_unique<Model>(model_config_from_json(j.at("config")));
    ck.model_id = j.at("model_id").get<std::string>();
    ck.step = j.at("step").get<std::size_t>();
    ck.rng_state = j.at("rng_state").get<std::string>();

    auto read_bytes = [&](const json& e, std::size_t expect) -> const char* {
      const auto off = e.at("offset").get<std::size_t>(), n = e.at("nbytes").get<std::size_t>();
      if (n != expect || off + n > blob_size) throw InputError("checkpoint " + bin.string() + ": bad tensor extent");
      return blob.data() + off;
    };
    auto read_tensor = [&](const json& e) {
      Tensor t(e.at("shape").get<Shape>());
      std::memcpy(t.data().data(), read_bytes(e, t.numel() * sizeof(float)), t.numel() * sizeof(float));
      return t;
    };

    std::map<std::string, const json*> by_name;
    for (const auto& e : j.at("tensors")) by_name[e.at("name").get<std::string>()] = &e;
    auto params = ck.model->parameters();
    for (auto& p : params) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw InputError("checkpoint: missing tensor " + p.name);
      Tensor t = read_tensor(*it->second);
      if (!t.same_shape(p.var->value())) throw InputError("checkpoint: shape mismatch for " + p.name);
      p.var->mutable_value() = std::move(t);
    }
    const auto& moments = j.at("optimizer");
    if (!moments.empty()) {
      if (moments.size() != 2 * params.size()) throw InputError("checkpoint: optimizer state size mismatch");
      for (std::size_t i = 0; i < params.size(); ++i) {
        ck.opt.m.push_back(read_tensor(moments[2 * i]));
        ck.opt.v.push_back(read_tensor(moments[2 * i + 1]));
      }
    }

    const auto& clips = j.at("clips");
    if (clips.size() != ck.model->clips().size()) throw InputError("checkpoint: clip count mismatch");
    for (std::size_t i = 0; i < clips.size(); ++i) {
      ClipParam& c = ck.model->clips()[i];
      c.clip_lo = clips[i].at("clip_lo").get<double>();
      c.clip_hi = clips[i].at("clip_hi").get<double>();
      c.bits = clips[i].at("bits").get<int>();
      ck.model->clip_enabled()[i] = clips[i].at("enabled").get<bool>();
    }

    if (j.contains("ptq_version")) {
      if (j.at("ptq_version").get<int>() != kPtqVersion) throw InputError("checkpoint: unsupported ptq_version");
      const PTQPlan plan = plan_from_json(j.at("plan"));
      plan.validate();
      for (const auto& e : j.at("quantized_layers")) {
        QuantizedLayer q;
        q.shape = e.at("shape").get<Shape>();
        if (q.shape.size() != 2) throw InputError("checkpoint: quantized layer is not rank 2");
        q.method = parse_weight_method(e.at("method").get<std::string>());
        q.scales = e.at("scales").get<std::vector<double>>();
        q.zero_points = e.at("zero_points").get<std::vector<std::int32_t>>();
        q.packed.bits = e.at("bits").get<int>();
        q.packed.rows = q.shape[0];
        q.packed.cols = q.shape[1];
        const std::size_t n = PackedIntMatrix::byte_count(q.shape[0] * q.shape[1], q.packed.bits);
        const char* src = read_bytes(e, n);
        q.packed.bytes.assign(src, src + n);
        q.codes().validate();
        ck.model->quantized_layers().emplace_back(e.at("name").get<std::string>(), std::move(q));
      }
      configure_activation_path(*ck.model, plan.act_bits);
      ck.model->set_ptq_plan(plan);
    }
  } catch (const json::exception& e) {
    throw InputError("checkpoint " + manifest.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw InputError("checkpoint " + manifest.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace w4a4
