#include "w4a4/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "w4a4/errors.hpp"

namespace w4a4 {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

std::optional<TomlValue> parse_scalar(std::string_view s, std::string* err) {
  s = trim(s);
  if (s.empty()) {
    *err = "missing value";
    return std::nullopt;
  }
  if (s.front() == '"') {
    std::string out;
    for (std::size_t i = 1; i < s.size(); ++i) {
      const char c = s[i];
      if (c == '"') {
        if (!trim(s.substr(i + 1)).empty()) {
          *err = "trailing characters after string";
          return std::nullopt;
        }
        return out;
      }
      if (c == '\\') {
        if (++i >= s.size()) break;
        switch (s[i]) {
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          default: *err = "unsupported escape"; return std::nullopt;
        }
      } else {
        out += c;
      }
    }
    *err = "unterminated string";
    return std::nullopt;
  }
  if (s.front() == '\'') {
    const auto end = s.find('\'', 1);
    if (end == std::string_view::npos || !trim(s.substr(end + 1)).empty()) {
      *err = "malformed literal string";
      return std::nullopt;
    }
    return std::string(s.substr(1, end - 1));
  }
  if (s == "true") return true;
  if (s == "false") return false;
  std::string num;
  for (char c : s)
    if (c != '_') num += c;
  const char* b = num.data();
  const char* e = b + num.size();
  if (*b == '+') ++b;
  std::int64_t iv = 0;
  if (auto r = std::from_chars(b, e, iv); r.ec == std::errc() && r.ptr == e) return iv;
  double dv = 0.0;
  if (auto r = std::from_chars(b, e, dv); r.ec == std::errc() && r.ptr == e) return dv;
  *err = "cannot parse value '" + std::string(s) + "'";
  return std::nullopt;
}

// Strips a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == '\\' && quote == '"') ++i;
      else if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string type_name(const TomlValue& v) {
  switch (v.index()) {
    case 0: return "boolean";
    case 1: return "integer";
    case 2: return "float";
    default: return "string";
  }
}

std::size_t as_count(const std::string& key, const TomlValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v); i && *i >= 0) return static_cast<std::size_t>(*i);
  throw ConfigError(key + ": expected a nonnegative integer, got " + type_name(v));
}

double as_real(const std::string& key, const TomlValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  throw ConfigError(key + ": expected a number, got " + type_name(v));
}

bool as_bool(const std::string& key, const TomlValue& v) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  throw ConfigError(key + ": expected true or false, got " + type_name(v));
}

std::string as_string(const std::string& key, const TomlValue& v) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  throw ConfigError(key + ": expected a string, got " + type_name(v));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::string fmt_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&, const TomlValue&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define W4A4_COUNT(NAME, FIELD)                                                                 \
  Key {                                                                                         \
    NAME, [](RunConfig& c, const std::string& k, const TomlValue& v) { c.FIELD = as_count(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                              \
  }
#define W4A4_REAL(NAME, FIELD)                                                                 \
  Key {                                                                                        \
    NAME, [](RunConfig& c, const std::string& k, const TomlValue& v) { c.FIELD = as_real(k, v); }, \
        [](const RunConfig& c) { return fmt_real(c.FIELD); }                                   \
  }
#define W4A4_BOOL(NAME, FIELD)                                                                 \
  Key {                                                                                        \
    NAME, [](RunConfig& c, const std::string& k, const TomlValue& v) { c.FIELD = as_bool(k, v); }, \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }             \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"run.name", [](RunConfig& c, const std::string& k, const TomlValue& v) { c.name = as_string(k, v); },
          [](const RunConfig& c) { return quote(c.name); }},
      Key{"data.corpus", [](RunConfig& c, const std::string& k, const TomlValue& v) { c.corpus = as_string(k, v); },
          [](const RunConfig& c) { return quote(c.corpus.string()); }},
      W4A4_REAL("data.eval_fraction", eval_fraction),
      W4A4_COUNT("data.eval_tokens", eval_tokens),
      W4A4_COUNT("model.n_layers", model.n_layers),
      W4A4_COUNT("model.d_model", model.d_model),
      W4A4_COUNT("model.n_heads", model.n_heads),
      W4A4_COUNT("model.seq_len", model.seq_len),
      W4A4_BOOL("model.attn_scale", model.attn_scale),
      W4A4_BOOL("model.literal_mlp_input", model.literal_mlp_input),
      W4A4_REAL("model.init_std", model.init_std),
      W4A4_COUNT("model.seed", model.seed),
      W4A4_BOOL("qat.enabled", model.qat.enabled),
      Key{"qat.bits",
          [](RunConfig& c, const std::string& k, const TomlValue& v) {
            c.model.qat.bits = static_cast<int>(std::min<std::size_t>(as_count(k, v), 64));
          },
          [](const RunConfig& c) { return std::to_string(c.model.qat.bits); }},
      Key{"qat.sites",
          [](RunConfig& c, const std::string& k, const TomlValue& v) {
            std::array<bool, 4> on = {false, false, false, false};
            for (const auto& s : split_list(as_string(k, v))) {
              auto site = parse_site(s);
              if (!site) throw ConfigError(k + ": unknown site '" + s + "'");
              on[static_cast<int>(*site)] = true;
            }
            c.model.qat.sites = on;
          },
          [](const RunConfig& c) {
            std::string s;
            for (SiteKind k : kAllSites) {
              if (!c.model.qat.sites[static_cast<int>(k)]) continue;
              if (!s.empty()) s += ',';
              s += site_name(k);
            }
            return quote(s);
          }},
      W4A4_BOOL("qat.align_zero", model.qat.align_zero),
      W4A4_REAL("qat.clip_init", model.qat.clip_init),
      W4A4_REAL("qat.lower_sign", model.qat.lower_sign),
      W4A4_REAL("kurtosis.lambda", model.kurtosis.lambda),
      W4A4_REAL("kurtosis.epsilon", model.kurtosis.epsilon),
      Key{"kurtosis.sites",
          [](RunConfig& c, const std::string& k, const TomlValue& v) {
            std::vector<SiteKind> out;
            for (const auto& s : split_list(as_string(k, v))) {
              auto o = parse_output(s);
              if (!o) throw ConfigError(k + ": unknown output '" + s + "'");
              out.push_back(*o);
            }
            c.model.kurtosis_sites = out;
          },
          [](const RunConfig& c) {
            std::string s;
            for (SiteKind k : c.model.kurtosis_sites) {
              if (!s.empty()) s += ',';
              s += output_name(k);
            }
            return quote(s);
          }},
      W4A4_COUNT("train.steps", train.steps),
      W4A4_COUNT("train.batch", train.batch),
      W4A4_REAL("train.lr", train.lr),
      W4A4_REAL("train.min_lr_frac", train.min_lr_frac),
      W4A4_COUNT("train.warmup", train.warmup),
      W4A4_REAL("train.weight_decay", train.weight_decay),
      W4A4_REAL("train.beta1", train.beta1),
      W4A4_REAL("train.beta2", train.beta2),
      W4A4_REAL("train.grad_clip", train.grad_clip),
      W4A4_REAL("train.clip_lr", train.clip_lr),
      W4A4_COUNT("train.log_interval", train.log_interval),
      W4A4_COUNT("train.dump_interval", train.dump_interval),
      W4A4_COUNT("train.probe_tokens", train.probe_tokens),
      W4A4_COUNT("train.seed", train.seed),
      W4A4_COUNT("ptq.calib_tokens", calib_tokens),
      W4A4_REAL("ptq.damping", damping),
  };
  return table;
}

#undef W4A4_COUNT
#undef W4A4_REAL
#undef W4A4_BOOL

const Key& find_key(const std::string& key) {
  for (const auto& k : keys())
    if (key == k.name) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::map<std::string, TomlValue> parse_toml(std::string_view text) {
  std::map<std::string, TomlValue> out;
  std::string table;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = trim(strip_comment(text.substr(pos, nl - pos)));
    pos = nl + 1;
    ++line_no;
    auto fail = [&](const std::string& msg) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + msg);
    };
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed table header");
      table = std::string(trim(line.substr(1, line.size() - 2)));
      if (!valid_key(table)) fail("malformed table name '" + table + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("expected key = value");
    std::string key(trim(line.substr(0, eq)));
    if (!valid_key(key)) fail("malformed key '" + key + "'");
    std::string err;
    auto v = parse_scalar(line.substr(eq + 1), &err);
    if (!v) fail(err);
    const std::string full = table.empty() ? key : table + "." + key;
    if (!out.emplace(full, *v).second) fail("duplicate key '" + full + "'");
  }
  return out;
}

void RunConfig::set(const std::string& key, const TomlValue& value) { find_key(key).set(*this, key, value); }

void RunConfig::set(const std::string& key, const std::string& value) {
  const Key& k = find_key(key);
  std::string err;
  auto v = parse_scalar(value, &err);
  // Bare words are accepted as strings on the command line.
  if (!v) v = std::string(trim(value));
  k.set(*this, key, *v);
}

std::string RunConfig::to_toml() const {
  std::string out;
  std::string table;
  for (const auto& k : keys()) {
    std::string_view name = k.name;
    const auto dot = name.find('.');
    const std::string t(name.substr(0, dot));
    if (t != table) {
      if (!out.empty()) out += '\n';
      out += "[" + t + "]\n";
      table = t;
    }
    out += std::string(name.substr(dot + 1)) + " = " + k.get(*this) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  if (corpus.empty()) throw ConfigError("data.corpus: no corpus path given");
  if (!std::filesystem::is_regular_file(corpus)) throw ConfigError("data.corpus: file '" + corpus.string() + "' not found");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("data.eval_fraction must be in (0, 1)");
  if (model.vocab_size != 256) throw ConfigError("model.vocab_size must be 256 (byte tokens)");
  model.validate();
  train.validate();
  if (!(damping > 0.0)) throw ConfigError("ptq.damping must be > 0");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  for (const auto& [k, v] : parse_toml(ss.str())) cfg.set(k, v);
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    cfg.set(std::string(trim(std::string_view(o).substr(0, eq))), o.substr(eq + 1));
  }
}

}  // namespace w4a4
