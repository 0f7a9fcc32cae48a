#include "w4a4/outlier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "json.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace w4a4 {

static_assert(std::endian::native == std::endian::little, "dump IO assumes a little-endian host");

ChannelStats::ChannelStats(std::size_t channels)
    : abs_sum_(channels, 0.0),
      mean_(channels, 0.0),
      m2_(channels, 0.0),
      m3_(channels, 0.0),
      m4_(channels, 0.0),
      min_(channels, std::numeric_limits<double>::infinity()),
      max_(channels, -std::numeric_limits<double>::infinity()) {}

void ChannelStats::update(const Tensor& x) {
  require_rank2(x, "ChannelStats::update");
  if (x.cols() != channels()) throw InputError("ChannelStats::update: channel count mismatch");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (rows == 0) return;
  ChannelStats b(cols);
  b.n_ = rows;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = x.at(r, j);
      b.mean_[j] += v;
      b.abs_sum_[j] += std::fabs(v);
      b.min_[j] = std::min(b.min_[j], v);
      b.max_[j] = std::max(b.max_[j], v);
    }
  }
  for (auto& m : b.mean_) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = x.at(r, j) - b.mean_[j];
      const double d2 = d * d;
      b.m2_[j] += d2;
      b.m3_[j] += d2 * d;
      b.m4_[j] += d2 * d2;
    }
  }
  merge(b);
}

void ChannelStats::merge(const ChannelStats& o) {
  if (o.channels() != channels()) throw InputError("ChannelStats::merge: channel count mismatch");
  if (o.n_ == 0) return;
  if (n_ == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_), n = na + nb;
  for (std::size_t j = 0; j < channels(); ++j) {
    const double d = o.mean_[j] - mean_[j];
    const double d2 = d * d;
    const double m2 = m2_[j] + o.m2_[j] + d2 * na * nb / n;
    const double m3 = m3_[j] + o.m3_[j] + d2 * d * na * nb * (na - nb) / (n * n) +
                      3.0 * d * (na * o.m2_[j] - nb * m2_[j]) / n;
    const double m4 = m4_[j] + o.m4_[j] + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                      6.0 * d2 * (na * na * o.m2_[j] + nb * nb * m2_[j]) / (n * n) +
                      4.0 * d * (na * o.m3_[j] - nb * m3_[j]) / n;
    mean_[j] += d * nb / n;
    m2_[j] = m2;
    m3_[j] = m3;
    m4_[j] = m4;
    abs_sum_[j] += o.abs_sum_[j];
    min_[j] = std::min(min_[j], o.min_[j]);
    max_[j] = std::max(max_[j], o.max_[j]);
  }
  n_ += o.n_;
}

double ChannelStats::kurtosis(std::size_t j, double epsilon) const {
  const double var = variance(j);
  return m4_[j] / (var * var + epsilon);
}

std::vector<std::size_t> outlier_channels(const ChannelStats& stats, double factor) {
  std::vector<std::size_t> out;
  const std::size_t c = stats.channels();
  if (c == 0 || stats.n_tokens() == 0) return out;
  double grand = 0.0;
  for (std::size_t j = 0; j < c; ++j) grand += stats.mean_abs(j);
  grand /= static_cast<double>(c);
  for (std::size_t j = 0; j < c; ++j)
    if (stats.mean_abs(j) > factor * grand) out.push_back(j);
  return out;
}

double outlier_fraction(const ChannelStats& stats, double factor) {
  if (stats.channels() == 0) return 0.0;
  return static_cast<double>(outlier_channels(stats, factor).size()) / static_cast<double>(stats.channels());
}

double mean_token_kurtosis(const Tensor& x, double epsilon) {
  require_rank2(x, "mean_token_kurtosis");
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) total += kurtosis(x.row(r), epsilon);
  return total / static_cast<double>(x.rows());
}

// ---- dump IO ----

namespace {

constexpr char kMagic[8] = {'A', 'C', 'T', 'D', 0, 0, 0, 0};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& p) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw InputError("dump " + p.string() + ": truncated header");
  return v;
}

}  // namespace

fs::path dump_path(const fs::path& dir, std::size_t step, std::size_t layer, const std::string& site) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu", step);
  return dir / buf / ("L" + std::to_string(layer) + "_" + site + ".bin");
}

void write_dump(const fs::path& base, const ActivationDump& dump) {
  fs::path bin = base;
  bin.replace_extension(".bin");
  fs::path meta = base;
  meta.replace_extension(".json");
  if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
  {
    std::ofstream os(bin, std::ios::binary);
    if (!os) throw InputError("cannot write " + bin.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kDumpVersion);
    put<std::uint32_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(dump.value.rank()));
    put<std::uint32_t>(os, 0);
    for (auto d : dump.value.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(dump.value.data().data()),
             static_cast<std::streamsize>(dump.value.numel() * sizeof(float)));
    if (!os) throw InputError("failed writing " + bin.string());
  }
  json j = {{"dump_version", kDumpVersion}, {"site", dump.site},         {"layer", dump.layer},
            {"step", dump.step},            {"model_id", dump.model_id}, {"shape", dump.value.shape()},
            {"dtype", "f32"}};
  std::ofstream ms(meta);
  if (!ms) throw InputError("cannot write " + meta.string());
  ms << j.dump(2) << '\n';
}

ActivationDump read_dump(const fs::path& bin_path) {
  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw InputError("cannot open dump " + bin_path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw InputError("dump " + bin_path.string() + ": bad magic");
  }
  const auto version = get<std::uint32_t>(is, bin_path);
  if (version != kDumpVersion) throw InputError("dump " + bin_path.string() + ": unsupported version");
  if (get<std::uint32_t>(is, bin_path) != 1) throw InputError("dump " + bin_path.string() + ": unsupported dtype");
  const auto n_dims = get<std::uint32_t>(is, bin_path);
  (void)get<std::uint32_t>(is, bin_path);
  if (n_dims > 8) throw InputError("dump " + bin_path.string() + ": implausible rank");
  Shape shape(n_dims);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, bin_path));
  std::vector<float> data(numel_of(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw InputError("dump " + bin_path.string() + ": truncated payload");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw InputError("dump " + bin_path.string() + ": trailing bytes");

  fs::path meta = bin_path;
  meta.replace_extension(".json");
  std::ifstream ms(meta);
  if (!ms) throw InputError("dump " + bin_path.string() + ": missing sidecar " + meta.string());
  json j;
  try {
    ms >> j;
  } catch (const json::exception& e) {
    throw InputError("dump sidecar " + meta.string() + ": " + e.what());
  }
  ActivationDump d;
  try {
    d.site = j.at("site").get<std::string>();
    d.layer = j.at("layer").get<std::size_t>();
    d.step = j.at("step").get<std::size_t>();
    d.model_id = j.at("model_id").get<std::string>();
    if (j.at("shape").get<Shape>() != shape) throw InputError("dump " + bin_path.string() + ": sidecar shape mismatch");
  } catch (const json::exception& e) {
    throw InputError("dump sidecar " + meta.string() + ": " + e.what());
  }
  d.value = Tensor(std::move(shape), std::move(data));
  return d;
}

// ---- reports ----

double TrajectoryReport::site_outlier_fraction(std::size_t step, const std::string& site) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : sites) {
    if (s.step == step && s.site == site) {
      total += s.outlier_fraction;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

double TrajectoryReport::mean_outlier_fraction(std::size_t step) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : sites) {
    if (s.step == step && !s.is_output) {
      total += s.outlier_fraction;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

double TrajectoryReport::mean_output_kurtosis(std::size_t step) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : sites) {
    if (s.step == step && s.is_output) {
      total += s.mean_token_kurtosis;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

TrajectoryReport analyze_dumps(const fs::path& dump_dir, double factor) {
  if (!fs::is_directory(dump_dir)) throw InputError("dump directory " + dump_dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dump_dir))
    if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
  if (files.empty()) throw InputError("no activation dumps under " + dump_dir.string());

  std::vector<ActivationDump> dumps;
  dumps.reserve(files.size());
  for (const auto& f : files) dumps.push_back(read_dump(f));
  std::sort(dumps.begin(), dumps.end(), [](const ActivationDump& a, const ActivationDump& b) {
    return std::tie(a.step, a.layer, a.site) < std::tie(b.step, b.layer, b.site);
  });

  TrajectoryReport rep;
  rep.model_id = dumps.front().model_id;
  std::map<std::pair<std::string, std::size_t>, std::size_t> widths;
  for (const auto& d : dumps) {
    auto [it, fresh] = widths.emplace(std::make_pair(d.site, d.layer), d.value.cols());
    if (!fresh && it->second != d.value.cols()) {
      throw InputError("dumps for layer " + std::to_string(d.layer) + " " + d.site + " change width across steps");
    }
    if (rep.steps.empty() || rep.steps.back() != d.step) rep.steps.push_back(d.step);
    const Tensor& x = d.value;
    if (x.rank() != 2) throw InputError("dump for " + d.site + " is not rank 2");
    ChannelStats st(x.cols());
    st.update(x);
    const auto outl = outlier_channels(st, factor);
    std::vector<bool> flag(x.cols(), false);
    for (auto j : outl) flag[j] = true;

    SiteSummary s;
    s.step = d.step;
    s.site = d.site;
    s.layer = d.layer;
    s.is_output = parse_output(d.site).has_value();
    if (auto k = parse_site(d.site)) s.residual_stream = is_residual_stream(*k);
    s.n_tokens = x.rows();
    s.n_channels = x.cols();
    s.n_outliers = outl.size();
    s.outlier_fraction = x.cols() ? static_cast<double>(outl.size()) / static_cast<double>(x.cols()) : 0.0;
    s.mean_token_kurtosis = mean_token_kurtosis(x);
    rep.sites.push_back(s);

    for (std::size_t j = 0; j < x.cols(); ++j) {
      rep.channels.push_back(
          {d.step, d.site, d.layer, j, st.mean_abs(j), st.mean(j), st.variance(j), st.kurtosis(j), flag[j]});
    }
  }
  return rep;
}

void write_report(const TrajectoryReport& rep, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto open = [&](const char* name) {
    std::ofstream os(out_dir / name);
    if (!os) throw InputError("cannot write " + (out_dir / name).string());
    os.precision(9);
    return os;
  };
  {
    auto os = open("channels.csv");
    os << "step,site,layer,channel,mean_abs,mean,variance,kurtosis,is_outlier\n";
    for (const auto& c : rep.channels) {
      os << c.step << ',' << c.site << ',' << c.layer << ',' << c.channel << ',' << c.mean_abs << ',' << c.mean << ','
         << c.variance << ',' << c.kurtosis << ',' << (c.is_outlier ? 1 : 0) << '\n';
    }
  }
  {
    auto os = open("summary.csv");
    os << "step,site,layer,is_output,residual_stream,n_tokens,n_channels,n_outliers,outlier_fraction,"
          "mean_token_kurtosis\n";
    for (const auto& s : rep.sites) {
      os << s.step << ',' << s.site << ',' << s.layer << ',' << (s.is_output ? 1 : 0) << ','
         << (s.residual_stream ? 1 : 0) << ',' << s.n_tokens << ',' << s.n_channels << ',' << s.n_outliers << ','
         << s.outlier_fraction << ',' << s.mean_token_kurtosis << '\n';
    }
  }
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["model_id"] = rep.model_id;
  j["steps"] = rep.steps;
  j["final_step"] = rep.final_step();
  json per_step = json::array();
  for (auto step : rep.steps) {
    json e = {{"step", step},
              {"mean_outlier_fraction", rep.mean_outlier_fraction(step)},
              {"mean_output_kurtosis", rep.mean_output_kurtosis(step)}};
    json fr = json::object();
    for (SiteKind k : kAllSites) fr[std::string(site_name(k))] = rep.site_outlier_fraction(step, std::string(site_name(k)));
    e["site_outlier_fraction"] = fr;
    per_step.push_back(e);
  }
  j["trajectory"] = per_step;
  auto os = open("report.json");
  os << j.dump(2) << '\n';
}

}  // namespace w4a4
