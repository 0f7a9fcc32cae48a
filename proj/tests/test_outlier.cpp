#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "json.hpp"
#include "oracle/reference.hpp"
#include "w4a4/errors.hpp"
#include "w4a4/outlier.hpp"

using namespace w4a4;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("w4a4_outlier_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

Tensor rows_of(const Tensor& x, std::size_t begin, std::size_t end) {
  Tensor out({end - begin, x.cols()});
  for (std::size_t r = begin; r < end; ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r - begin, c) = x.at(r, c);
  return out;
}

}  // namespace

TEST(ChannelStats, StreamingMatchesSingleBatch) {
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor({40, 6}, rng, 3.0);
  for (auto& v : x.data()) v += 1.5f;
  ChannelStats whole(6), split(6);
  whole.update(x);
  split.update(rows_of(x, 0, 13));
  split.update(rows_of(x, 13, 40));
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_NEAR(split.mean(j), whole.mean(j), 1e-6 * std::fabs(whole.mean(j)));
    EXPECT_NEAR(split.variance(j), whole.variance(j), 1e-6 * whole.variance(j));
    EXPECT_NEAR(split.kurtosis(j), whole.kurtosis(j), 1e-6 * whole.kurtosis(j));
    EXPECT_NEAR(split.mean_abs(j), whole.mean_abs(j), 1e-6 * whole.mean_abs(j));
  }
  EXPECT_EQ(split.n_tokens(), 40u);
}

TEST(ChannelStats, MatchesDirectMoments) {
  std::mt19937_64 rng(2);
  auto x = oracle::random_tensor({50, 3}, rng);
  ChannelStats st(3);
  st.update(rows_of(x, 0, 20));
  st.update(rows_of(x, 20, 50));
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> col;
    for (std::size_t r = 0; r < 50; ++r) col.push_back(x.at(r, j));
    double mu = 0.0;
    for (double v : col) mu += v;
    mu /= 50;
    double var = 0.0;
    for (double v : col) var += (v - mu) * (v - mu);
    EXPECT_NEAR(st.variance(j), var / 50, 1e-9);
    EXPECT_NEAR(st.kurtosis(j), oracle::kurtosis(col.data(), col.size()), 1e-6 * st.kurtosis(j));
  }
}

TEST(ChannelStats, ZerosAndConstants) {
  ChannelStats z(4);
  z.update(Tensor({5, 4}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(z.mean_abs(j), 0.0);

  Tensor x({7, 3});
  for (std::size_t r = 0; r < 7; ++r) x.at(r, 1) = 7.0f;
  ChannelStats st(3);
  st.update(x);
  EXPECT_EQ(st.mean_abs(1), 7.0);
  EXPECT_EQ(st.variance(1), 0.0);
  EXPECT_EQ(st.min(1), 7.0);
  EXPECT_EQ(st.max(1), 7.0);
}

TEST(ChannelStats, WidthMismatchThrows) {
  ChannelStats st(4);
  EXPECT_THROW(st.update(Tensor({2, 5})), InputError);
}

TEST(ChannelStats, JensenAndPermutationInvariance) {
  std::mt19937_64 rng(3);
  auto x = oracle::random_tensor({64, 16}, rng);
  for (std::size_t r = 0; r < 64; ++r) x.at(r, 5) += 2.0f;
  ChannelStats a(16);
  a.update(x);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_LE(std::fabs(a.mean(j)), a.mean_abs(j) + 1e-6);

  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor y({64, 16});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 16; ++c) y.at(r, c) = x.at(perm[r], c);
  ChannelStats b(16);
  b.update(y);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_NEAR(b.mean_abs(j), a.mean_abs(j), 1e-6 * a.mean_abs(j));
    EXPECT_NEAR(b.variance(j), a.variance(j), 1e-6 * a.variance(j));
    EXPECT_NEAR(b.kurtosis(j), a.kurtosis(j), 1e-6 * a.kurtosis(j));
  }
}

TEST(OutlierChannels, IidChannelsHaveNone) {
  std::mt19937_64 rng(4);
  ChannelStats st(256);
  st.update(oracle::random_tensor({512, 256}, rng));
  EXPECT_TRUE(outlier_channels(st).empty());
  EXPECT_EQ(outlier_fraction(st), 0.0);
}

TEST(OutlierChannels, ScaledChannelIsFlagged) {
  std::mt19937_64 rng(5);
  auto x = oracle::random_tensor({256, 64}, rng);
  for (std::size_t r = 0; r < 256; ++r) x.at(r, 9) *= 100.0f;
  ChannelStats st(64);
  st.update(x);
  EXPECT_EQ(outlier_channels(st), std::vector<std::size_t>{9});
  EXPECT_DOUBLE_EQ(outlier_fraction(st), 1.0 / 64);
  EXPECT_TRUE(outlier_channels(st, std::numeric_limits<double>::infinity()).empty());
}

TEST(OutlierChannels, ScaleEquivariant) {
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor({128, 32}, rng);
  for (std::size_t r = 0; r < 128; ++r) x.at(r, 3) *= 12.0f, x.at(r, 20) *= 9.0f;
  ChannelStats a(32);
  a.update(x);
  for (float alpha : {0.01f, 3.0f, 250.0f}) {
    Tensor y = x;
    for (auto& v : y.data()) v *= alpha;
    ChannelStats b(32);
    b.update(y);
    EXPECT_EQ(outlier_channels(b), outlier_channels(a));
  }
}

TEST(ActivationDump, RoundTripIsBitExact) {
  auto dir = scratch("roundtrip");
  std::mt19937_64 rng(7);
  ActivationDump d{"MLP_Input", 1, 40, "toy-baseline", oracle::random_tensor({5, 7}, rng)};
  d.value[3] = -0.0f;
  write_dump(dir / "x", d);
  auto back = read_dump(dir / "x.bin");
  EXPECT_EQ(back.site, d.site);
  EXPECT_EQ(back.layer, 1u);
  EXPECT_EQ(back.step, 40u);
  EXPECT_EQ(back.model_id, "toy-baseline");
  ASSERT_EQ(back.value.shape(), d.value.shape());
  EXPECT_EQ(std::memcmp(back.value.data().data(), d.value.data().data(), d.value.numel() * sizeof(float)), 0);

  std::ifstream in(dir / "x.bin", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 4), "ACTD");
  EXPECT_EQ(fs::file_size(dir / "x.bin"), 24u + 2 * 8 + 35 * 4);
}

TEST(ActivationDump, MalformedFilesThrow) {
  auto dir = scratch("malformed");
  ActivationDump d{"QKV_Input", 0, 1, "m", Tensor({2, 2}, 1.0f)};
  write_dump(dir / "a", d);
  fs::resize_file(dir / "a.bin", fs::file_size(dir / "a.bin") - 4);
  EXPECT_THROW(read_dump(dir / "a.bin"), InputError);

  write_dump(dir / "b", d);
  {
    std::fstream f(dir / "b.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(read_dump(dir / "b.bin"), InputError);

  write_dump(dir / "c", d);
  fs::remove(dir / "c.json");
  EXPECT_THROW(read_dump(dir / "c.bin"), InputError);
  EXPECT_THROW(read_dump(dir / "missing.bin"), InputError);
}

TEST(Trajectory, SingleStepGivesSingleRow) {
  auto dir = scratch("single");
  std::mt19937_64 rng(8);
  ActivationDump d{"QKV_Input", 0, 10, "m", oracle::random_tensor({16, 8}, rng)};
  write_dump(dump_path(dir / "dumps", 10, 0, d.site), d);
  auto rep = analyze_dumps(dir / "dumps");
  ASSERT_EQ(rep.steps, std::vector<std::size_t>{10});
  write_report(rep, dir / "reports");
  EXPECT_EQ(line_count(dir / "reports" / "summary.csv"), 2u);
  EXPECT_EQ(line_count(dir / "reports" / "channels.csv"), 1u + 8u);
  std::ifstream in(dir / "reports" / "channels.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,site,layer,channel,mean_abs,mean,variance,kurtosis,is_outlier");
  auto j = nlohmann::json::parse(std::ifstream(dir / "reports" / "report.json"));
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["trajectory"].size(), 1u);
}

TEST(Trajectory, GrowingChannelIsMonotone) {
  auto dir = scratch("growing");
  std::mt19937_64 rng(9);
  for (std::size_t step = 1; step <= 6; ++step) {
    auto x = oracle::random_tensor({32, 8}, rng);
    for (std::size_t r = 0; r < 32; ++r) x.at(r, 3) = static_cast<float>(step) * (r % 2 ? 1.0f : -1.0f);
    write_dump(dump_path(dir, step * 5, 0, "MLP_Input"), {"MLP_Input", 0, step * 5, "m", x});
  }
  auto rep = analyze_dumps(dir);
  std::vector<double> series;
  for (const auto& c : rep.channels)
    if (c.channel == 3) series.push_back(c.mean_abs);
  ASSERT_EQ(series.size(), 6u);
  for (std::size_t i = 1; i < series.size(); ++i) EXPECT_GT(series[i], series[i - 1]);
}

TEST(Trajectory, SiteNamesAndResidualTags) {
  auto dir = scratch("sites");
  for (const char* site : {"QKV_Input", "AttnProj_Input", "MLP_Input", "MLPProj_Input", "mlp_proj_out"}) {
    write_dump(dump_path(dir, 5, 0, site), {site, 0, 5, "m", Tensor({4, 4}, 1.0f)});
  }
  auto rep = analyze_dumps(dir);
  for (const auto& s : rep.sites) {
    const bool residual = s.site == "QKV_Input" || s.site == "MLP_Input";
    EXPECT_EQ(s.residual_stream, residual) << s.site;
    EXPECT_EQ(s.is_output, s.site == "mlp_proj_out") << s.site;
  }
}

TEST(Trajectory, InconsistentWidthsThrow) {
  auto dir = scratch("widths");
  write_dump(dump_path(dir, 1, 0, "QKV_Input"), {"QKV_Input", 0, 1, "m", Tensor({4, 4})});
  write_dump(dump_path(dir, 2, 0, "QKV_Input"), {"QKV_Input", 0, 2, "m", Tensor({4, 5})});
  EXPECT_THROW(analyze_dumps(dir), InputError);
  EXPECT_THROW(analyze_dumps(dir / "nothing"), InputError);
}
