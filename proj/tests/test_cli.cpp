#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "w4a4/checkpoint.hpp"
#include "w4a4/commands.hpp"

using namespace w4a4;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "w4a4_cli";
const std::string kCorpus = W4A4_TEST_DATA_DIR "/corpus.txt";

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::string& args) {
  fs::create_directories(kRoot);
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(W4A4_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
  fs::create_directories(kRoot);
  const auto p = kRoot / (name + ".toml");
  std::ofstream(p) << "[run]\nname = \"" << name << "\"\n[data]\ncorpus = \"" << kCorpus
                   << "\"\neval_tokens = 1024\n[model]\nn_layers = 2\nd_model = 16\nn_heads = 2\nseq_len = 16\n"
                   << "[train]\nsteps = 6\nbatch = 2\nlog_interval = 2\nprobe_tokens = 64\n[ptq]\ncalib_tokens = 256\n"
                   << extra;
  return p;
}

// Trains the tiny run once per process and returns its directory.
const fs::path& tiny_run() {
  static const fs::path dir = [] {
    auto d = kRoot / "runs" / "tiny";
    fs::remove_all(d);
    auto r = cli("train --config " + write_config("tiny").string() + " --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  EXPECT_EQ(cli("").code, kExitConfig);
  EXPECT_EQ(cli("frobnicate").code, kExitConfig);
}

TEST(Cli, MissingCorpusExitsWithConfigError) {
  auto cfg = kRoot / "nocorpus.toml";
  fs::create_directories(kRoot);
  std::ofstream(cfg) << "[data]\ncorpus = \"/nonexistent/text.txt\"\n";
  auto r = cli("train --config " + cfg.string() + " --out " + (kRoot / "runs" / "nocorpus").string());
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("data.corpus"), std::string::npos) << r.err;
}

TEST(Cli, UnknownOverrideExitsWithConfigError) {
  auto r = cli("train --config " + write_config("bad").string() + " --set train.stepz=3");
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("train.stepz"), std::string::npos) << r.err;
}

TEST(Cli, TrainWritesRunDirectory) {
  RunPaths run{tiny_run()};
  EXPECT_TRUE(fs::exists(run.config()));
  EXPECT_TRUE(fs::exists(run.metrics()));
  EXPECT_TRUE(fs::exists(run.final_checkpoint().string() + ".json"));
  EXPECT_TRUE(fs::exists(run.reports() / "report.json"));
  std::ifstream in(run.metrics());
  std::string line;
  std::size_t n = 0;
  for (; std::getline(in, line); ++n) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "loss", "ce_loss", "kurt_loss", "ppl", "lr", "clips", "outlier_fraction"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, 4u);
}

TEST(Cli, IdentityPtqIsPassThrough) {
  const auto ck = (RunPaths{tiny_run()}.final_checkpoint()).string();
  auto r = cli("ptq " + ck + " --wbits 16 --wmethod none --abits 16 --out " + (kRoot / "id").string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto a = cli("eval " + ck + " --corpus " + kCorpus + " --max-tokens 2048");
  auto b = cli("eval " + (kRoot / "id").string() + " --corpus " + kCorpus + " --max-tokens 2048");
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(nlohmann::json::parse(a.out)["perplexity"], nlohmann::json::parse(b.out)["perplexity"]);
}

TEST(Cli, InvalidPlanExitsWithConfigError) {
  const auto ck = (RunPaths{tiny_run()}.final_checkpoint()).string();
  EXPECT_EQ(cli("ptq " + ck + " --wbits 4 --wmethod none").code, kExitConfig);
  EXPECT_EQ(cli("ptq " + ck + " --wbits 8 --wmethod rtn").code, kExitConfig);
  auto r = cli("ptq " + ck + " --wbits 4 --wmethod gptq");
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("--calib"), std::string::npos);
}

TEST(Cli, EvalIsDeterministic) {
  const auto ck = (RunPaths{tiny_run()}.final_checkpoint()).string();
  auto q = cli("ptq " + ck + " --wbits 4 --wmethod gptq --abits 4 --calib " + kCorpus + " --calib-tokens 256 --out " +
               (kRoot / "w4").string());
  ASSERT_EQ(q.code, 0) << q.err;
  const std::string args = "eval " + (kRoot / "w4").string() + " --corpus " + kCorpus + " --max-tokens 2048";
  auto a = cli(args), b = cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  auto j = nlohmann::json::parse(a.out);
  EXPECT_EQ(j["plan"], "W4A4-gptq");
  EXPECT_EQ(j["n_tokens"], 2048);
  auto c = cli(args + " --integer");
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_NEAR(nlohmann::json::parse(c.out)["perplexity"].get<double>(), j["perplexity"].get<double>(),
              1e-3 * j["perplexity"].get<double>());
}

TEST(Cli, EvalMissingCheckpointExitsWithConfigError) {
  EXPECT_EQ(cli("eval /nonexistent/ck --corpus " + kCorpus).code, kExitConfig);
}

TEST(Cli, AnalyzeSingleDump) {
  const auto dumps = RunPaths{tiny_run()}.dumps();
  const auto single = kRoot / "single_dump";
  fs::remove_all(single);
  fs::create_directories(single);
  fs::copy(dumps / "step_000006", single / "step_000006", fs::copy_options::recursive);
  auto r = cli("analyze " + single.string() + " --out " + (kRoot / "single_report").string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(std::ifstream(kRoot / "single_report" / "report.json"));
  EXPECT_EQ(j["trajectory"].size(), 1u);
  EXPECT_EQ(cli("analyze " + (kRoot / "nothing").string()).code, kExitConfig);
}

TEST(Cli, GridHasThreeRowsAndSixColumns) {
  const auto root = kRoot / "grid";
  fs::remove_all(root);
  const std::vector<std::pair<std::string, std::string>> rows = {
      {"baseline", ""},
      {"qat", "[qat]\nenabled = true\n"},
      {"qat_kurtosis", "[qat]\nenabled = true\n[kurtosis]\nlambda = 1e-6\n"}};
  for (const auto& [name, extra] : rows) {
    auto r = cli("train --config " + write_config(name, extra).string() + " --out " + (root / name).string());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  auto r = cli("grid " + root.string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto g = nlohmann::json::parse(std::ifstream(root / "reports" / "grid.json"));
  ASSERT_EQ(g["perplexity"].size(), 3u);
  for (const auto& row : g["perplexity"]) {
    ASSERT_EQ(row.size(), 6u);
    for (const auto& v : row) EXPECT_GT(v.get<double>(), 1.0);
  }
  EXPECT_EQ(g["plans"][0][0], "W16A16-none");
  EXPECT_EQ(g["plans"][1][0], "W16A4-none");
  std::ifstream csv(root / "reports" / "grid.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  EXPECT_EQ(lines, 4u);

  fs::remove_all(root / "qat");
  EXPECT_EQ(cli("grid " + root.string()).code, kExitConfig);
}
