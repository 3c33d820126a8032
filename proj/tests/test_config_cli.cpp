#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dde/cli.hpp"
#include "test_util.hpp"

using namespace dde;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

nlohmann::ordered_json tiny_config() {
  return nlohmann::ordered_json::parse(R"({
    "seed": 4,
    "data": {"height": 16, "width": 16, "train_per_partition": 12, "calibration_per_partition": 6,
             "test_per_combination": 4, "pairs_per_factor": 30},
    "teacher": {"widths": [4, 6, 8], "latent": 8, "representative": {"haze": [3], "backdrop": [6]},
                "epochs": 2, "pairs_per_batch": 8, "decoder_hidden": 32},
    "distill": {"epochs": 2, "lr": 0.001, "d_composite": "raw"},
    "bench": {"runs": 5, "warmup": 1, "ratios": [0.3, 0.7]}
  })");
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  std::ofstream os(p);
  os << j.dump(2);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dde");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string checksum_line(const std::string& out) {
  auto p = out.find("checksum: ");
  return p == std::string::npos ? "" : out.substr(p, out.find('\n', p) - p);
}

nlohmann::json without_timing(nlohmann::json j) {
  j.erase("timing");
  return j;
}

}  // namespace

TEST(Config, Defaults) {
  RunConfig c;
  EXPECT_EQ(c.data.factors.size(), 2u);
  EXPECT_EQ(c.bench.runs, 1000u);
  EXPECT_EQ(c.bench.ratios, (std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9}));
  EXPECT_DOUBLE_EQ(c.ood.percentile, 5.0);
}

TEST(Config, RoundTripPreservesHash) {
  RunConfig c = config_from_json(tiny_config());
  RunConfig r = config_from_json(to_json(c));
  EXPECT_EQ(config_hash(c), config_hash(r));
  EXPECT_EQ(to_json(c).dump(), to_json(r).dump());
  RunConfig other = c;
  other.seed = 5;
  EXPECT_NE(config_hash(c), config_hash(other));
}

TEST(Config, UnknownKeysRejectedWithPath) {
  auto j = tiny_config();
  j["teacher"]["widht"] = 3;
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("teacher.widht"), std::string::npos);
  }
  auto k = tiny_config();
  k["bogus"] = 1;
  EXPECT_THROW(config_from_json(k), ConfigError);
}

TEST(Config, TypeAndRangeErrors) {
  auto j = tiny_config();
  j["distill"]["lr"] = "fast";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config();
  j["distill"]["compression"] = 0.95;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config();
  j["ood"] = {{"percentile", 101}};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config();
  j["teacher"]["representative"]["haze"] = {6};
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, FactorRoleErrorNamesField) {
  auto j = tiny_config();
  j["data"]["factors"] = nlohmann::ordered_json::parse(
      R"([{"name": "haze", "role": "weather", "observed_values": [0.0, 0.5], "test_only": [0.0]}])");
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.factors[0].role"), std::string::npos);
  }
}

TEST(Config, SampleConfigsLoad) {
  EXPECT_NO_THROW(load_config(fs::path(DDE_SAMPLES_DIR) / "desk.json"));
  EXPECT_NO_THROW(constants_from_json(read_json_file(fs::path(DDE_SAMPLES_DIR) / "reference_constants.json", "constants")));
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"distill", "--out", "x"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kOk);
}

TEST(Cli, MissingTeacherExitsTwoAsProcess) {
  std::string cmd = std::string("\"") + DDE_CLI_PATH + "\" distill --out /dev/null > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  ASSERT_NE(status, -1);
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST(Cli, BadFactorConfigNamesField) {
  TempDir d("badfactor");
  auto j = tiny_config();
  j["data"]["factors"] = nlohmann::ordered_json::parse(
      R"([{"name": "haze", "observed_values": [0.0, 0.5], "test_only": [0.0]}])");
  write_json(d / "c.json", j);
  auto r = run_cli({"gen-data", "--config", (d / "c.json").string(), "--out", (d / "data").string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("role"), std::string::npos);
}

TEST(Cli, GenDataSeedDeterminism) {
  TempDir d("gen");
  write_json(d / "c.json", tiny_config());
  auto cfg = (d / "c.json").string();
  auto a = run_cli({"gen-data", "--config", cfg, "--seed", "7", "--out", (d / "a").string()});
  auto b = run_cli({"gen-data", "--config", cfg, "--seed", "7", "--out", (d / "b").string()});
  auto c = run_cli({"gen-data", "--config", cfg, "--seed", "8", "--out", (d / "c").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_FALSE(checksum_line(a.out).empty());
  EXPECT_EQ(checksum_line(a.out), checksum_line(b.out));
  EXPECT_NE(checksum_line(a.out), checksum_line(c.out));
  EXPECT_EQ(slurp(d / "a" / "manifest.json"), slurp(d / "b" / "manifest.json"));
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    write_json(*dir_ / "c.json", tiny_config());
    ASSERT_EQ(step({"gen-data", "--out", p("data")}), 0);
    ASSERT_EQ(step({"train-teacher", "--data", p("data"), "--out", p("teacher.dde")}), 0);
    ASSERT_EQ(step({"distill", "--data", p("data"), "--teacher", p("teacher.dde"), "--out", p("student.dde")}), 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string p(const std::string& name) { return (*dir_ / name).string(); }
  static int step(std::vector<std::string> args) {
    args.insert(args.begin() + 1, {"--config", p("c.json")});
    auto r = run_cli(args);
    if (r.code != 0) ADD_FAILURE() << args[0] << ": " << r.err;
    return r.code;
  }
  static inline TempDir* dir_ = nullptr;
};

TEST_F(Pipeline, StudentSmallerThanTeacher) {
  EXPECT_LT(fs::file_size(p("student.dde")), fs::file_size(p("teacher.dde")));
  auto t = load_weights(p("teacher.dde"));
  auto s = load_weights(p("student.dde"));
  EXPECT_LT(s.parameter_count(), t.parameter_count());
}

TEST_F(Pipeline, TracesHaveOneRowPerEpochAndProvenance) {
  for (const char* f : {"teacher.dde.trace.csv", "student.dde.trace.csv"}) {
    std::string text = slurp(p(f));
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3) << f;
    EXPECT_NE(text.find("config_hash,seed,tool_version\r\n"), std::string::npos) << f;
    EXPECT_NE(text.find("\r\n"), std::string::npos);
  }
}

TEST_F(Pipeline, RetrainIsBitIdentical) {
  ASSERT_EQ(step({"train-teacher", "--data", p("data"), "--out", p("teacher2.dde")}), 0);
  ASSERT_EQ(step({"distill", "--data", p("data"), "--teacher", p("teacher2.dde"), "--out", p("student2.dde")}), 0);
  EXPECT_EQ(slurp(p("teacher.dde")), slurp(p("teacher2.dde")));
  EXPECT_EQ(slurp(p("student.dde")), slurp(p("student2.dde")));
  EXPECT_EQ(slurp(p("student.dde.trace.csv")), slurp(p("student2.dde.trace.csv")));
}

TEST_F(Pipeline, CertifyEchoesConstantsAndIsDeterministic) {
  auto k = fs::path(DDE_SAMPLES_DIR) / "reference_constants.json";
  ASSERT_EQ(step({"certify", "--model", p("student.dde"), "--data", p("data"), "--constants", k.string(), "--out", p("c1.json"),
                  "--csv", p("z1.csv")}),
            0);
  ASSERT_EQ(step({"certify", "--model", p("student.dde"), "--data", p("data"), "--constants", k.string(), "--out", p("c2.json"),
                  "--csv", p("z2.csv")}),
            0);
  EXPECT_EQ(slurp(p("c1.json")), slurp(p("c2.json")));
  EXPECT_EQ(slurp(p("z1.csv")), slurp(p("z2.csv")));
  auto j = nlohmann::json::parse(slurp(p("c1.json")));
  auto in = nlohmann::json::parse(slurp(k));
  EXPECT_EQ(j["constants_input"], in);
  EXPECT_EQ(j["resolved"]["chi"]["value"].get<double>(), 2519.0);
  EXPECT_EQ(j["resolved"]["chi"]["source"], "constants");
  EXPECT_TRUE(j.contains("provenance"));
}

TEST_F(Pipeline, EvaluateReportDeterministicApartFromTiming) {
  ASSERT_EQ(step({"evaluate", "--teacher", p("teacher.dde"), "--student", p("student.dde"), "--data", p("data"), "--runs", "3",
                  "--out", p("e1.json")}),
            0);
  ASSERT_EQ(step({"evaluate", "--teacher", p("teacher.dde"), "--student", p("student.dde"), "--data", p("data"), "--runs", "3",
                  "--out", p("e2.json")}),
            0);
  auto a = nlohmann::json::parse(slurp(p("e1.json")));
  auto b = nlohmann::json::parse(slurp(p("e2.json")));
  EXPECT_TRUE(a.contains("timing"));
  EXPECT_EQ(without_timing(a), without_timing(b));
  EXPECT_EQ(a["auroc"].size(), 2u);
}

TEST_F(Pipeline, IdenticalModelsGiveIdenticalAuroc) {
  ASSERT_EQ(step({"evaluate", "--teacher", p("teacher.dde"), "--student", p("teacher.dde"), "--data", p("data"), "--runs", "2",
                  "--out", p("same.json")}),
            0);
  auto j = nlohmann::json::parse(slurp(p("same.json")));
  for (const auto& row : j["auroc"]) EXPECT_EQ(row["teacher"]["auroc"], row["student"]["auroc"]);
}

TEST_F(Pipeline, BenchSizesDecrease) {
  ASSERT_EQ(step({"bench", "--teacher", p("teacher.dde"), "--data", p("data"), "--out", p("bench.json")}), 0);
  auto j = nlohmann::json::parse(slurp(p("bench.json")));
  ASSERT_EQ(j["sweep"].size(), 2u);
  EXPECT_GT(j["sweep"][0]["parameter_bytes"].get<std::size_t>(), j["sweep"][1]["parameter_bytes"].get<std::size_t>());
}

TEST_F(Pipeline, DivergentTeacherExitsThree) {
  auto j = tiny_config();
  j["teacher"]["lr"] = 1e200;
  write_json(*dir_ / "bad.json", j);
  auto r = run_cli({"train-teacher", "--config", p("bad.json"), "--data", p("data"), "--out", p("bad.dde")});
  EXPECT_EQ(r.code, cli::kNumeric) << r.err;
}

TEST_F(Pipeline, CorruptWeightsExitTwo) {
  std::string bytes = slurp(p("student.dde"));
  std::ofstream(p("broken.dde"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  auto r = run_cli({"certify", "--model", p("broken.dde"), "--data", p("data")});
  EXPECT_EQ(r.code, cli::kUsage);
}
