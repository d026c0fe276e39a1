#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fdiv/cli.hpp"

namespace fdv {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "fdiv");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("fdiv_cli_test_" + name);
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

TEST(Config, ChainPreset) {
  const ExperimentConfig c = preset_config("chain");
  EXPECT_EQ(c.schedule.eta0, 15.0);
  EXPECT_EQ(c.schedule.decay, 0.9);
  EXPECT_EQ(c.iterations, 30);
  EXPECT_EQ(c.samples_per_update, 800);
  EXPECT_EQ(c.runs, 10);
  EXPECT_EQ(c.seed, 20170601U);
  EXPECT_EQ(c.env.kind, EnvKind::chain);
}

TEST(Config, OverridesAndRoundTrip) {
  const ExperimentConfig c = parse_config("", {"schedule.eta0=15", "alphas=[0.5,1]", "env.kind=frozenlake"});
  EXPECT_EQ(c.schedule.eta0, 15.0);
  EXPECT_EQ(c.alphas, (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ(c.env.kind, EnvKind::frozenlake);
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, FileLayersOverPreset) {
  const fs::path p = write_file("layer.json", R"({"runs": 3, "schedule": {"decay": 0.5}})");
  const ExperimentConfig c = parse_config(p.string(), {}, "cliffwalking");
  EXPECT_EQ(c.runs, 3);
  EXPECT_EQ(c.schedule.decay, 0.5);
  EXPECT_EQ(c.schedule.eta0, 50.0);
  EXPECT_EQ(c.env.kind, EnvKind::cliffwalking);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("/nonexistent/fdiv.json", {}), ConfigError);
  EXPECT_THROW(parse_config("", {"runs=0"}), ConfigError);
  EXPECT_THROW(parse_config("", {"schedule.decay=2"}), ConfigError);
  EXPECT_THROW(parse_config("", {"noequals"}), ConfigError);
  EXPECT_THROW(preset_config("nope"), ConfigError);
  const fs::path unknown = write_file("unknown.json", R"({"rnus": 3})");
  EXPECT_THROW(parse_config(unknown.string(), {}), ConfigError);
  const fs::path broken = write_file("broken.json", "{\n  \"runs\": ,\n}");
  try {
    parse_config(broken.string(), {});
    FAIL() << "expected a parse error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Cli, MissingConfigFileExitsWithConfigCode) {
  const Result r = run({"mdp-train", "--config", "/nonexistent/fdiv.json"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("cannot open"), std::string::npos);
}

TEST(Cli, UnknownSubcommand) { EXPECT_EQ(run({"frobnicate"}).code, 2); }

TEST(Cli, NoSubcommand) { EXPECT_EQ(run({}).code, 2); }

TEST(Cli, BanditImprove) {
  const Result r = run({"bandit-improve", "--alpha", "1", "--eta", "1", "--q", "0.5,0.5", "--Q", "1,0"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("pi = 0.731059 0.268941"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("lambda = 0.620115"), std::string::npos) << r.out;
}

TEST(Cli, BanditImproveRejectsBadPolicy) {
  const Result r = run({"bandit-improve", "--alpha", "1", "--eta", "1", "--q", "0.5,0.6", "--Q", "1,0"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, DivergenceTable) {
  const Result r = run({"divergence-table", "--alpha", "0.5", "--points", "3"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("Hellinger"), std::string::npos);
  EXPECT_NE(r.out.find("dom f* = y < 2"), std::string::npos) << r.out;
}

TEST(Cli, SelfCheckPasses) {
  const Result r = run({"self-check"});
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST(Cli, MdpTrainWritesOutputs) {
  const fs::path dir = fs::temp_directory_path() / "fdiv_cli_test_mdp";
  fs::remove_all(dir);
  const Result r = run({"mdp-train", "--preset", "chain", "--set", "runs=1", "--set", "iterations=2", "--set",
                        "alphas=[1]", "--output-dir", dir.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "mdp_returns.csv"));
  EXPECT_TRUE(fs::exists(dir / "resolved_config.json"));
  EXPECT_NE(r.out.find("optimal average reward"), std::string::npos);
}

TEST(Cli, UnwritableOutputIsIoError) {
  const fs::path blocker = write_file("blocker", "x");
  const Result r = run({"policy-demo", "--set", "iterations=1", "--output-dir", (blocker / "sub").string()});
  EXPECT_EQ(r.code, 4) << r.err;
}

}  // namespace
}  // namespace fdv
