#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hcdv_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& out) {
  const std::string cmd = std::string(HCDV_CLI_PATH) + " --out " + out.string() + " " + args + " > " +
                          (out / "stdout.txt").string() + " 2> " + (out / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST(Cli, ValueIsDeterministic) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const std::string args = "--seed 3 --synthetic-n 400 --T 32 value";
  ASSERT_EQ(run(args, a), 0) << slurp(a / "stderr.txt");
  ASSERT_EQ(run(args, b), 0) << slurp(b / "stderr.txt");
  const auto csv = slurp(a / "values.csv");
  EXPECT_EQ(csv, slurp(b / "values.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "index,value,method,seed");
  EXPECT_EQ(read_json(a / "manifest.json")["config_hash"], read_json(b / "manifest.json")["config_hash"]);
}

TEST(Cli, ValueReportsEvaluationAccounting) {
  const auto out = scratch("value");
  ASSERT_EQ(run("--seed 4 --synthetic-n 600 --T 64 value --method hcdv", out), 0) << slurp(out / "stderr.txt");
  const auto m = read_json(out / "metrics.json");
  ASSERT_TRUE(m.contains("evaluation_count"));
  EXPECT_EQ(m["evaluation_count"].get<std::uint64_t>(), m["expected_evaluation_count"].get<std::uint64_t>());
  EXPECT_LE(m["evaluation_count"].get<std::uint64_t>(), m["evaluation_bound"].get<std::uint64_t>());
  EXPECT_LE(m["efficiency_deviation"].get<double>(), 1e-6);
  EXPECT_TRUE(fs::exists(out / "budget.json"));
  const auto manifest = read_json(out / "manifest.json");
  EXPECT_EQ(manifest["subcommand"], "value");
  EXPECT_TRUE(manifest.contains("git_revision"));
}

TEST(Cli, RandomBaselineIsFast) {
  const auto out = scratch("random");
  const auto start = std::chrono::steady_clock::now();
  ASSERT_EQ(run("--seed 5 --synthetic-n 3000 value --method random", out), 0) << slurp(out / "stderr.txt");
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
  EXPECT_LT(took.count(), 1.0);
  std::ifstream is(out / "values.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 2401u);
}

TEST(Cli, CheckPassesAndDetectsFault) {
  const auto ok = scratch("check_ok"), bad = scratch("check_bad");
  EXPECT_EQ(run("--seed 6 check", ok), 0) << slurp(ok / "stderr.txt");
  const auto report = read_json(ok / "report.json");
  for (const char* key : {"concentration", "efficiency", "regret", "stability", "pass"}) {
    EXPECT_TRUE(report.contains(key)) << key;
  }
  EXPECT_TRUE(report["pass"].get<bool>());
  EXPECT_NE(run("--seed 6 check --weight-fault 0.9", bad), 0);
  EXPECT_FALSE(read_json(bad / "report.json")["pass"].get<bool>());
}

TEST(Cli, FailureWritesErrorJson) {
  const auto out = scratch("error");
  const int code = run("--seed 7 --data /nonexistent/table.csv value", out);
  EXPECT_NE(code, 0);
  ASSERT_TRUE(fs::exists(out / "error.json"));
  const auto err = read_json(out / "error.json");
  EXPECT_TRUE(err.contains("error"));
  EXPECT_NE(run("value", scratch("noseed")), 0);
}

TEST(Cli, EverySubcommandRuns) {
  const auto embed = scratch("embed");
  EXPECT_EQ(run("--seed 8 --synthetic-n 300 --embedding train --enc-epochs 2 embed", embed), 0)
      << slurp(embed / "stderr.txt");
  EXPECT_TRUE(fs::exists(embed / "embeddings.bin"));

  const auto tree = scratch("tree");
  EXPECT_EQ(run("--seed 8 --synthetic-n 300 --branching 4,4 tree", tree), 0) << slurp(tree / "stderr.txt");
  EXPECT_TRUE(read_json(tree / "tree.json").contains("nodes"));

  const auto loaded = scratch("loaded");
  EXPECT_EQ(run("--seed 8 --synthetic-n 300 --T 16 --embedding load --embeddings " + (embed / "embeddings.bin").string() +
                    " value",
                loaded),
            0)
      << slurp(loaded / "stderr.txt");

  for (const char* method : {"flat", "group", "loo", "random"}) {
    const auto out = scratch(std::string("baseline_") + method);
    EXPECT_EQ(run(std::string("--seed 8 --synthetic-n 200 --T 8 baseline --method ") + method, out), 0)
        << method << ": " << slurp(out / "stderr.txt");
    EXPECT_TRUE(fs::exists(out / "values.csv"));
  }

  const auto stream = scratch("stream");
  EXPECT_EQ(run("--seed 8 --T 16 stream --batch 40 --steps 2", stream), 0) << slurp(stream / "stderr.txt");
  std::ifstream is(stream / "steps.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 3u);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto out = scratch("config");
  std::ofstream(out / "run.ini") << "seed=9\nsynthetic-n=300\nT=24\n";
  ASSERT_EQ(run("--config " + (out / "run.ini").string() + " --T 12 value", out), 0) << slurp(out / "stderr.txt");
  const auto manifest = read_json(out / "manifest.json");
  EXPECT_EQ(manifest["seed"].get<std::uint64_t>(), 9u);
  const auto config = manifest["config"].get<std::string>();
  EXPECT_NE(config.find("\nT=12\n"), std::string::npos);
  EXPECT_NE(config.find("synthetic-n=300"), std::string::npos);
}
