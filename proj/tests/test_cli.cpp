#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

/// Runs the CLI with stdout captured to a file; stderr is discarded.
Run run(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt";
  const std::string cmd = std::string(MILLASSIST_CLI) + " " + args + " > " + out.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("millassist-cli-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("sim output is identical across runs with the same seed") {
  TempDir dir;
  const auto a = dir.path / "a.jsonl";
  const auto b = dir.path / "b.jsonl";
  REQUIRE(run("sim --seed 7 --days 0.5 --out " + a.string(), dir.path).code == 0);
  REQUIRE(run("sim --seed 7 --days 0.5 --out " + b.string(), dir.path).code == 0);
  const auto first = slurp(a);
  CHECK_FALSE(first.empty());
  CHECK(first == slurp(b));
  REQUIRE(run("sim --seed 8 --days 0.5 --out " + b.string(), dir.path).code == 0);
  CHECK(first != slurp(b));
}

TEST_CASE("train and evaluate on a simulated log") {
  TempDir dir;
  const auto log = dir.path / "log.jsonl";
  const auto model = dir.path / "model.json";
  REQUIRE(run("sim --seed 3 --days 3 --out " + log.string(), dir.path).code == 0);
  const auto train = run("--jsonl train --log " + log.string() + " --parameter tensile_strength --trees 20 --out " +
                             model.string(),
                         dir.path);
  REQUIRE(train.code == 0);
  CHECK(train.out.find("\"type\":\"training\"") != std::string::npos);
  const auto eval = run("evaluate --log " + log.string() + " --model " + model.string(), dir.path);
  REQUIRE(eval.code == 0);
  CHECK(eval.out.find("within ±10 % rate") != std::string::npos);
  CHECK(eval.out.find("confusion") != std::string::npos);
}

TEST_CASE("exit codes") {
  TempDir dir;
  CHECK(run("--help", dir.path).code == 0);
  CHECK(run("no-such-command", dir.path).code == 2);
  CHECK(run("sim --no-such-flag", dir.path).code == 2);
  CHECK(run("train --out " + (dir.path / "m.json").string() + " --parameter q", dir.path).code == 1);
  CHECK(run("replay --log " + (dir.path / "missing.jsonl").string(), dir.path).code == 1);
  CHECK_FALSE(fs::exists(dir.path / "m.json"));
}
