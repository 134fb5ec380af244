#include "intrack/binary_io.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  const std::string cmd = std::string(INTRACK_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& child) const { return (path / child).string(); }
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return json::parse(in);
}

json without_wall_time(json j) {
  if (j.is_object()) {
    j.erase("wall_time_s");
    for (auto& [key, value] : j.items()) value = without_wall_time(value);
  } else if (j.is_array()) {
    for (auto& value : j) value = without_wall_time(value);
  }
  return j;
}

const std::string kTinyData = "--size 16 --frames 6 --distractors 1 --min-separation 4 ";

}  // namespace

TEST_CASE("usage errors exit 1 with the subcommand help") {
  Result r = run("generate --out /tmp/unused --bogus 3");
  CHECK(r.code == 1);
  CHECK(r.output.find("--bogus") != std::string::npos);
  CHECK(r.output.find("Synthesize a PathTracker dataset") != std::string::npos);

  r = run("");
  CHECK(r.code == 1);

  TempDir dir("intrack_cli_usage");
  r = run("generate --frames 1 --out " + (dir / "ds"));
  CHECK(r.code == 1);
  CHECK(r.output.find("num_frames") != std::string::npos);
  CHECK(r.output.find("--frames") != std::string::npos);

  r = run("train --out " + (dir / "run") + " --train " + (dir / "missing") + " --val " + (dir / "missing") +
          " --batch-size 1");
  CHECK(r.code == 1);
  CHECK(r.output.find("batch") != std::string::npos);

  CHECK(run("--help").code == 0);
}

TEST_CASE("generate reruns are byte-identical and reproducible from the echoed config") {
  TempDir dir("intrack_cli_generate");
  const std::string args = kTinyData + "--count 24 --seed 7 --out ";
  REQUIRE(run("generate " + args + (dir / "a")).code == 0);
  REQUIRE(run("generate " + args + (dir / "b") + " --threads 1").code == 0);
  CHECK(intrack::read_file(dir / "a/dataset.ptrk") == intrack::read_file(dir / "b/dataset.ptrk"));
  CHECK(intrack::read_file(dir / "a/manifest.json") == intrack::read_file(dir / "b/manifest.json"));

  const json config = read_json(dir / "a/config.json");
  CHECK(config["num_frames"] == 6);
  CHECK(config["count"] == 24);
  CHECK(config["master_seed"] == 7);

  REQUIRE(run("generate --config " + (dir / "a/config.json") + " --out " + (dir / "c")).code == 0);
  const json a = read_json(dir / "a/summary.json"), c = read_json(dir / "c/summary.json");
  CHECK(without_wall_time(a) == without_wall_time(c));
  CHECK(a["positives"] == 12);
  CHECK(a["negatives"] == 12);

  REQUIRE(run("generate --config " + (dir / "a/config.json") + " --seed 8 --out " + (dir / "d")).code == 0);
  CHECK(read_json(dir / "d/config.json")["master_seed"] == 8);
  CHECK(read_json(dir / "d/summary.json")["dataset_fnv1a"] != a["dataset_fnv1a"]);
}

TEST_CASE("train, eval and architecture mismatch") {
  TempDir dir("intrack_cli_train");
  REQUIRE(run("generate " + kTinyData + "--count 8 --seed 1 --out " + (dir / "train")).code == 0);
  REQUIRE(run("generate " + kTinyData + "--count 8 --seed 2 --out " + (dir / "val")).code == 0);
  const Result train = run("train --quiet --train " + (dir / "train") + " --val " + (dir / "val") + " --test " +
                           (dir / "val") + " --lr 1e-2 --channels 4 --batch-size 4 --max-epochs 2 --seed 3 --out " +
                           (dir / "run"));
  REQUIRE(train.code == 0);
  for (const char* f : {"config.json", "summary.json", "log.csv", "best.intw", "decisions_val.csv"})
    CHECK(fs::exists(dir.path / "run" / f));
  const json summary = read_json(dir / "run/summary.json");
  CHECK(summary["command"] == "train");
  CHECK(summary["runs"].size() == 1);
  CHECK(summary["tests"][0]["trials"] == 8);

  const std::string ckpt = dir / "run/best.intw";
  const Result eval = run("eval --checkpoint " + ckpt + " --data " + (dir / "val") + " --model int --channels 4 --out " +
                          (dir / "eval"));
  CHECK(eval.code == 0);
  CHECK(intrack::read_file(dir / "eval/decisions_val.csv") == intrack::read_file(dir / "run/decisions_val.csv"));
  CHECK(read_json(dir / "eval/config.json")["checkpoint"] == ckpt);

  const Result mismatch =
      run("eval --checkpoint " + ckpt + " --data " + (dir / "val") + " --variant no_attention --out " + (dir / "bad"));
  CHECK(mismatch.code == 2);
  CHECK(mismatch.output.find("requested:") != std::string::npos);
  CHECK(mismatch.output.find("checkpoint:") != std::string::npos);
  CHECK(mismatch.output.find("no_attention") != std::string::npos);
  CHECK(mismatch.output.find("complete") != std::string::npos);

  const Result missing = run("eval --checkpoint " + (dir / "absent.intw") + " --data " + (dir / "val") + " --out " +
                             (dir / "missing"));
  CHECK(missing.code == 2);
  CHECK(missing.output.find("absent.intw") != std::string::npos);

  const Result rerun = run("train --quiet --config " + (dir / "run/config.json") + " --out " + (dir / "rerun"));
  REQUIRE(rerun.code == 0);
  CHECK(intrack::read_file(dir / "rerun/best.intw") == intrack::read_file(dir / "run/best.intw"));
  CHECK(without_wall_time(read_json(dir / "rerun/summary.json")) == without_wall_time(summary));
}

TEST_CASE("stats and visualize write their artifacts") {
  TempDir dir("intrack_cli_stats");
  std::ofstream(dir / "a.csv") << "trial_id,decision,label,correct\n0,1,1,1\n1,0,1,0\n2,1,0,0\n3,0,0,1\n";
  std::ofstream(dir / "b.csv") << "trial_id,decision,label,correct\n0,1,1,1\n1,0,1,0\n2,0,0,1\n3,0,0,1\n";
  const Result stats = run("stats --frames 16 32 --distractors 0 1 --count 40 --seed 3 --decisions " + (dir / "a.csv") +
                           " " + (dir / "b.csv") + " --out " + (dir / "stats"));
  REQUIRE(stats.code == 0);
  for (const char* f : {"config.json", "summary.json", "crossings.csv", "consistency.csv"})
    CHECK(fs::exists(dir.path / "stats" / f));
  std::ifstream in(dir / "stats/consistency.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str().rfind("pair_id,rho,kappa,n\na~b,", 0) == 0);

  CHECK(run("stats --decisions " + (dir / "a.csv") + " --out " + (dir / "one")).code == 1);

  REQUIRE(run("generate " + kTinyData + "--count 2 --seed 1 --out " + (dir / "ds")).code == 0);
  REQUIRE(run("visualize --data " + (dir / "ds") + " --count 1 --scale 2 --out " + (dir / "viz")).code == 0);
  CHECK(fs::exists(dir.path / "viz" / "ds_0_video.gif"));
  CHECK(fs::exists(dir.path / "viz" / "summary.json"));
}

TEST_CASE("gradcheck exits 0") {
  TempDir dir("intrack_cli_gradcheck");
  const Result r = run("gradcheck --out " + (dir / "gc"));
  CHECK(r.code == 0);
  CHECK(fs::exists(dir.path / "gc" / "summary.json"));
  CHECK(fs::exists(dir.path / "gc" / "config.json"));
}
