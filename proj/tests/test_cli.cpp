#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "test_util.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run_dar(const std::string& args, const fs::path& out_root) {
  const fs::path err = out_root / "stderr.txt";
  fs::create_directories(out_root);
  const std::string cmd =
      "DAR_OUT='" + out_root.string() + "' '" DAR_BINARY "' " + args + " 2>'" + err.string() + "'";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.out += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

const char* kTiny = R"({
  "synthetic": {"n_samples": 80, "cube_side": 16},
  "prep": {"crop_side": 16, "patch_size": 16},
  "train": {"epochs": 1, "m": 2, "base_channels": 4, "max_channels": 8, "batch_size": 16, "augment": false},
  "folds": 2, "repeats": 1, "seeds": 1
})";

}  // namespace

TEST_CASE("cli: partition of the three-record manifest") {
  dar::test::TempDir dir("cli_partition");
  write_file(dir / "m.jsonl",
             "{\"id\":\"n01\",\"volume\":\"a.nvol\",\"annotations\":[3,3,3],\"center\":[1,2,3]}\n"
             "{\"id\":\"n02\",\"volume\":\"b.nvol\",\"annotations\":[2,3],\"center\":[0,0,0]}\n"
             "{\"id\":\"n03\",\"volume\":\"c.nvol\",\"annotations\":[4],\"center\":[5,5,5]}\n");
  write_file(dir / "cfg.json", R"({"manifest": "m.jsonl"})");
  const std::string before = slurp(dir / "m.jsonl");

  const Result r = run_dar("partition --config '" + (dir / "cfg.json").string() + "'", dir / "runs");
  REQUIRE(r.code == 0);
  const json out = json::parse(r.out);
  CHECK(out["cr"] == 1);
  CHECK(out["ic"] == 1);
  CHECK(out["lr"] == 1);

  const fs::path run = out["run_dir"].get<std::string>();
  CHECK(run.parent_path() == dir / "runs");
  const json part = json::parse(slurp(run / "partition.json"));
  CHECK(part["cr"] == json::array({"n01"}));
  CHECK(part["ic"] == json::array({"n02"}));
  CHECK(part["lr"] == json::array({"n03"}));

  // The resolved config alone reproduces the run.
  const Result again = run_dar("partition --config '" + (run / "resolved_config.json").string() + "'", dir / "runs");
  REQUIRE(again.code == 0);
  CHECK(json::parse(again.out)["run_dir"] == out["run_dir"]);
  CHECK(slurp(dir / "m.jsonl") == before);

  const Result seeded = run_dar("partition --config '" + (dir / "cfg.json").string() + "' --seed 9", dir / "runs");
  REQUIRE(seeded.code == 0);
  CHECK(json::parse(seeded.out)["run_dir"].get<std::string>().ends_with("-seed9"));
}

TEST_CASE("cli: error JSON and exit codes") {
  dar::test::TempDir dir("cli_errors");
  write_file(dir / "bad.jsonl", "{\"id\":\"x\",\"volume\":\"v.nvol\",\"annotations\":[9],\"center\":[0,0,0]}\n");

  auto kind_of = [](const Result& r) { return json::parse(r.err)["error"]["kind"].get<std::string>(); };

  Result r = run_dar("partition --set bogus=1", dir / "runs");
  CHECK(r.code == 2);
  CHECK(kind_of(r) == "config");

  r = run_dar("partition --set manifest=/does/not/exist.jsonl", dir / "runs");
  CHECK(r.code == 2);
  CHECK(kind_of(r) == "config");

  r = run_dar("partition --config /does/not/exist.json", dir / "runs");
  CHECK(r.code == 2);

  r = run_dar("frobnicate", dir / "runs");
  CHECK(r.code == 2);
  CHECK(kind_of(r) == "config");

  r = run_dar("partition --set manifest='" + (dir / "bad.jsonl").string() + "'", dir / "runs");
  CHECK(r.code == 3);
  CHECK(kind_of(r) == "data");
  CHECK(json::parse(r.err)["error"]["message"].get<std::string>().find("line 1") != std::string::npos);
}

TEST_CASE("cli: synth, default sweep grid and reproducible metrics") {
  dar::test::TempDir dir("cli_pipeline");
  write_file(dir / "tiny.json", kTiny);
  const std::string cfg = "--config '" + (dir / "tiny.json").string() + "'";

  const Result train = run_dar("synth " + cfg + " --seed 3", dir / "runs");
  REQUIRE(train.code == 0);
  const Result test = run_dar("synth " + cfg + " --seed 4", dir / "runs");
  REQUIRE(test.code == 0);
  const json tr = json::parse(train.out), te = json::parse(test.out);
  CHECK(tr["n"] == 80);
  CHECK(tr["cr"].get<int>() + tr["ic"].get<int>() + tr["lr"].get<int>() == 80);
  CHECK(tr["run_dir"] != te["run_dir"]);

  const std::string data = cfg + " --set manifest='" + tr["manifest"].get<std::string>() + "' --set test_manifest='" +
                           te["manifest"].get<std::string>() + "' --set test_ground_truth='" +
                           te["ground_truth"].get<std::string>() + "'";

  const Result sweep = run_dar("sweep " + data + " --plot", dir / "runs");
  REQUIRE(sweep.code == 0);
  const fs::path sweep_dir = json::parse(sweep.out)["run_dir"].get<std::string>();
  CHECK(line_count(sweep_dir / "curve.csv") == 26);
  CHECK(fs::exists(sweep_dir / "curve.png"));

  const Result pre = run_dar("pretrain " + data, dir / "runs");
  REQUIRE(pre.code == 0);
  const Result ft =
      run_dar("finetune " + data + " --set pretrained='" + json::parse(pre.out)["checkpoints"].get<std::string>() + "'",
          dir / "runs");
  REQUIRE(ft.code == 0);
  const Result fuse =
      run_dar("fuse-train " + data + " --set finetuned='" + json::parse(ft.out)["checkpoints"].get<std::string>() + "'",
          dir / "runs");
  REQUIRE(fuse.code == 0);
  const std::string model = " --set model='" + json::parse(fuse.out)["model"].get<std::string>() + "'";

  const Result a = run_dar("eval " + data + model, dir / "runs_a");
  const Result b = run_dar("eval " + data + model, dir / "runs_b");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const fs::path da = json::parse(a.out)["run_dir"].get<std::string>(), db = json::parse(b.out)["run_dir"].get<std::string>();
  CHECK(da.filename() == db.filename());
  CHECK(slurp(da / "metrics.json") == slurp(db / "metrics.json"));
  CHECK(fs::exists(da / "metrics.csv"));
}
