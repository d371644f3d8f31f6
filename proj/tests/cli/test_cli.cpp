#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "dve/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / ("dve_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Run run_cli(const std::string& args) {
  const fs::path log = scratch() / "last_output.txt";
  const std::string cmd = std::string("\"") + DVE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(log)};
}

const std::string kSmall =
    " --set model.width=0.125 --set train.pairs_per_batch=4 --set train.aux_pool_size=4"
    " --set train.aux_per_pair=2 --set data.image_size=32";

// Tiny synthetic dataset shared by the cases below.
fs::path data_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch() / "data";
    const Run r = run_cli("gen-data --data-dir \"" + d.string() + "\" --instances 3 --frames 4 --test-instances 2 "
                      "--test-frames 3 --size 32 --seed 2");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

fs::path trained_checkpoint() {
  static const fs::path ckpt = [] {
    const fs::path run = scratch() / "base";
    const Run r = run_cli("train --root \"" + data_dir().string() + "\" --epochs 1 --seed 4 --run-dir \"" + run.string() +
                      "\"" + kSmall);
    REQUIRE(r.code == 0);
    return run / "last.ckpt";
  }();
  return ckpt;
}

std::vector<nlohmann::json> read_log(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("help lists every command") {
  const Run r = run_cli("--help");
  CHECK(r.code == 0);
  for (const char* cmd : {"gen-data", "train", "finetune", "eval", "visualize"}) {
    CHECK(r.output.find(cmd) != std::string::npos);
  }
}

TEST_CASE("unknown config keys exit with code 2 and name the key") {
  const std::string out = " --out \"" + (scratch() / "rejected").string() + "\"";
  const Run set = run_cli("train --set train.bogus_key=1" + out);
  CHECK(set.code == 2);
  CHECK(set.output.find("train.bogus_key") != std::string::npos);

  const fs::path ini = scratch() / "bad.ini";
  std::ofstream(ini) << "[model]\nembed_dims = 3\n";
  const Run file = run_cli("train --config \"" + ini.string() + "\"" + out);
  CHECK(file.code == 2);
  CHECK(file.output.find("model.embed_dims") != std::string::npos);

  CHECK(run_cli("train --lr -1" + out).code == 2);
  CHECK(run_cli("eval --checkpoint x --protocol nonsense" + out).code == 2);
  CHECK(!fs::exists(scratch() / "rejected"));
}

TEST_CASE("train writes a run directory with config, log, checkpoints and manifest") {
  const fs::path ckpt = trained_checkpoint();
  const fs::path run = ckpt.parent_path();
  CHECK(fs::exists(run / "config.ini"));
  CHECK(fs::exists(run / "epoch_001.ckpt"));
  CHECK(fs::exists(run / "manifest.json"));
  const auto log = read_log(run / "train_log.jsonl");
  REQUIRE(!log.empty());
  for (const auto& entry : log) CHECK(entry["epoch"] == 1);
  const auto manifest = nlohmann::json::parse(read_text(run / "manifest.json"));
  CHECK(manifest["command"] == "train");
}

TEST_CASE("resume continues at the next epoch") {
  const fs::path run = scratch() / "resume";
  REQUIRE(run_cli("train --root \"" + data_dir().string() + "\" --epochs 1 --seed 4 --run-dir \"" + run.string() + "\"" +
              kSmall)
              .code == 0);
  const Run r = run_cli("train --root \"" + data_dir().string() + "\" --epochs 2 --resume \"" +
                    (run / "last.ckpt").string() + "\"" + kSmall);
  CHECK(r.code == 0);
  CHECK(r.output.find("epoch 2") != std::string::npos);
  CHECK(r.output.find("epoch 1 ") == std::string::npos);
  const auto log = read_log(run / "train_log.jsonl");
  REQUIRE(log.size() >= 2);
  CHECK(log.front()["epoch"] == 1);
  CHECK(log.back()["epoch"] == 2);
  CHECK(log.back()["step"] > log.front()["step"]);
  CHECK(fs::exists(run / "epoch_002.ckpt"));
}

TEST_CASE("eval match-same writes summary and per-landmark table") {
  const fs::path out = scratch() / "eval_same";
  const Run r = run_cli("eval --checkpoint \"" + trained_checkpoint().string() + "\" --protocol match-same --root \"" +
                    data_dir().string() + "\" --n-pairs 6 --run-dir \"" + out.string() + "\"");
  REQUIRE(r.code == 0);
  const auto summary = nlohmann::json::parse(read_text(out / "summary.json"));
  CHECK(summary["protocol"] == "match-same");
  CHECK(summary["n_pairs"] == 6);
  CHECK(summary["mean_error_px"].is_number());
  CHECK(fs::exists(out / "matches.csv"));
}

TEST_CASE("regression on a benchmark without annotations names the missing file") {
  const fs::path empty = scratch() / "no_faces";
  fs::create_directories(empty);
  const Run r = run_cli("eval --checkpoint \"" + trained_checkpoint().string() + "\" --protocol regress --dataset mafl "
                    "--root \"" + empty.string() + "\" --run-dir \"" + (scratch() / "eval_missing").string() + "\"");
  CHECK(r.code == 3);
  CHECK(r.output.find("annotations") != std::string::npos);
  CHECK(r.output.find(".csv") != std::string::npos);
}

TEST_CASE("limited-annotation study writes one row per count") {
  const fs::path out = scratch() / "eval_limited";
  const Run r = run_cli("eval --checkpoint \"" + trained_checkpoint().string() + "\" --protocol limited --root \"" +
                    data_dir().string() + "\" --counts 1,5 --seeds 2 --run-dir \"" + out.string() + "\"" +
                    " --set eval.regressor_epochs=2");
  REQUIRE(r.code == 0);
  const auto summary = nlohmann::json::parse(read_text(out / "summary.json"));
  REQUIRE(summary["rows"].size() == 2);
  CHECK(summary["rows"][0]["count"] == 1);
  CHECK(summary["rows"][1]["count"] == 5);
  CHECK(fs::exists(out / "limited.csv"));
  CHECK(fs::exists(out / "annotation_lists" / "count_5_seed_1.txt"));
}

TEST_CASE("visualize draws a figure and a match table") {
  const fs::path out = scratch() / "vis";
  const fs::path images = data_dir() / "test" / "images";
  const Run r = run_cli("visualize --checkpoint \"" + trained_checkpoint().string() + "\" --image-a \"" +
                    (images / "arm_0000_000.png").string() + "\" --image-b \"" +
                    (images / "arm_0001_000.png").string() + "\" --points \"-0.5,0.2;0.3,0.4\" --run-dir \"" +
                    out.string() + "\"");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "matches.png"));
  std::ifstream csv(out / "matches.csv");
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("finetune from a checkpoint records provenance") {
  const fs::path out = scratch() / "ft";
  const Run r = run_cli("finetune --checkpoint \"" + trained_checkpoint().string() + "\" --root \"" + data_dir().string() +
                    "\" --epochs 1 --run-dir \"" + out.string() + "\"" + kSmall);
  REQUIRE(r.code == 0);
  const dve::Checkpoint ck = dve::load_checkpoint(out / "last.ckpt");
  REQUIRE(!ck.meta.provenance.empty());
  CHECK(ck.meta.provenance.back() == fs::absolute(trained_checkpoint()).string());
}

TEST_CASE("missing checkpoint is a data error") {
  const Run r = run_cli("eval --checkpoint \"" + (scratch() / "nope.ckpt").string() + "\" --protocol match-same --out \"" +
                        (scratch() / "rejected").string() + "\"");
  CHECK(r.code == 3);
  CHECK(!fs::exists(scratch() / "rejected"));
}

TEST_CASE("cleanup") { fs::remove_all(scratch()); }
