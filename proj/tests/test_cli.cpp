#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "blindpaint/datasets.hpp"
#include "blindpaint/image_io.hpp"
#include "json.hpp"
#include "test_helpers.hpp"

using namespace blindpaint;
using blindpaint::testing::TempDir;

namespace {

int run(const std::string& args, const std::filesystem::path& cwd, std::string* output = nullptr) {
  const auto log = cwd / "cli_output.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(BLINDPAINT_CLI_PATH) + "' " + args +
                          " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    *output = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int count_files(const std::filesystem::path& dir) {
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

int count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("help and usage errors") {
  TempDir dir("cli_help");
  std::string out;
  CHECK(run("--help", dir.path()) == 0);
  for (const char* sub : {"synth", "train", "eval", "infer"}) {
    CHECK(run(std::string(sub) + " --help", dir.path(), &out) == 0);
    CHECK(out.find("--data-root") != std::string::npos);
    CHECK(out.find("--config") != std::string::npos);
  }
  CHECK(run("frobnicate", dir.path()) == 2);
  CHECK(run("train --no-such-flag 1", dir.path()) == 2);
}

TEST_CASE("synth") {
  TempDir dir("cli_synth");
  write_phantom_corpus(dir / "data", Split::train, 5, {40, 40}, 1);
  std::string out;
  REQUIRE(run("synth --data-root data", dir.path(), &out) == 0);
  CHECK(out.find("train: 5") != std::string::npos);
  CHECK(count_files(dir / "data/train/corrupted") == 5);
  CHECK(count_files(dir / "data/train/mask") == 5);
  CHECK(count_lines(dir / "data/train/boxes.jsonl") == 5);

  const auto first = slurp(dir / "data/train/corrupted/img_0002.png");
  const auto boxes = slurp(dir / "data/train/boxes.jsonl");
  REQUIRE(run("synth --data-root data", dir.path()) == 0);
  CHECK(slurp(dir / "data/train/corrupted/img_0002.png") == first);
  CHECK(slurp(dir / "data/train/boxes.jsonl") == boxes);

  // The synthesized corpus loads as a paired dataset with the recorded boxes.
  const auto index = scan_dataset(dir / "data", Layout::paired, Split::train, {40, 40});
  CHECK(index.size() == 5);
  CHECK(index.entries[0].boxes.has_value());

  SUBCASE("zero markers copies clean bytes") {
    REQUIRE(run("synth --data-root data --markers-min 0 --markers-max 0", dir.path()) == 0);
    for (int i = 0; i < 5; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "img_%04d.png", i);
      CHECK(slurp(dir / "data/train/corrupted" / name) == slurp(dir / "data/train/clean" / name));
    }
  }
  SUBCASE("missing corpus") {
    CHECK(run("synth --data-root nowhere", dir.path()) != 0);
  }
}

TEST_CASE("train, eval and infer") {
  TempDir dir("cli_train");
  write_phantom_corpus(dir / "data", Split::train, 4, {32, 32}, 2);
  write_phantom_corpus(dir / "data", Split::test, 3, {32, 32}, 3);
  std::string out;

  SUBCASE("missing dataset path") {
    CHECK(run("train --max-steps 1", dir.path(), &out) == 2);
    CHECK(out.find("data_root") != std::string::npos);
  }
  SUBCASE("invalid values are all reported") {
    CHECK(run("train --data-root data --batch-size 0 --learning-rate -1", dir.path(), &out) == 2);
    CHECK(out.find("batch_size") != std::string::npos);
    CHECK(out.find("learning_rate") != std::string::npos);
  }
  SUBCASE("one step, then evaluation and inference") {
    const std::string common = "--data-root data --image-size 32 --encoder-width 8 --bottleneck-width 8";
    REQUIRE(run("train " + common + " --max-steps 1 --name one", dir.path(), &out) == 0);
    CHECK(count_lines(dir / "runs/one/train_log.jsonl") == 1);
    CHECK(std::filesystem::exists(dir / "runs/one/config.txt"));
    const auto ckpt = std::string("runs/one/checkpoints/final.ckpt");
    REQUIRE(std::filesystem::exists(dir / ckpt));

    REQUIRE(run("eval " + common + " --checkpoint " + ckpt + " --out ev1", dir.path(), &out) == 0);
    REQUIRE(run("eval " + common + " --checkpoint " + ckpt + " --out ev2", dir.path()) == 0);
    CHECK(slurp(dir / "ev1/summary.json") == slurp(dir / "ev2/summary.json"));
    CHECK(count_lines(dir / "ev1/per_image.csv") == 1 + 3 * 4);

    REQUIRE(run("eval --data-root data --image-size 32 --stub identity --out id", dir.path(), &out) == 0);
    const auto summary = nlohmann::json::parse(slurp(dir / "id/summary.json"));
    CHECK(summary["restored"] == summary["baseline"]);
    // Printed restored rows equal the baseline rows.
    const auto lines_start = out.find("restored  full");
    const auto base_start = out.find("baseline  full");
    REQUIRE(lines_start != std::string::npos);
    REQUIRE(base_start != std::string::npos);
    CHECK(out.substr(lines_start + 8, 60) == out.substr(base_start + 8, 60));

    REQUIRE(run("eval --data-root data --image-size 32 --stub oracle --out or", dir.path(), &out) == 0);
    CHECK(out.find("MSE 0.000") != std::string::npos);

    CHECK(run("eval --data-root data --out x", dir.path()) == 2);

    REQUIRE(run("infer --checkpoint " + ckpt + " --input data/test/clean --output inf --emit-mask --emit-detections",
                dir.path(), &out) == 0);
    CHECK(count_files(dir / "inf") == 3 + 1);
    CHECK(count_files(dir / "inf/masks") == 3);
    CHECK(count_lines(dir / "inf/boxes.jsonl") == 3);
    const auto restored = read_image(dir / "inf/img_0001.png");
    CHECK(restored.size(1) == 32);
    const auto mask = read_image(dir / "inf/masks/img_0001.png");
    CHECK(mask.size(2) == 32);
  }
}

TEST_CASE("infer keeps odd-sized inputs at their native size") {
  TempDir dir("cli_infer");
  write_phantom_corpus(dir / "data", Split::train, 2, {32, 32}, 4);
  const std::string common = "--data-root data --image-size 32 --encoder-width 8 --bottleneck-width 8";
  REQUIRE(run("train " + common + " --max-steps 0 --name z", dir.path()) == 0);
  write_png(dir / "in/odd.png", synthetic_phantom({37, 21}, 5));
  std::ofstream(dir / "in/broken.png") << "garbage";
  std::string out;
  CHECK(run("infer --checkpoint runs/z/checkpoints/final.ckpt --input in --output o", dir.path(), &out) == 1);
  const auto restored = read_image(dir / "o/odd.png");
  CHECK(restored.size(1) == 37);
  CHECK(restored.size(2) == 21);
  CHECK(out.find("broken.png") != std::string::npos);
}
