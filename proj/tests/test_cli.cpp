#include "support/doctest_torch.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "manet/checkpoint.hpp"
#include "manet/image_io.hpp"
#include "support/properties.hpp"

using namespace manet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "manet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<std::string> small_train_flags(const fs::path& out) {
  return {"train",   "--dataset",  testing::small_synthetic_manifest().string(),
          "--out",   out.string(), "--side",
          "64",      "--channels", "16",
          "--grid",  "4",          "--batch",
          "2",       "--episodes", "4",
          "--log-every", "1"};
}

// One small trained checkpoint shared by the eval and viz cases.
const fs::path& trained_checkpoint() {
  static const fs::path ckpt = [] {
    const fs::path dir = testing::scratch_dir("cli-ckpt");
    Outcome r = run(small_train_flags(dir));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return dir / "checkpoint.bin";
  }();
  return ckpt;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help and usage errors") {
    for (const char* sub : {"synth", "train", "eval", "viz", "import"}) {
      Outcome r = run({sub, "--help"});
      CHECK(r.code == cli::kExitOk);
      CHECK(r.out.find("--") != std::string::npos);
    }
    CHECK(run({"--help"}).code == cli::kExitOk);
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"synth", "--out", "x", "--bogus"}).code == cli::kExitUsage);
    CHECK(run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(run({"synth"}).code == cli::kExitUsage);
  }

  TEST_CASE("synth writes a reproducible dataset") {
    const fs::path a = testing::scratch_dir("synth-a"), b = testing::scratch_dir("synth-b");
    Outcome r = run({"synth", "--out", a.string(), "--size", "64"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(r.out.find("wrote 160 image/mask pairs (8 classes)") != std::string::npos);
    json manifest = read_json(a / "manifest.json");
    CHECK(manifest["entries"].size() == 160);
    REQUIRE(run({"synth", "--out", b.string(), "--size", "64"}).code == cli::kExitOk);
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
      const fs::path twin = b / fs::relative(entry.path(), a);
      CHECK(slurp(entry.path()) == slurp(twin));
    }
    CHECK(run({"synth", "--out", a.string(), "--classes", "0"}).code == cli::kExitUsage);
  }

  TEST_CASE("train") {
    SUBCASE("flags override a config file") {
      const fs::path dir = testing::scratch_dir("cli-train");
      std::ofstream(dir / "base.json") << json{{"dataset", testing::small_synthetic_manifest().string()},
                                              {"side", 64},
                                              {"channels", 16},
                                              {"grid", 4},
                                              {"batch", 2},
                                              {"episodes_per_epoch", 2},
                                              {"lambda", 0.7}}
                                              .dump();
      Outcome r = run({"train", "--config", (dir / "base.json").string(), "--out", (dir / "run").string(),
                       "--no-grid-loss"});
      REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
      CHECK(fs::exists(dir / "run" / "checkpoint.bin"));
      CHECK(fs::exists(dir / "run" / "train_log.jsonl"));
      json cfg = read_json(dir / "run" / "config.json");
      CHECK(cfg["lambda"].get<double>() == 0.0);
      CHECK(cfg["grid"].get<int>() == 4);
      CHECK(r.out.find("config {") != std::string::npos);
    }
    SUBCASE("a larger grid trains with S*S mask planes") {
      const fs::path dir = testing::scratch_dir("cli-grid");
      auto flags = small_train_flags(dir);
      flags[std::find(flags.begin(), flags.end(), "--grid") - flags.begin() + 1] = "24";
      Outcome r = run(flags);
      REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
      TrainingState s = load_checkpoint(dir / "checkpoint.bin");
      CHECK(s.config.model.grid == 24);
    }
    SUBCASE("lambda and no-grid-loss are exclusive") {
      auto flags = small_train_flags(testing::scratch_dir("cli-excl"));
      flags.insert(flags.end(), {"--lambda", "0.5", "--no-grid-loss"});
      CHECK(run(flags).code == cli::kExitUsage);
    }
    SUBCASE("configuration errors") {
      const fs::path dir = testing::scratch_dir("cli-bad");
      CHECK(run({"train", "--out", dir.string()}).code == cli::kExitUsage);
      auto flags = small_train_flags(dir);
      flags.insert(flags.end(), {"--fold", "7"});
      CHECK(run(flags).code == cli::kExitUsage);
      std::ofstream(dir / "typo.json") << R"({"learning_rate": 0.1})";
      CHECK(run({"train", "--config", (dir / "typo.json").string(), "--out", dir.string()}).code == cli::kExitUsage);
    }
  }

  TEST_CASE("eval") {
    const fs::path ckpt = trained_checkpoint();
    const fs::path dir = testing::scratch_dir("cli-eval");
    Outcome r = run({"eval", "--ckpt", ckpt.string(), "--episodes", "6", "--runs", "5", "--report",
                     (dir / "pooled.json").string()});
    REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
    json doc = read_json(dir / "pooled.json");
    CHECK(doc["report"]["runs"].size() == 5);
    CHECK(doc["eval"]["iou_mode"] == "pooled");
    CHECK(doc["head_parameters"].get<std::int64_t>() > 0);
    CHECK(r.out.find("head parameters: ") != std::string::npos);
    CHECK(r.out.find("iou mode: pooled") != std::string::npos);

    Outcome mean = run({"eval", "--ckpt", ckpt.string(), "--episodes", "6", "--runs", "1", "--iou-mode", "mean"});
    CHECK(mean.code == cli::kExitOk);
    CHECK(mean.out.find("iou mode: mean") != std::string::npos);

    Outcome five = run({"eval", "--ckpt", ckpt.string(), "--episodes", "4", "--runs", "1", "--shots", "5",
                        "--report", (dir / "five.json").string()});
    CHECK(five.code == cli::kExitOk);
    CHECK(read_json(dir / "five.json")["eval"]["shots"] == 5);

    CHECK(run({"eval", "--ckpt", (dir / "absent.bin").string()}).code == cli::kExitRuntime);
    CHECK(run({"eval", "--ckpt", ckpt.string(), "--iou-mode", "median"}).code == cli::kExitUsage);
  }

  TEST_CASE("viz") {
    const fs::path ckpt = trained_checkpoint();
    const fs::path dir = testing::scratch_dir("cli-viz");
    Outcome r = run({"viz", "--ckpt", ckpt.string(), "--out", (dir / "a").string(), "--tile-size", "16"});
    REQUIRE_MESSAGE(r.code == cli::kExitOk, r.err);
    json doc = read_json(dir / "a" / "viz.json");
    CHECK(doc["tiles"] == 16);
    RawImage montage = read_png(dir / "a" / "montage.png");
    CHECK(montage.width == 64);
    CHECK(montage.height == 64);
    CHECK(fs::exists(dir / "a" / "overlay.png"));

    REQUIRE(run({"viz", "--ckpt", ckpt.string(), "--out", (dir / "b").string(), "--tile-size", "16", "--fg-only"})
                .code == cli::kExitOk);
    RawImage blank = read_png(dir / "b" / "montage.png");
    json fg = read_json(dir / "b" / "viz.json")["foreground_cells"];
    std::set<std::pair<int, int>> lit;
    for (const auto& c : fg) lit.insert({c[0].get<int>(), c[1].get<int>()});
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        if (lit.count({i, j})) continue;
        int sum = 0;
        for (int y = 0; y < 16; ++y)
          for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) sum += blank.at(i * 16 + y, j * 16 + x, c);
        CHECK(sum == 0);
      }
    }

    CHECK(run({"viz", "--ckpt", ckpt.string(), "--out", (dir / "c").string(), "--query", "q.png"}).code ==
          cli::kExitUsage);
    CHECK(run({"viz", "--ckpt", ckpt.string(), "--out", (dir / "d").string(), "--tile-size", "2"}).code ==
          cli::kExitUsage);
  }

  TEST_CASE("the installed executable runs") {
    CHECK(std::system(MANET_BINARY " --help > /dev/null") == 0);
    CHECK(std::system(MANET_BINARY " eval --help > /dev/null") == 0);
    CHECK(std::system(MANET_BINARY " bogus > /dev/null 2>&1") != 0);
  }
}
