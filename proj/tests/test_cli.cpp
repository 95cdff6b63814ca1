#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cmseg/cosa.hpp"
#include "cmseg/image.hpp"
#include "cmseg/model.hpp"
#include "cmseg/weight_io.hpp"
#include "cmseg/tools/cli.hpp"

using namespace cmseg;
using cmseg::tools::run_cli;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args, tools::VerifyHooks hooks = {}) {
  std::ostringstream out;
  std::ostringstream err;
  tools::CliEnvironment env{&out, &err, std::move(hooks)};
  CliRun r;
  r.code = run_cli(args, env);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  }
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "cmseg_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(cli({"toy-scenes", "--out", (root_ / "src").string(), "--count", "4", "--seed", "1", "--size", "64",
                 "--min-object", "12", "--max-object", "24"}).code,
              0);
    const CliRun r = cli({"synth", "--sources", (root_ / "src" / "sources.jsonl").string(), "--count", "6", "--seed", "3",
                       "--out", (root_ / "data").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::vector<std::string> train_args(const fs::path& out, const std::string& lr = "0.001") {
    return {"--deterministic", "train", "--data", (root_ / "data").string(), "--out", out.string(), "--epochs", "1",
            "--batch", "2", "--seed", "5", "--size", "32", "--lr", lr};
  }

  static fs::path root_;
};

fs::path CliTest::root_;

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"synth", "--out", (root_ / "x").string()}).code, 2);
  EXPECT_EQ(cli({"train", "--out", (root_ / "w.cmsw").string()}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(CliTest, MissingSourcesNamesPath) {
  const std::string missing = (root_ / "nope.jsonl").string();
  const CliRun r = cli({"synth", "--sources", missing, "--out", (root_ / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST_F(CliTest, ConfigFileRejectsUnknownKeysAndFlagsOverride) {
  const fs::path cfg = root_ / "cfg.json";
  std::ofstream(cfg) << R"({"count": 2, "bogus": 1})";
  EXPECT_EQ(cli({"synth", "--config", cfg.string(), "--sources", (root_ / "src" / "sources.jsonl").string(), "--out",
                 (root_ / "c").string()})
                .code,
            2);
  std::ofstream(cfg, std::ios::trunc) << R"({"count": 2, "seed": 3})";
  const CliRun r = cli({"synth", "--config", cfg.string(), "--count", "1", "--sources",
                     (root_ / "src" / "sources.jsonl").string(), "--out", (root_ / "c").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  int lines = 0;
  std::ifstream in(root_ / "c" / "manifest.jsonl");
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 1);
}

TEST_F(CliTest, SynthIsReproducible) {
  const auto args = [&](const std::string& name) {
    return std::vector<std::string>{"synth", "--sources", (root_ / "src" / "sources.jsonl").string(), "--count", "6",
                                    "--seed", "3", "--out", (root_ / name).string()};
  };
  ASSERT_EQ(cli(args("again")).code, 0);
  EXPECT_EQ(tree(root_ / "data"), tree(root_ / "again"));
}

TEST_F(CliTest, TrainIsReproducibleAndWritesArtifacts) {
  const CliRun a = cli(train_args(root_ / "a.cmsw"));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(cli(train_args(root_ / "b.cmsw")).code, 0);
  EXPECT_EQ(slurp(root_ / "a.cmsw"), slurp(root_ / "b.cmsw"));
  EXPECT_TRUE(fs::exists(root_ / "a.cmsw.json"));
  std::ifstream log(root_ / "a.log.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(log, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["epoch"], 1);
  EXPECT_TRUE(j.contains("mean_loss"));
}

TEST_F(CliTest, ZeroLearningRateKeepsTrainableWeights) {
  ASSERT_EQ(cli(train_args(root_ / "zero.cmsw", "0")).code, 0);
  ModelConfig cfg;
  cfg.encoder.height = cfg.encoder.width = 32;
  cfg.encoder.width_multiplier = 0.25F;
  cfg.encoder.seed = 5;
  CMSegNet fresh(cfg);
  const WeightArchive trained = load(root_ / "zero.cmsw");
  int compared = 0;
  for (const auto& p : fresh.params().items()) {
    if (!p.trainable) continue;
    EXPECT_EQ(trained.tensor(p.name).to_vector(), p.tensor.to_vector()) << p.name;
    ++compared;
  }
  EXPECT_GT(compared, 0);
}

TEST_F(CliTest, InferWritesBinaryMasksAndOverlays) {
  ASSERT_EQ(cli(train_args(root_ / "inf.cmsw")).code, 0);
  const auto infer = [&](const std::string& tag, const std::string& threshold) {
    return cli({"infer", "--weights", (root_ / "inf.cmsw").string(), "--input", (root_ / "data" / "images").string(),
                "--out-mask", (root_ / ("mask_" + tag)).string(), "--out-overlay",
                (root_ / ("overlay_" + tag)).string(), "--threshold", threshold});
  };
  const CliRun r = infer("lo", "0.3");
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(infer("hi", "0.7").code, 0);
  const size_t inputs = static_cast<size_t>(std::distance(fs::directory_iterator(root_ / "data" / "images"), {}));
  EXPECT_EQ(tree(root_ / "mask_lo").size(), inputs);
  EXPECT_EQ(tree(root_ / "overlay_lo").size(), inputs);
  for (const auto& e : fs::directory_iterator(root_ / "mask_lo")) {
    const Image lo = read_png(e.path());
    const Image hi = read_png(root_ / "mask_hi" / e.path().filename());
    ASSERT_EQ(lo.width, 64);
    for (size_t i = 0; i < lo.pixels.size(); ++i) {
      ASSERT_TRUE(lo.pixels[i] == 0 || lo.pixels[i] == 255);
      ASSERT_LE(hi.pixels[i], lo.pixels[i]);
    }
  }
  const CliRun bad = cli({"infer", "--weights", (root_ / "missing.cmsw").string(), "--input",
                       (root_ / "data" / "images").string(), "--out-mask", (root_ / "m").string()});
  EXPECT_NE(bad.code, 0);
}

TEST_F(CliTest, EvalScoresFixture) {
  const fs::path pred = root_ / "eval_pred";
  const fs::path gt = root_ / "eval_gt";
  fs::create_directories(pred);
  fs::create_directories(gt);
  Image g(4, 4, 1, 0);
  for (int x = 0; x < 4; ++x) g.at(x, 0) = 255;
  Image perfect = g;
  Image empty(4, 4, 1, 0);
  Image half(4, 4, 1, 0);
  half.at(0, 0) = half.at(1, 0) = 255;
  write_png(g, gt / "a.png");
  write_png(g, gt / "b.png");
  write_png(g, gt / "c.png");
  write_png(perfect, pred / "a.png");
  write_png(empty, pred / "b.png");
  write_png(half, pred / "c.png");
  const fs::path report = root_ / "report.json";
  const CliRun r = cli({"eval", "--pred", pred.string(), "--gt", gt.string(), "--report", report.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(report));
  EXPECT_EQ(j["image_count"], 3);
  EXPECT_EQ(j["detected_count"], 2);
  EXPECT_NEAR(j["mean"]["f1"].get<double>(), (1.0 + 0.0 + 2.0 / 3.0) / 3.0, 1e-9);
  fs::remove(pred / "c.png");
  const CliRun missing = cli({"eval", "--pred", pred.string(), "--gt", gt.string(), "--report", report.string()});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("c"), std::string::npos);
}

TEST(CliVerifyTest, PassesAndDetectsInjectedBug) {
  const CliRun ok = cli({"verify"});
  EXPECT_EQ(ok.code, 0) << ok.out;
  tools::VerifyHooks hooks;
  hooks.suppression = [](int64_t h, int64_t w, float gamma) {
    Tensor phi = suppression_matrix(h, w, gamma);
    for (auto& v : phi.mutable_data()) v = -v;
    return phi;
  };
  const CliRun bad = cli({"verify"}, hooks);
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE((bad.out + bad.err).find("suppression_matrix"), std::string::npos);
}

TEST(CliThreadsTest, DeterministicIsSingleThreaded) {
  EXPECT_EQ(tools::worker_threads(true), 1);
  EXPECT_GE(tools::worker_threads(false), 1);
}
