#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ubatrack/harness.hpp"

namespace ubatrack {
namespace {

namespace fs = std::filesystem;

const std::string kFixture = std::string(UBATRACK_FIXTURE_DIR) + "/eval";

class TempDir : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("ubatrack_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Relative path -> contents for every regular file under root.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ubatrack");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

SynthConfig small_synth(std::uint64_t seed = 3) {
  SynthConfig s;
  s.seed = seed;
  s.num_sequences = 2;
  s.frames_per_sequence = 6;
  s.canvas_h = s.canvas_w = 64;
  s.min_size = 10;
  s.max_size = 20;
  return s;
}

TEST_F(TempDir, NetpbmRoundTrip) {
  Image rgb(5, 7, 3), gray(4, 3, 1);
  Rng rng(1);
  for (auto& v : rgb.pixels) v = float(rng.below(256)) / 255.0f;
  for (auto& v : gray.pixels) v = float(rng.below(256)) / 255.0f;
  write_netpbm(path("a.ppm"), rgb);
  write_netpbm(path("b.pgm"), gray);
  EXPECT_EQ(read_netpbm(path("a.ppm")).pixels, rgb.pixels);
  const auto g = read_netpbm(path("b.pgm"));
  EXPECT_EQ(g.channels, 1u);
  EXPECT_EQ(g.width, 3u);
  EXPECT_EQ(g.pixels, gray.pixels);
  EXPECT_EQ(slurp(path("b.pgm")).substr(0, 9), "P5\n3 4\n25");
}

TEST(Netpbm, HeaderCommentsAndErrors) {
  const std::string ok = "P5\n# comment\n2 1\n255\n\x10\x20";
  const auto img = decode_netpbm(std::vector<unsigned char>(ok.begin(), ok.end()), "mem");
  EXPECT_EQ(img.width, 2u);
  EXPECT_FLOAT_EQ(img.pixels[1], 32.0f / 255.0f);
  auto bad = [](const std::string& s) {
    EXPECT_THROW(decode_netpbm(std::vector<unsigned char>(s.begin(), s.end()), "mem"), FormatError) << s;
  };
  bad("P3\n2 1\n255\n12");
  bad("P5\n2 1\n255\n\x10");
  bad("P5\n2 1\n65535\n\x10\x10\x10\x10");
  bad("P5\nx 1\n255\n");
}

TEST_F(TempDir, SynthIsByteIdenticalForASeed) {
  synth_generate(small_synth(), path("a"));
  synth_generate(small_synth(), path("b"));
  const auto a = tree(path("a")), b = tree(path("b"));
  EXPECT_EQ(a.size(), 2u * (6 + 6 + 1) + 1);
  EXPECT_EQ(a, b);
  synth_generate(small_synth(4), path("c"));
  EXPECT_NE(tree(path("c")), a);
}

TEST(Synth, GroundTruthContract) {
  for (double occ : {0.0, 0.4}) {
    auto cfg = small_synth(5);
    cfg.num_sequences = 6;
    cfg.frames_per_sequence = 40;
    cfg.max_speed = 6.0;
    cfg.occlusion_prob = occ;
    std::size_t absent = 0;
    for (std::size_t i = 0; i < cfg.num_sequences; ++i) {
      const auto s = synth_sequence(cfg, i);
      ASSERT_EQ(s.gt.size(), 40u);
      EXPECT_TRUE(s.gt[0].present);
      for (const auto& g : s.gt) {
        if (!g.present) {
          ++absent;
          continue;
        }
        EXPECT_GT(g.box.w, 0.0);
        EXPECT_GT(g.box.h, 0.0);
        EXPECT_GE(g.box.x, 1.0);
        EXPECT_GE(g.box.y, 1.0);
        EXPECT_LE(g.box.x + g.box.w, double(cfg.canvas_w) - 1.0);
        EXPECT_LE(g.box.y + g.box.h, double(cfg.canvas_h) - 1.0);
      }
    }
    if (occ == 0.0) EXPECT_EQ(absent, 0u);
    else EXPECT_GT(absent, 0u);
  }
}

TEST(Synth, TargetIsVisibleInBothModalities) {
  const auto s = synth_sequence(small_synth(), 0);
  const auto& b = s.gt[0].box;
  const std::size_t cy = std::size_t(b.cy()), cx = std::size_t(b.cx());
  EXPECT_GT(s.x[0].at(cy, cx, 0), 0.9f);
  EXPECT_LT(s.x[0].at(0, 0, 0), 0.3f);
  float inside = 0, outside = 0;
  for (int c = 0; c < 3; ++c) {
    inside += s.v[0].at(cy, cx, c);
    outside += s.v[0].at(0, 0, c);
  }
  EXPECT_GT(inside, outside);
}

TEST(Synth, ConfigValidation) {
  auto c = small_synth();
  c.max_size = 70;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_synth();
  c.occlusion_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(config_from_json<SynthConfig>(nlohmann::json{{"sequences", 3}}), ConfigError);
  EXPECT_EQ(config_from_json<SynthConfig>(nlohmann::json{{"num_sequences", 3}}).num_sequences, 3u);
}

TEST_F(TempDir, DatasetLoadsWhatSynthWrote) {
  const auto manifest = synth_generate(small_synth(), path("d"));
  EXPECT_EQ(manifest["sequences"].size(), 2u);
  EXPECT_EQ(manifest["seed"], 3);
  const auto data = load_dataset(path("d"));
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].name, "seq_000");
  EXPECT_EQ(data[0].v.size(), 6u);
  EXPECT_EQ(data[0].x[0].channels, 1u);
  EXPECT_EQ(data[0].v[0].channels, 3u);
  EXPECT_EQ(data[1].gt.size(), 6u);
  fs::remove(path("d/seq_001/x/000005.pgm"));
  EXPECT_THROW(load_dataset(path("d")), FormatError);
}

TrackerConfig toy_model() {
  TrackerConfig c;
  c.template_size = 32;
  c.search_size = 64;
  c.layers = 2;
  c.stma_blocks = 1;
  c.dropout = 0.0;
  return c;
}

TEST_F(TempDir, BatchConstruction) {
  synth_generate(small_synth(), path("d"));
  const auto data = load_dataset(path("d"));
  TrainConfig tc;
  tc.batch = 3;
  Rng rng(1);
  std::vector<SampleRef> refs;
  for (std::size_t b = 0; b < tc.batch; ++b) refs.push_back(sample_ref(data, tc, rng));
  for (const auto& r : refs) {
    EXPECT_EQ(r.templates.size(), 3u);
    EXPECT_TRUE(std::is_sorted(r.templates.begin(), r.templates.end()));
    EXPECT_EQ(r.search.size(), 2u);
  }
  const auto mc = toy_model();
  const auto [in, targets] = build_batch<float>(data, refs, mc, tc, rng);
  EXPECT_EQ(in.search_v.shape(), (Shape{6, 16, 768}));
  EXPECT_EQ(in.templates_x.shape(), (Shape{6, 12, 768}));
  EXPECT_EQ(in.template_frames, 3u);
  ASSERT_EQ(targets.size(), 6u);
  // canvas equals the search size, so the crop is the frame itself
  const auto& g = data[refs[0].sequence].gt[refs[0].search[0]].box;
  EXPECT_DOUBLE_EQ(targets[0].box.cx, g.cx() / 64.0);
  EXPECT_DOUBLE_EQ(targets[0].box.w, g.w / 64.0);
}

nlohmann::json toy_run_config(std::size_t steps) {
  auto m = config_to_json(toy_model());
  nlohmann::json t{{"steps", steps}, {"batch", 1}, {"log_every", 1}};
  return {{"model", m}, {"train", t}};
}

TEST_F(TempDir, EndToEndCommandsAreDeterministic) {
  write_json_file(path("synth.json"), config_to_json(small_synth(9)));
  write_json_file(path("run.json"), toy_run_config(3));
  auto r = cli({"synth", "--config", path("synth.json"), "--out", path("data")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("data/config.json")));
  for (const char* run : {"a", "b"}) {
    const std::string base = path(run);
    r = cli({"train", "--data", path("data"), "--out", base + "/train", "--config", path("run.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("step 2"), std::string::npos);
    r = cli({"track", "--data", path("data"), "--checkpoint", base + "/train/model.ubat", "--out", base + "/res"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli({"eval", "--data", path("data"), "--results", base + "/res", "--out", base + "/eval"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("seq_001"), std::string::npos);
  }
  EXPECT_EQ(slurp(path("a/train/model.ubat")), slurp(path("b/train/model.ubat")));
  EXPECT_EQ(slurp(path("a/train/loss.csv")), slurp(path("b/train/loss.csv")));
  EXPECT_EQ(slurp(path("a/eval/report.json")), slurp(path("b/eval/report.json")));
  // resolved config echo carries every default
  const auto echo = nlohmann::json::parse(slurp(path("a/train/config.json")));
  EXPECT_EQ(echo["model"].size(), config_to_json(TrackerConfig{}).size());
  EXPECT_EQ(echo["train"]["steps"], 3);
  EXPECT_EQ(echo["model"]["lambda1"], 5.0);
  const auto csv = slurp(path("a/train/loss.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto res = read_results(path("a/res/seq_000.txt"));
  EXPECT_EQ(res.boxes.size(), 6u);
  EXPECT_TRUE(fs::exists(path("a/res/config.json")));
}

TEST_F(TempDir, EvalOnFixtureMatchesCommittedReport) {
  const auto r = cli({"eval", "--data", kFixture + "/data", "--results", kFixture + "/results", "--out", path("e")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto got = nlohmann::json::parse(slurp(path("e/report.json")));
  const auto expected = nlohmann::json::parse(slurp(kFixture + "/expected_report.json"));
  for (const auto& [key, v] : expected["overall"].items())
    EXPECT_NEAR(got["overall"][key].get<double>(), v.get<double>(), 1e-9) << key;
  for (const auto& [name, m] : expected["sequences"].items())
    for (const auto& [key, v] : m.items())
      EXPECT_NEAR(got["sequences"][name][key].get<double>(), v.get<double>(), 1e-9) << name << key;
  EXPECT_NE(r.out.find("mean"), std::string::npos);
}

TEST(Cli, Schedule) {
  auto r = cli({"schedule", "--frame", "100", "--templates", "3"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "0,16,49,82\n");
  EXPECT_EQ(cli({"schedule", "--frame", "57", "--templates", "1"}).out, "0\n");
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"schedule", "--frame", "3", "--templates", "2", "--bogus"}).code, 2);
  EXPECT_EQ(cli({"nonsense"}).code, 2);
  EXPECT_EQ(cli({"schedule", "--frame", "x", "--templates", "2"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST_F(TempDir, ConfigErrorsExitTwo) {
  std::ofstream(path("bad.json")) << "{\"model\": {\"dimm\": 3}}";
  std::ofstream(path("broken.json")) << "{not json";
  std::ofstream(path("section.json")) << "{\"optim\": {}}";
  for (const char* f : {"bad.json", "broken.json", "section.json", "missing.json"}) {
    const auto r = cli({"train", "--data", path("nodata"), "--out", path("o"), "--config", path(f)});
    EXPECT_EQ(r.code, 2) << f << " " << r.err;
  }
}

TEST_F(TempDir, RuntimeErrorsExitOne) {
  auto r = cli({"eval", "--data", path("nothing"), "--results", path("none"), "--out", path("o")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nothing"), std::string::npos);
  write_json_file(path("run.json"), toy_run_config(1));
  std::ofstream(path("fake.ubat")) << "UBAT";
  fs::create_directories(path("data"));
  synth_generate(small_synth(), path("data"));
  r = cli({"track", "--data", path("data"), "--checkpoint", path("fake.ubat"), "--config", path("run.json"), "--out",
           path("o")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("truncated"), std::string::npos) << r.err;
}

TEST(Cli, Checks) {
  const auto s = cli({"scancheck", "--seed", "3", "--shapes", "12"});
  EXPECT_EQ(s.code, 0) << s.out;
  const auto g = cli({"gradcheck", "--seed", "7"});
  EXPECT_EQ(g.code, 0) << g.out;
  for (const auto& name : grad_suite_names()) EXPECT_NE(g.out.find(name), std::string::npos) << name;
}

TEST(GradSuite, CoversEveryBlock) {
  const auto names = grad_suite_names();
  for (const char* n : {"mamba", "multifft", "stma", "dmfm", "head", "loss_total", "ssm.zoh", "ssm.scan_fast"})
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
}

}  // namespace
}  // namespace ubatrack
