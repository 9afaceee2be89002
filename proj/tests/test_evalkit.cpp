#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ubatrack/evalkit.hpp"

namespace ubatrack {
namespace {

namespace fs = std::filesystem;

const std::string kFixture = std::string(UBATRACK_FIXTURE_DIR) + "/eval";

SequenceResult make_result(const std::vector<Box>& pred, const std::vector<Box>& gt) {
  SequenceResult r;
  r.boxes = pred;
  r.confidence.assign(pred.size(), 1.0);
  for (const auto& g : gt) r.gt.push_back(gt_from_box(g));
  return r;
}

SequenceResult random_result(std::uint64_t seed, std::size_t n = 30) {
  Rng rng(seed);
  SequenceResult r;
  for (std::size_t i = 0; i < n; ++i) {
    const Box g{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(5, 40), rng.uniform(5, 40)};
    r.gt.push_back({g, rng.uniform() > 0.15 || i == 0});
    r.boxes.push_back({g.x + rng.uniform(-20, 20), g.y + rng.uniform(-20, 20), g.w * rng.uniform(0.5, 1.5),
                       g.h * rng.uniform(0.5, 1.5)});
    r.confidence.push_back(rng.uniform());
  }
  return r;
}

TEST(CenterPrecision, Examples) {
  std::vector<Box> gt{{0, 0, 10, 10}, {0, 0, 10, 10}, {0, 0, 10, 10}};
  EXPECT_EQ(center_precision(make_result(gt, gt)), 1.0);
  auto r = make_result({{0, 0, 10, 10}, {10, 0, 10, 10}, {30, 0, 10, 10}}, gt);
  EXPECT_DOUBLE_EQ(center_precision(r, 20), 2.0 / 3.0);
  auto absent = make_result({{1, 1, 1, 1}}, {{0, 0, 0, 0}});
  EXPECT_THROW(center_precision(absent), DomainError);
  EXPECT_THROW(center_precision(r, 0.0), DomainError);
  r.confidence.pop_back();
  EXPECT_THROW(center_precision(r), ShapeError);
}

TEST(CenterPrecision, BoundaryIsInclusive) {
  auto r = make_result({{20, 0, 10, 10}}, {{0, 0, 10, 10}});
  EXPECT_EQ(center_precision(r, 20), 1.0);
  EXPECT_EQ(center_precision(r, 19.999), 0.0);
}

TEST(Success, Examples) {
  std::vector<Box> gt{{0, 0, 10, 10}, {5, 5, 4, 4}};
  EXPECT_EQ(success_auc(make_result(gt, gt)), 1.0);
  auto miss = make_result({{50, 50, 10, 10}, {90, 90, 4, 4}}, gt);
  EXPECT_DOUBLE_EQ(success_auc(miss), 1.0 / 21.0);
  // IoU exactly 0.5 counts at t = 0.5
  auto half = make_result({{0, 0, 10, 5}}, {{0, 0, 10, 10}});
  const auto c = success_curve(half);
  EXPECT_EQ(c[10], 1.0);
  EXPECT_EQ(c[11], 0.0);
}

TEST(NormPrecision, Examples) {
  std::vector<Box> gt{{0, 0, 10, 20}, {5, 5, 4, 4}};
  EXPECT_EQ(norm_precision(make_result(gt, gt)), 1.0);
  // all normalized errors above 0.5: no threshold is met, frame 0 aside
  auto far = make_result({{6, 0, 10, 20}, {8, 5, 4, 4}}, gt);
  EXPECT_EQ(norm_precision(far), 0.0);
  // errors 0.25 on both frames: thresholds k/40 with k >= 10 succeed
  auto quarter = make_result({{2.5, 0, 10, 20}, {5, 6, 4, 4}}, gt);
  EXPECT_DOUBLE_EQ(norm_precision(quarter), 11.0 / 21.0);
}

TEST(NormPrecision, ScaleInvariant) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto r = random_result(seed);
    auto s = r;
    for (auto& b : s.boxes) b = {b.x * 2, b.y * 2, b.w * 2, b.h * 2};
    for (auto& g : s.gt) g.box = {g.box.x * 2, g.box.y * 2, g.box.w * 2, g.box.h * 2};
    EXPECT_DOUBLE_EQ(norm_precision(s), norm_precision(r));
    EXPECT_DOUBLE_EQ(success_auc(s), success_auc(r));
  }
}

TEST(NormPrecision, ZeroExtentGroundTruthSkipped) {
  SequenceResult r = make_result({{0, 0, 10, 10}, {40, 40, 3, 3}}, {{0, 0, 10, 10}, {0, 0, 10, 10}});
  r.gt[1] = {{30, 30, 0, 5}, true};
  EXPECT_EQ(norm_precision(r), 1.0);
}

TEST(MetricProperties, RangeAndMonotonicity) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto r = random_result(seed);
    for (double v : {center_precision(r), success_auc(r), norm_precision(r)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    double prev = 0;
    for (double t = 1; t <= 50; t += 1) {
      const double p = center_precision(r, t);
      EXPECT_GE(p, prev);
      prev = p;
    }
    const auto c = success_curve(r);
    for (std::size_t k = 1; k < c.size(); ++k) EXPECT_LE(c[k], c[k - 1]);
    const auto f = f_score_lt({r});
    EXPECT_GE(f.f, 0.0);
    EXPECT_LE(f.f, 1.0);
  }
}

TEST(MetricProperties, SequenceOrderInvariance) {
  std::vector<SequenceResult> set{random_result(1), random_result(2), random_result(3)};
  std::vector<SequenceResult> rev(set.rbegin(), set.rend());
  const auto a = f_score_lt(set), b = f_score_lt(rev);
  EXPECT_EQ(a.f, b.f);
  EXPECT_EQ(a.tau, b.tau);
  EXPECT_DOUBLE_EQ(mean_over(set, success_auc), mean_over(rev, success_auc));
}

TEST(FScore, PerfectTracking) {
  std::vector<Box> gt{{0, 0, 10, 10}, {0, 0, 0, 0}, {3, 3, 5, 5}};
  auto r = make_result({{0, 0, 10, 10}, {7, 7, 5, 5}, {3, 3, 5, 5}}, gt);
  r.confidence = {1.0, 0.0, 1.0};
  const auto f = f_score_lt({r});
  EXPECT_EQ(f.f, 1.0);
  EXPECT_EQ(f.precision, 1.0);
  EXPECT_EQ(f.recall, 1.0);
  EXPECT_EQ(f.tau, 1.0);
}

TEST(FScore, HarmonicMeanIdentity) {
  // no absent frames and every frame reported at the best tau: Pr == Re
  std::vector<Box> gt{{0, 0, 10, 10}, {0, 0, 10, 10}};
  auto r = make_result({{0, 0, 10, 5}, {0, 0, 5, 10}}, gt);
  const auto f = f_score_lt({r});
  EXPECT_DOUBLE_EQ(f.precision, f.recall);
  EXPECT_DOUBLE_EQ(f.f, f.precision);
}

TEST(FScore, AllAbsentIsError) {
  auto r = make_result({{1, 1, 2, 2}}, {{0, 0, 0, 0}});
  EXPECT_THROW(f_score_lt({r}), DomainError);
}

TEST(Fixture, MatchesScriptedOracle) {
  std::ifstream f(kFixture + "/expected_report.json");
  ASSERT_TRUE(f.good());
  const auto expected = nlohmann::json::parse(f);
  const auto got = metrics_report(load_results(kFixture + "/data", kFixture + "/results"));
  ASSERT_EQ(got["sequences"].size(), expected["sequences"].size());
  for (const auto& [name, m] : expected["sequences"].items())
    for (const auto& [key, v] : m.items()) EXPECT_NEAR(got["sequences"][name][key].get<double>(), v.get<double>(), 1e-9) << name << " " << key;
  for (const auto& [key, v] : expected["overall"].items())
    EXPECT_NEAR(got["overall"][key].get<double>(), v.get<double>(), 1e-9) << key;
}

class BoxFiles : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / "ubatrack_boxfiles";
  void SetUp() override { fs::create_directories(dir); }
  void TearDown() override { fs::remove_all(dir); }
  std::string file(const std::string& name, const std::string& text) {
    const auto p = dir / name;
    std::ofstream(p) << text;
    return p.string();
  }
};

TEST_F(BoxFiles, RoundTrip) {
  auto r = random_result(4, 12);
  write_results((dir / "r.txt").string(), r);
  auto back = read_results((dir / "r.txt").string());
  EXPECT_EQ(back.boxes, r.boxes);
  EXPECT_EQ(back.confidence, r.confidence);
  std::vector<GroundTruth> gt{{{1.5, 2, 3, 4}, true}, {{}, false}};
  write_groundtruth((dir / "g.txt").string(), gt);
  auto g2 = read_groundtruth((dir / "g.txt").string());
  EXPECT_EQ(g2[0].box, gt[0].box);
  EXPECT_TRUE(g2[0].present);
  EXPECT_FALSE(g2[1].present);
  EXPECT_EQ(std::ifstream(dir / "g.txt").rdbuf() ? true : false, true);
}

TEST_F(BoxFiles, MalformedInput) {
  EXPECT_THROW(read_groundtruth(file("a.txt", "1,2,3\n")), FormatError);
  EXPECT_THROW(read_groundtruth(file("b.txt", "1,2,x,4\n")), FormatError);
  EXPECT_THROW(read_results(file("c.txt", "1,2,3,4\n")), FormatError);
  EXPECT_THROW(read_groundtruth((dir / "missing.txt").string()), Error);
  EXPECT_EQ(read_groundtruth(file("d.txt", "1, 2 ,3,4\r\n\n")).size(), 1u);
  EXPECT_THROW(check_line_count("e.txt", 9, 10), FormatError);
}

TEST_F(BoxFiles, ResultCountMustMatchFrames) {
  fs::create_directories(dir / "data" / "s");
  fs::create_directories(dir / "res");
  file("data/s/groundtruth.txt", "1,1,4,4\n2,2,4,4\n");
  file("res/s.txt", "1,1,4,4,1\n");
  EXPECT_THROW(load_results((dir / "data").string(), (dir / "res").string()), FormatError);
}

// Small scene: a bright square on noise, moving right.
SequenceFrames toy_sequence(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SequenceFrames s;
  s.name = "toy" + std::to_string(seed);
  for (std::size_t t = 0; t < n; ++t) {
    Image v(64, 64, 3), x(64, 64, 1);
    for (auto& p : v.pixels) p = float(0.3 * rng.uniform());
    for (auto& p : x.pixels) p = float(0.2 * rng.uniform());
    const Box b{10.0 + 3.0 * double(t), 20, 12, 12};
    for (std::size_t yy = 20; yy < 32; ++yy)
      for (std::size_t xx = std::size_t(b.x); xx < std::size_t(b.x) + 12; ++xx) {
        v.at(yy, xx, 0) = 0.9f;
        x.at(yy, xx, 0) = 1.0f;
      }
    s.v.push_back(std::move(v));
    s.x.push_back(std::move(x));
    s.gt.push_back({b, true});
  }
  return s;
}

TrackerConfig runner_config() {
  TrackerConfig c;
  c.template_size = 32;
  c.search_size = 48;
  c.layers = 2;
  c.stma_blocks = 1;
  c.dropout = 0.0;
  return c;
}

TEST(Runner, FrameZeroAndLength) {
  const auto m = build_model<float>(runner_config());
  const auto s = toy_sequence(6, 1);
  const auto r = run_sequence(m, s, s.gt[0].box, 2);
  EXPECT_EQ(r.size(), 6u);
  EXPECT_EQ(r.boxes[0], s.gt[0].box);
  EXPECT_EQ(r.confidence[0], 1.0);
  for (std::size_t i = 1; i < r.size(); ++i) {
    EXPECT_GT(r.boxes[i].w, 0.0);
    EXPECT_GE(r.confidence[i], 0.0);
    EXPECT_LE(r.confidence[i], 1.0);
  }
  r.validate();
}

TEST(Runner, StaticTemplateWhenSingleReference) {
  const auto cfg = runner_config();
  auto m = build_model<float>(cfg);
  Rng rng(2);
  m.visit_trainable([&](const std::string&, Tensor<float>& t) {
    for (auto& v : t.mutable_data()) v += float(0.1 * (rng.uniform() - 0.5));
  });
  const auto s = toy_sequence(5, 2);
  const auto r = run_sequence(m, s, s.gt[0].box, 1);
  // hand-rolled loop that only ever uses frame 0 as template
  NoGradGuard guard;
  const Image tv = template_crop(s.v[0], s.gt[0].box, cfg.template_size);
  const Image tx = template_crop(s.x[0], s.gt[0].box, cfg.template_size);
  Box prev = s.gt[0].box;
  for (std::size_t t = 1; t < s.v.size(); ++t) {
    const auto win = search_window(s.v[t], prev, cfg.search_size);
    const auto in = make_input<float>({{tv}}, {{crop(tx, {0, 0, cfg.template_size})}}, {crop(s.v[t], win)},
                                      {crop(s.x[t], win)}, cfg.patch);
    const auto d = head_decode(forward_track(in, m));
    prev = from_crop_norm(d.box, win);
    EXPECT_EQ(r.boxes[t], prev) << t;
    EXPECT_EQ(r.confidence[t], d.score);
  }
}

TEST(Runner, Errors) {
  const auto m = build_model<float>(runner_config());
  auto s = toy_sequence(3, 3);
  s.x.pop_back();
  EXPECT_THROW(run_sequence(m, s, s.gt[0].box, 2), ShapeError);
  s = toy_sequence(3, 3);
  EXPECT_THROW(run_sequence(m, s, s.gt[0].box, 0), ConfigError);
}

TEST(Runner, ParallelMatchesSerial) {
  const auto m = build_model<float>(runner_config());
  const std::vector<SequenceFrames> seqs{toy_sequence(4, 4), toy_sequence(5, 5), toy_sequence(3, 6)};
  ::setenv("UBATRACK_THREADS", "1", 1);
  EXPECT_EQ(worker_count(8), 1u);
  const auto serial = run_sequences(m, seqs, 2);
  ::setenv("UBATRACK_THREADS", "3", 1);
  EXPECT_EQ(worker_count(2), 2u);
  const auto parallel = run_sequences(m, seqs, 2);
  ::unsetenv("UBATRACK_THREADS");
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    EXPECT_EQ(serial[i].boxes, parallel[i].boxes);
    EXPECT_EQ(serial[i].confidence, parallel[i].confidence);
  }
}

TEST(Geometry, CropNormRoundTrip) {
  Image frame(100, 120, 3);
  const Box b{30.5, 40, 20, 14};
  const auto win = search_window(frame, b, 64);
  const auto nb = to_crop_norm(b, win);
  const auto back = from_crop_norm(nb, win);
  EXPECT_NEAR(back.x, b.x, 1e-12);
  EXPECT_NEAR(back.y, b.y, 1e-12);
  EXPECT_NEAR(back.w, b.w, 1e-12);
  EXPECT_NEAR(back.h, b.h, 1e-12);
}

}  // namespace
}  // namespace ubatrack
