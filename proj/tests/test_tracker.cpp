#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "ubatrack/tracker.hpp"

namespace ubatrack {
namespace {

using testing::bitwise_equal;
using testing::max_abs_diff;
using testing::probe;
using testing::random_tensor;

Image noise_image(std::size_t size, std::uint64_t seed, std::size_t channels = 3) {
  Rng rng(seed);
  Image img(size, size, channels);
  for (auto& v : img.pixels) v = float(rng.uniform());
  return img;
}

TrackerConfig toy_config(std::size_t layers = 2, std::size_t blocks = 1) {
  TrackerConfig c;
  c.template_size = 32;
  c.search_size = 48;
  c.patch = 16;
  c.layers = layers;
  c.dim = 32;
  c.heads = 4;
  c.stma_blocks = blocks;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

template <class T>
TrackInput<T> random_input(const TrackerConfig& c, std::size_t B, std::size_t templates, std::uint64_t seed) {
  std::vector<std::vector<Image>> tv(B), tx(B);
  std::vector<Image> sv, sx;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < templates; ++k) {
      tv[b].push_back(noise_image(c.template_size, seed + 10 * b + k));
      tx[b].push_back(crop(noise_image(c.template_size, seed + 500 + 10 * b + k, 1), {0, 0, c.template_size}));
    }
    sv.push_back(noise_image(c.search_size, seed + 1000 + b));
    sx.push_back(crop(noise_image(c.search_size, seed + 2000 + b, 1), {0, 0, c.search_size}));
  }
  return make_input<T>(tv, tx, sv, sx, c.patch);
}

template <class T>
void perturb_trainable(TrackerModel<T>& m, std::uint64_t seed, double scale = 0.2) {
  Rng rng(seed);
  m.visit_trainable([&](const std::string&, Tensor<T>& t) {
    for (auto& v : t.mutable_data()) v += T(scale * (rng.uniform() - 0.5));
  });
}

template <class T>
std::vector<std::vector<T>> snapshot(TrackerModel<T>& m, bool frozen) {
  std::vector<std::vector<T>> out;
  auto grab = [&](const std::string&, Tensor<T>& t) { out.push_back(t.values()); };
  if (frozen) m.visit_frozen(grab);
  else m.visit_trainable(grab);
  return out;
}

TEST(PatchEmbed, TokenCounts) {
  EXPECT_EQ(patch_count(Image(256, 256, 3), 16), 256u);
  EXPECT_EQ(patch_count(Image(128, 128, 3), 16), 64u);
  std::vector<float> buf(256 * 768);
  EXPECT_NO_THROW(patchify_into(Image(256, 256, 3), 16, buf.data()));
  EXPECT_THROW(patchify_into(Image(250, 256, 3), 16, buf.data()), ShapeError);
}

TEST(PatchEmbed, ZeroImageGivesPositionalEmbedding) {
  BackboneShape s;
  s.template_tokens = 64;
  s.search_tokens = 256;
  s.layers = 1;
  auto p = backbone_init<double>(s, 1);
  auto zeros = Tensor<double>::zeros({1, 256, 768});
  auto tok = patch_embed(zeros, p, p.pos_search);
  EXPECT_EQ(tok.shape(), (Shape{1, 256, 32}));
  EXPECT_EQ(tok.values(), p.pos_search.values());
  // tiled over frames for multi-template inputs
  auto tok2 = patch_embed(Tensor<double>::zeros({1, 128, 768}), p, p.pos_template);
  EXPECT_TRUE(bitwise_equal(slice(tok2, 1, 64, 64), reshape(p.pos_template, {1, 64, 32})));
}

TEST(PatchEmbed, PatchLayout) {
  Image img(32, 32, 3);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = float(y * 1000 + x * 10 + c);
  std::vector<float> buf(4 * 768);
  patchify_into(img, 16, buf.data());
  // patch 1 is the top-right block; entry (py=2, px=3, c=1)
  EXPECT_EQ(buf[768 + (2 * 16 + 3) * 3 + 1], float(2 * 1000 + (16 + 3) * 10 + 1));
  // patch 2 is bottom-left
  EXPECT_EQ(buf[2 * 768], float(16 * 1000));
}

TEST(Crop, ZeroPaddedTemplateAndClampedSearch) {
  Image img(20, 20, 1, 1.0f);
  auto w = centred_window(img, 2.0, 2.0, 8, false);
  EXPECT_EQ(w.x0, -2.0);
  auto c = crop(img, w);
  EXPECT_EQ(c.channels, 3u);
  EXPECT_EQ(c.at(0, 0, 0), 0.0f);
  EXPECT_EQ(c.at(2, 2, 2), 1.0f);
  auto s = centred_window(img, 2.0, 19.0, 8, true);
  EXPECT_EQ(s.x0, 0.0);
  EXPECT_EQ(s.y0, 12.0);
  Box b{5, 6, 3, 4};
  EXPECT_EQ(s.to_frame(s.to_crop(b)), b);
}

TEST(Forward, ShapeOfScoreMap) {
  TrackerConfig c;
  c.template_size = 128;
  c.search_size = 256;
  c.layers = 2;
  c.stma_blocks = 1;
  c.dim = 16;
  c.heads = 2;
  c.fft_blocks = 3;
  auto m = build_model<float>(c);
  NoGradGuard guard;
  auto pred = forward_track(random_input<float>(c, 1, 1, 1), m);
  EXPECT_EQ(pred.cls.shape(), (Shape{1, 16, 16, 1}));
  EXPECT_EQ(pred.size.shape(), (Shape{1, 16, 16, 2}));
  EXPECT_EQ(pred.offset.shape(), (Shape{1, 16, 16, 2}));
}

TEST(Forward, AdapterIdentityAtInit) {
  for (std::size_t blocks : {1u, 2u, 3u}) {
    auto c = toy_config(6, blocks);
    c.dropout = 0.1;
    auto full = build_model<float>(c);
    auto base_cfg = c;
    base_cfg.stma_blocks = 0;
    base_cfg.use_dmfm = false;
    auto base = build_model<float>(base_cfg);
    auto in = random_input<float>(c, 2, 3, 5);
    NoGradGuard guard;
    auto a = forward_track(in, full);
    auto b = forward_track(in, base);
    EXPECT_TRUE(bitwise_equal(a.cls, b.cls)) << blocks;
    EXPECT_TRUE(bitwise_equal(a.size, b.size));
    EXPECT_TRUE(bitwise_equal(a.offset, b.offset));
    // training mode dropout acts on the zero branches only
    Rng rng(4);
    EXPECT_TRUE(bitwise_equal(forward_track(in, full, {true, &rng}).cls, b.cls));
  }
}

TEST(Forward, DeterministicAndSensitiveToTemplates) {
  auto c = toy_config(4, 2);
  auto m = build_model<double>(c);
  perturb_trainable(m, 1);
  NoGradGuard guard;
  auto in = random_input<double>(c, 1, 2, 7);
  auto a = forward_track(in, m);
  EXPECT_TRUE(bitwise_equal(a.cls, forward_track(in, m).cls));
  auto other = random_input<double>(c, 1, 2, 8);
  other.search_v = in.search_v;
  other.search_x = in.search_x;
  EXPECT_GT(max_abs_diff(a.cls, forward_track(other, m).cls), 0.0);
}

TEST(Forward, MisalignedModalities) {
  auto c = toy_config();
  auto m = build_model<float>(c);
  auto in = random_input<float>(c, 1, 2, 1);
  in.templates_x = slice(in.templates_x, 1, 0, 4);
  EXPECT_THROW(forward_track(in, m), ShapeError);
}

TEST(Forward, GradCheckToyPipeline) {
  auto c = toy_config(2, 1);
  auto m = build_model<double>(c);
  perturb_trainable(m, 2, 0.1);
  auto in = random_input<double>(c, 1, 2, 11);
  std::vector<NamedTensor> params;
  m.visit_trainable([&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, t); });
  GradCheckOptions opt;
  opt.max_entries_per_param = 3;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    opt.sample_seed = seed;
    auto report = grad_check(
        [&] {
          auto p = forward_track(in, m);
          return add(add(probe(p.cls, seed), probe(p.size, seed + 1)), probe(p.offset, seed + 2));
        },
        params, opt);
    for (const auto& e : report.params)
      EXPECT_LE(e.max_rel_error, 1e-4) << e.name << " seed " << seed;
  }
}

BoxPrediction<double> maps(std::size_t H, std::size_t W, double cls_fill, double off, double size) {
  return {Tensor<double>::full({1, H, W, 1}, cls_fill), Tensor<double>::full({1, H, W, 2}, size),
          Tensor<double>::full({1, H, W, 2}, off)};
}

TEST(Decode, Examples) {
  auto p = maps(16, 16, 0.1, 0.5, 0.25);
  p.cls.mutable_data()[0] = 0.9;
  auto d = head_decode(p);
  EXPECT_DOUBLE_EQ(d.box.cx, 0.03125);
  EXPECT_DOUBLE_EQ(d.box.cy, 0.03125);
  EXPECT_DOUBLE_EQ(d.box.w, 0.25);
  EXPECT_DOUBLE_EQ(d.box.h, 0.25);

  auto u = maps(16, 16, 0.3, 0.0, 0.1);
  auto du = head_decode(u);
  EXPECT_EQ(du.row, 0u);
  EXPECT_EQ(du.col, 0u);

  auto c = maps(16, 16, 0.1, 0.0, 0.1);
  c.cls.mutable_data()[8 * 16 + 8] = 0.8;
  auto dc = head_decode(c);
  EXPECT_DOUBLE_EQ(dc.box.cx, 0.5);
  EXPECT_DOUBLE_EQ(dc.box.cy, 0.5);
}

TEST(Decode, TiesPickSmallestRowThenColumn) {
  auto p = maps(4, 4, 0.1, 0.0, 0.1);
  p.cls.mutable_data()[2 * 4 + 1] = 0.7;
  p.cls.mutable_data()[1 * 4 + 3] = 0.7;
  p.cls.mutable_data()[1 * 4 + 2] = 0.7;
  auto d = head_decode(p);
  EXPECT_EQ(d.row, 1u);
  EXPECT_EQ(d.col, 2u);
}

TEST(Decode, ClampsExtents) {
  auto p = maps(8, 8, 0.1, 0.0, 0.0);
  auto d = head_decode(p);
  EXPECT_DOUBLE_EQ(d.box.w, 1e-2 / 8);
  auto q = maps(8, 8, 0.1, 0.0, 1.5);
  EXPECT_DOUBLE_EQ(head_decode(q).box.h, 1.0);
}

TEST(Decode, InvariantToPositiveScaling) {
  Rng rng(5);
  auto p = maps(6, 6, 0.0, 0.0, 0.0);
  p.cls = rand_uniform<double>({1, 6, 6, 1}, rng, 0.0, 1.0);
  p.size = rand_uniform<double>({1, 6, 6, 2}, rng, 0.0, 1.0);
  p.offset = rand_uniform<double>({1, 6, 6, 2}, rng, 0.0, 1.0);
  auto d0 = head_decode(p);
  for (double k : {0.01, 0.5, 3.0, 100.0}) {
    auto q = p;
    q.cls = mul_scalar(p.cls, k);
    auto d1 = head_decode(q);
    EXPECT_EQ(d1.row, d0.row);
    EXPECT_EQ(d1.col, d0.col);
    EXPECT_EQ(d1.box.cx, d0.box.cx);
    EXPECT_EQ(d1.box.w, d0.box.w);
  }
}

TEST(Giou, Examples) {
  EXPECT_DOUBLE_EQ(giou(Box{1, 2, 3, 4}, Box{1, 2, 3, 4}), 1.0);
  EXPECT_NEAR(giou(Box{0, 0, 2, 2}, Box{1, 1, 2, 2}), 1.0 / 7.0 - 2.0 / 9.0, 1e-12);
  EXPECT_NEAR(giou(Box{0, 0, 2, 2}, Box{1, 1, 2, 2}), -0.0794, 1e-4);
  EXPECT_NEAR(giou(Box{0, 0, 1, 1}, Box{2, 2, 1, 1}), -7.0 / 9.0, 1e-12);
  EXPECT_THROW(giou(Box{0, 0, 0, 1}, Box{0, 0, 1, 1}), DomainError);
}

TEST(Giou, TensorFormMatchesScalar) {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    NormBox gt{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
    NormBox pb{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
    auto t = giou_loss_term(Tensor<double>::from_data({4}, {pb.cx, pb.cy, pb.w, pb.h}), gt);
    const double ref = giou(Box{pb.cx - pb.w / 2, pb.cy - pb.h / 2, pb.w, pb.h},
                            Box{gt.cx - gt.w / 2, gt.cy - gt.h / 2, gt.w, gt.h});
    EXPECT_NEAR(t.item(), ref, 1e-12);
  }
}

TEST(Focal, HalfProbabilityExample) {
  auto cls = Tensor<double>::full({2, 2}, 0.5);
  auto target = Tensor<double>::from_data({2, 2}, {1, 0, 0, 0});
  EXPECT_NEAR(focal_loss(cls, target, true).item(), std::log(2.0), 1e-12);
}

TEST(Focal, PerfectPrediction) {
  auto target = Tensor<double>::from_data({2, 2}, {1, 0, 0, 0});
  auto cls = Tensor<double>::from_data({2, 2}, {1.0, 0.0, 0.0, 0.0});
  EXPECT_LT(focal_loss(cls, target, true).item(), 1e-4);
}

TEST(Focal, NormalizedPerPositive) {
  Rng rng(1);
  auto cls = rand_uniform<double>({2, 3}, rng, 0.05, 0.95);
  auto target = Tensor<double>::from_data({2, 3}, {1, 0.4, 0.1, 0.2, 0, 0.3});
  const double one = focal_loss(cls, target, true).item();
  auto cls2 = concat(std::vector<Tensor<double>>{cls, cls}, 0);
  auto target2 = concat(std::vector<Tensor<double>>{target, target}, 0);
  EXPECT_NEAR(focal_loss(cls2, target2, true).item(), one, 1e-12);
}

TEST(Focal, Errors) {
  auto cls = Tensor<double>::full({2, 2}, 0.5);
  EXPECT_THROW(focal_loss(cls, Tensor<double>::full({2, 2}, 0.2), true), DomainError);
  EXPECT_NO_THROW(focal_loss(cls, Tensor<double>::full({2, 2}, 0.0), false));
  EXPECT_THROW(focal_loss(cls, Tensor<double>::full({2, 2}, 1.5), false), DomainError);
}

TEST(Focal, GaussianTarget) {
  auto t = gaussian_target<double>(5, 5, 1, 3);
  EXPECT_EQ(t[1 * 5 + 3], 1.0);
  EXPECT_NEAR(t[1 * 5 + 4], std::exp(-0.5), 1e-15);
  EXPECT_EQ(std::count(t.values().begin(), t.values().end(), 1.0), 1);
}

// Independent scalar evaluation of the per-frame objective.
double scripted_frame_loss(const BoxPrediction<double>& p, std::size_t b, const FrameTarget& tg, double l1w,
                           double l2w) {
  const std::size_t H = p.grid_h(), W = p.grid_w();
  std::size_t row = 0, col = 0, npos = 0;
  if (tg.present) {
    col = std::min<std::size_t>(W - 1, std::size_t(tg.box.cx * double(W)));
    row = std::min<std::size_t>(H - 1, std::size_t(tg.box.cy * double(H)));
  }
  double focal = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double pr = std::clamp(p.cls[(b * H + r) * W + c], 1e-6, 1 - 1e-6);
      double t = tg.present ? std::exp(-(std::pow(double(r) - double(row), 2) + std::pow(double(c) - double(col), 2)) / 2.0) : 0.0;
      if (tg.present && r == row && c == col) {
        focal -= std::pow(1 - pr, 2) * std::log(pr);
        ++npos;
      } else {
        focal -= std::pow(1 - t, 4) * std::pow(pr, 2) * std::log(1 - pr);
      }
    }
  focal /= double(std::max<std::size_t>(1, npos));
  if (!tg.present) return focal;
  const std::size_t at = ((b * H + row) * W + col) * 2;
  const double cx = (double(col) + p.offset[at]) / double(W), cy = (double(row) + p.offset[at + 1]) / double(H);
  const double w = p.size[at], h = p.size[at + 1];
  const double l1 = (std::abs(cx - tg.box.cx) + std::abs(cy - tg.box.cy) + std::abs(w - tg.box.w) +
                     std::abs(h - tg.box.h)) / 4.0;
  const double g = giou(Box{cx - w / 2, cy - h / 2, w, h},
                        Box{tg.box.cx - tg.box.w / 2, tg.box.cy - tg.box.h / 2, tg.box.w, tg.box.h});
  return focal + l1w * l1 + l2w * (1 - g);
}

BoxPrediction<double> random_prediction(std::size_t B, std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  return {rand_uniform<double>({B, H, W, 1}, rng, 0.02, 0.98), rand_uniform<double>({B, H, W, 2}, rng, 0.05, 0.6),
          rand_uniform<double>({B, H, W, 2}, rng, 0.02, 0.98)};
}

TEST(Loss, MatchesScriptedOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto p = random_prediction(3, 5, 4, seed);
    std::vector<FrameTarget> tg{{{0.31, 0.47, 0.2, 0.3}, true}, {{0, 0, 0, 0}, false}, {{0.9, 0.12, 0.1, 0.15}, true}};
    auto parts = loss_total(p, tg);
    double ref = 0;
    for (std::size_t b = 0; b < 3; ++b) ref += scripted_frame_loss(p, b, tg[b], 5.0, 2.0);
    EXPECT_NEAR(parts.total.item(), ref / 3.0, 1e-6);
  }
}

TEST(Loss, AverageOfFrames) {
  auto p = random_prediction(2, 4, 4, 4);
  std::vector<FrameTarget> tg{{{0.3, 0.6, 0.2, 0.2}, true}, {{0.7, 0.2, 0.3, 0.1}, true}};
  auto both = loss_total(p, tg).total.item();
  auto first = loss_total(BoxPrediction<double>{slice(p.cls, 0, 0, 1), slice(p.size, 0, 0, 1), slice(p.offset, 0, 0, 1)},
                          {tg[0]}).total.item();
  auto second = loss_total(BoxPrediction<double>{slice(p.cls, 0, 1, 1), slice(p.size, 0, 1, 1), slice(p.offset, 0, 1, 1)},
                           {tg[1]}).total.item();
  EXPECT_EQ(both, (first + second) / 2);
}

TEST(Loss, PerfectPredictionNearZero) {
  const std::size_t H = 4, W = 4;
  FrameTarget tg{{(2 + 0.25) / 4.0, (1 + 0.75) / 4.0, 0.3, 0.2}, true};
  auto p = maps(H, W, 0.0, 0.0, 0.0);
  p.cls.mutable_data()[1 * 4 + 2] = 1.0;
  const std::size_t at = (1 * 4 + 2) * 2;
  p.offset.mutable_data()[at] = 0.25;
  p.offset.mutable_data()[at + 1] = 0.75;
  p.size.mutable_data()[at] = 0.3;
  p.size.mutable_data()[at + 1] = 0.2;
  // background cells follow the Gaussian target closely enough to vanish
  EXPECT_LT(loss_total(p, {tg}).total.item(), 1e-3);
}

TEST(Loss, NonNegativeAndErrors) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = random_prediction(2, 3, 3, seed);
    auto parts = loss_total(p, {{{0.5, 0.5, 0.2, 0.2}, true}, {{}, false}});
    EXPECT_GE(parts.total.item(), 0.0);
    EXPECT_GE(parts.focal, 0.0);
    EXPECT_GE(parts.l1, 0.0);
    EXPECT_LE(parts.giou, 1.0);
  }
  auto p = random_prediction(1, 3, 3, 1);
  EXPECT_THROW(loss_total(p, {}), ShapeError);
  EXPECT_THROW(loss_total(p, {{}, {}}), ShapeError);
}

TEST(Loss, GradCheck) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto p = random_prediction(2, 4, 4, seed + 20);
    p.cls.set_requires_grad();
    p.size.set_requires_grad();
    p.offset.set_requires_grad();
    std::vector<FrameTarget> tg{{{0.37, 0.58, 0.21, 0.33}, true}, {{0.81, 0.1, 0.3, 0.12}, true}};
    auto report = grad_check([&] { return loss_total(p, tg).total; },
                             {{"cls", p.cls}, {"size", p.size}, {"offset", p.offset}});
    EXPECT_TRUE(report.passed()) << report.max_rel_error;
  }
}

TEST(Schedule, Examples) {
  EXPECT_EQ(template_schedule(57, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(template_schedule(0, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(template_schedule(100, 3), (std::vector<std::size_t>{0, 16, 49, 82}));
  EXPECT_EQ(template_schedule(2, 3), (std::vector<std::size_t>{0}));
}

TEST(Schedule, Properties) {
  for (std::size_t M = 1; M <= 6; ++M)
    for (std::size_t C = 0; C <= 300; ++C) {
      const auto s = template_schedule(C, M);
      ASSERT_FALSE(s.empty());
      EXPECT_EQ(s.front(), 0u);
      EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
      EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
      EXPECT_LE(s.size(), M + 1);
      if (C > M && M >= 2) {
        EXPECT_LT(s.back(), C);
      }
    }
}

std::vector<FrameTarget> toy_targets(std::size_t n) {
  std::vector<FrameTarget> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back({{0.3 + 0.1 * double(i), 0.55, 0.25, 0.3}, true});
  return t;
}

TEST(Train, FreezeContract) {
  auto c = toy_config(4, 2);
  c.lr = 1e-3;
  auto m = build_model<float>(c);
  // moves the zero-initialized branches off the point where upstream gradients vanish
  perturb_trainable(m, 8);
  auto frozen0 = snapshot(m, true);
  auto train0 = snapshot(m, false);
  auto opt = make_optimizer(m);
  Rng rng(1);
  auto in = random_input<float>(c, 2, 2, 3);
  const auto first = train_step(m, opt, in, toy_targets(2), rng);
  EXPECT_TRUE(std::isfinite(first.loss));
  EXPECT_EQ(snapshot(m, true), frozen0);
  const auto train1 = snapshot(m, false);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < train0.size(); ++i) changed += train0[i] != train1[i];
  EXPECT_EQ(changed, train0.size());
  m.visit_frozen([](const std::string& n, Tensor<float>& t) { EXPECT_FALSE(t.has_grad()) << n; });
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  auto c = toy_config(2, 1);
  c.lr = 0.0;
  auto m = build_model<float>(c);
  auto all0 = snapshot(m, false);
  auto opt = make_optimizer(m);
  Rng rng(1);
  auto in = random_input<float>(c, 1, 2, 3);
  for (int i = 0; i < 3; ++i) train_step(m, opt, in, toy_targets(1), rng);
  EXPECT_EQ(snapshot(m, false), all0);
}

TEST(Train, LossDecreasesWhenOverfitting) {
  auto c = toy_config(2, 1);
  c.lr = 2e-3;
  auto m = build_model<float>(c);
  auto opt = make_optimizer(m);
  Rng rng(1);
  auto in = random_input<float>(c, 2, 2, 3);
  const auto targets = toy_targets(2);
  const double initial = train_step(m, opt, in, targets, rng).loss;
  double last = initial;
  for (int i = 0; i < 40; ++i) last = train_step(m, opt, in, targets, rng).loss;
  EXPECT_LT(last, initial);
}

TEST(Train, NonFiniteDiagnostic) {
  auto c = toy_config(2, 1);
  auto m = build_model<float>(c);
  m.head.size.out_b.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto opt = make_optimizer(m);
  Rng rng(1);
  try {
    train_step(m, opt, random_input<float>(c, 1, 1, 3), toy_targets(1), rng);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("head.size.out.b"), std::string::npos) << e.what();
  }
}

TEST(Train, LrSchedule) {
  EXPECT_EQ(scheduled_lr(1.0, 0, 300, 2.0 / 3.0), 1.0);
  EXPECT_EQ(scheduled_lr(1.0, 199, 300, 2.0 / 3.0), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 200, 300, 2.0 / 3.0), 0.1);
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "ubatrack_ckpt_test";
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsByteExact) {
  auto c = toy_config(2, 1);
  auto m = build_model<float>(c);
  perturb_trainable(m, 3);
  const auto path = (dir / "a.ubat").string();
  save_checkpoint(m, path);
  auto loaded = load_checkpoint<float>(c, path);
  EXPECT_EQ(serialize_model(loaded), read_file_bytes(path));
  auto bytes = read_file_bytes(path);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UBAT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST_F(CheckpointTest, DoublePrecisionZeroDrift) {
  auto c = toy_config(2, 1);
  auto m = build_model<double>(c);
  perturb_trainable(m, 4);
  auto bytes = serialize_model(m);
  auto other = build_model<double>(c);
  load_into(other, bytes);
  std::vector<std::vector<double>> a, b;
  m.visit([&](const std::string&, Tensor<double>& t) { a.push_back(t.values()); });
  other.visit([&](const std::string&, Tensor<double>& t) { b.push_back(t.values()); });
  EXPECT_EQ(a, b);
  // f64 image cannot load into an f32 model
  auto f = build_model<float>(c);
  EXPECT_THROW(load_into(f, bytes), FormatError);
}

TEST_F(CheckpointTest, CorruptFilesRejectedWithoutPartialLoad) {
  auto c = toy_config(2, 1);
  auto m = build_model<float>(c);
  perturb_trainable(m, 5);
  auto bytes = serialize_model(m);
  auto target = build_model<float>(c);
  const auto before = serialize_model(target);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 7);
  EXPECT_THROW(load_into(target, truncated), FormatError);
  EXPECT_EQ(serialize_model(target), before);

  auto padded = bytes;
  padded.push_back(0);
  EXPECT_THROW(load_into(target, padded), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load_into(target, bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(load_into(target, bad_version), FormatError);
  EXPECT_EQ(serialize_model(target), before);

  auto other_cfg = c;
  other_cfg.stma_blocks = 0;
  auto smaller = build_model<float>(other_cfg);
  EXPECT_THROW(load_into(smaller, bytes), FormatError);
}

TEST(Config, JsonRoundTripAndErrors) {
  TrackerConfig c;
  c.dim = 64;
  c.use_dmfm = false;
  c.lr = 1e-3;
  auto j = config_to_json(c);
  auto back = config_from_json<TrackerConfig>(j);
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(back.dim, 64u);
  EXPECT_EQ(config_from_json<TrackerConfig>(nlohmann::json::object()).lambda1, 5.0);
  EXPECT_THROW(config_from_json<TrackerConfig>(nlohmann::json{{"dimm", 3}}), ConfigError);
  EXPECT_THROW(config_from_json<TrackerConfig>(nlohmann::json{{"dim", "x"}}), ConfigError);
  EXPECT_THROW(config_from_json<TrackerConfig>(nlohmann::json{{"stma_blocks", 7}}), ConfigError);
  EXPECT_THROW(config_from_json<TrackerConfig>(nlohmann::json{{"search_size", 250}}), ConfigError);
  EXPECT_THROW(config_from_json<TrainConfig>(nlohmann::json{{"batch", 0}}), ConfigError);
}

TEST(Config, FullScaleDefaults) {
  TrackerConfig c;
  EXPECT_EQ(c.lambda1, 5.0);
  EXPECT_EQ(c.lambda2, 2.0);
  EXPECT_EQ(c.lr, 2e-4);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.template_size, 128u);
  EXPECT_EQ(c.search_size, 256u);
  EXPECT_EQ(c.layers, 12u);
  EXPECT_EQ(insertion_schedule(c.layers, c.stma_blocks), (std::vector<std::size_t>{2, 4, 6, 8, 10, 12}));
}

}  // namespace
}  // namespace ubatrack
