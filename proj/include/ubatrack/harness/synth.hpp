#pragma once

// Deterministic synthetic two-modality sequences.
//   V: coloured square on coloured noise (P6)
//   X: bright elliptical blob on dark noise (P5)

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubatrack/evalkit/io.hpp"
#include "ubatrack/evalkit/report.hpp"
#include "ubatrack/evalkit/runner.hpp"
#include "ubatrack/harness/netpbm.hpp"
#include "ubatrack/numerics/random.hpp"
#include "ubatrack/tracker/config.hpp"

namespace ubatrack {

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t num_sequences = 8;
  std::size_t frames_per_sequence = 24;
  std::size_t canvas_h = 128, canvas_w = 128;
  std::size_t min_size = 24, max_size = 40;  // target side length range, px
  double max_speed = 3.0;                   // px per frame along each axis
  double occlusion_prob = 0.0;              // per frame, never frame 0

  template <class Self, class Fn>
  static void fields(Self& s, Fn&& f) {
    f("seed", s.seed);
    f("num_sequences", s.num_sequences);
    f("frames_per_sequence", s.frames_per_sequence);
    f("canvas_h", s.canvas_h);
    f("canvas_w", s.canvas_w);
    f("min_size", s.min_size);
    f("max_size", s.max_size);
    f("max_speed", s.max_speed);
    f("occlusion_prob", s.occlusion_prob);
  }

  void validate() const {
    if (num_sequences == 0 || frames_per_sequence == 0) throw ConfigError("synth: need at least one sequence and frame");
    if (min_size == 0 || min_size > max_size) throw ConfigError("synth: need 0 < min_size <= max_size");
    if (max_size + 2 >= std::min(canvas_h, canvas_w)) throw ConfigError("synth: target does not fit the canvas");
    if (max_speed < 0) throw ConfigError("synth: max_speed must be non-negative");
    if (occlusion_prob < 0 || occlusion_prob > 1) throw ConfigError("synth: occlusion_prob must lie in [0, 1]");
  }
};

inline std::string sequence_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%03zu", i);
  return buf;
}

inline std::string frame_name(std::size_t t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.%s", t, ext);
  return buf;
}

struct SynthSequence {
  std::vector<Image> v, x;
  std::vector<GroundTruth> gt;
};

inline SynthSequence synth_sequence(const SynthConfig& cfg, std::size_t index) {
  Rng rng = Rng::keyed(cfg.seed, "synth." + std::to_string(index));
  const std::size_t H = cfg.canvas_h, W = cfg.canvas_w;
  const double w = double(cfg.min_size + rng.below(cfg.max_size - cfg.min_size + 1));
  const double h = double(cfg.min_size + rng.below(cfg.max_size - cfg.min_size + 1));
  const double xmax = double(W) - 1 - w, ymax = double(H) - 1 - h;
  double x = rng.uniform(1.0, xmax), y = rng.uniform(1.0, ymax);
  double vx = rng.uniform(-cfg.max_speed, cfg.max_speed), vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
  float colour[3], bg[3];
  for (int c = 0; c < 3; ++c) {
    colour[c] = float(rng.uniform(0.55, 1.0));
    bg[c] = float(rng.uniform(0.05, 0.35));
  }
  colour[rng.below(3)] = 1.0f;
  SynthSequence s;
  for (std::size_t t = 0; t < cfg.frames_per_sequence; ++t) {
    if (t > 0) {
      x += vx;
      y += vy;
      // bounce off the 1 px margin
      auto bounce = [](double& p, double& vel, double hi) {
        if (p < 1.0 || p > hi) vel = -vel;
        if (p < 1.0) p = 2.0 - p;
        if (p > hi) p = 2.0 * hi - p;
        p = std::clamp(p, 1.0, hi);
      };
      bounce(x, vx, xmax);
      bounce(y, vy, ymax);
    }
    const bool occluded = t > 0 && rng.uniform() < cfg.occlusion_prob;
    const Box b{std::round(x), std::round(y), w, h};
    Image v(H, W, 3), ir(H, W, 1);
    for (std::size_t i = 0; i < H * W; ++i) {
      for (int c = 0; c < 3; ++c) v.pixels[i * 3 + c] = std::clamp(bg[c] + float(rng.uniform(-0.12, 0.12)), 0.0f, 1.0f);
      ir.pixels[i] = float(rng.uniform(0.0, 0.25));
    }
    if (!occluded) {
      const double cx = b.cx() - 0.5, cy = b.cy() - 0.5;
      for (std::size_t yy = std::size_t(b.y); yy < std::size_t(b.y + b.h); ++yy)
        for (std::size_t xx = std::size_t(b.x); xx < std::size_t(b.x + b.w); ++xx) {
          for (int c = 0; c < 3; ++c)
            v.at(yy, xx, c) = std::clamp(colour[c] + float(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
          const double dx = (double(xx) - cx) / (0.5 * b.w), dy = (double(yy) - cy) / (0.5 * b.h);
          const double d2 = dx * dx + dy * dy;
          if (d2 <= 1.0) ir.at(yy, xx, 0) = std::max(ir.at(yy, xx, 0), float(0.55 + 0.45 * (1.0 - d2)));
        }
    }
    s.v.push_back(std::move(v));
    s.x.push_back(std::move(ir));
    s.gt.push_back(occluded ? GroundTruth{Box{}, false} : GroundTruth{b, true});
  }
  return s;
}

// Writes <out>/<seq>/{v/*.ppm, x/*.pgm, groundtruth.txt} and <out>/manifest.json.
inline nlohmann::json synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  nlohmann::json manifest;
  manifest["seed"] = cfg.seed;
  manifest["config"] = config_to_json(cfg);
  manifest["sequences"] = nlohmann::json::array();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir + ": " + ec.message());
  for (std::size_t i = 0; i < cfg.num_sequences; ++i) {
    const auto name = sequence_name(i);
    const fs::path dir = fs::path(out_dir) / name;
    fs::create_directories(dir / "v", ec);
    if (!ec) fs::create_directories(dir / "x", ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
    const auto s = synth_sequence(cfg, i);
    nlohmann::json entry{{"name", name}, {"frames", s.v.size()}, {"groundtruth", name + "/groundtruth.txt"}};
    entry["v"] = nlohmann::json::array();
    entry["x"] = nlohmann::json::array();
    for (std::size_t t = 0; t < s.v.size(); ++t) {
      const auto vp = name + "/v/" + frame_name(t, "ppm"), xp = name + "/x/" + frame_name(t, "pgm");
      write_netpbm((fs::path(out_dir) / vp).string(), s.v[t]);
      write_netpbm((fs::path(out_dir) / xp).string(), s.x[t]);
      entry["v"].push_back(vp);
      entry["x"].push_back(xp);
    }
    write_groundtruth((dir / "groundtruth.txt").string(), s.gt);
    manifest["sequences"].push_back(entry);
  }
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  if (!f) throw Error("cannot write " + (fs::path(out_dir) / "manifest.json").string());
  f << manifest.dump(2) << '\n';
  return manifest;
}

// Frames are read in file-name order from v/ and x/.
inline SequenceFrames load_sequence(const std::string& data_root, const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(data_root) / name;
  auto list = [&](const char* sub, const char* ext) {
    std::vector<fs::path> files;
    if (fs::is_directory(dir / sub))
      for (const auto& e : fs::directory_iterator(dir / sub))
        if (e.path().extension() == ext) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
  };
  SequenceFrames s;
  s.name = name;
  for (const auto& p : list("v", ".ppm")) s.v.push_back(read_netpbm(p.string()));
  for (const auto& p : list("x", ".pgm")) s.x.push_back(read_netpbm(p.string()));
  s.gt = read_groundtruth((dir / "groundtruth.txt").string());
  if (s.v.size() != s.x.size()) {
    throw FormatError(dir.string() + ": " + std::to_string(s.v.size()) + " V frames vs " + std::to_string(s.x.size()) +
                      " X frames");
  }
  check_line_count((dir / "groundtruth.txt").string(), s.gt.size(), s.v.size());
  return s;
}

inline std::vector<SequenceFrames> load_dataset(const std::string& data_root) {
  std::vector<SequenceFrames> out;
  for (const auto& name : list_sequences(data_root)) out.push_back(load_sequence(data_root, name));
  return out;
}

}  // namespace ubatrack
