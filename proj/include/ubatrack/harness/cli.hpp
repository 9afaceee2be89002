#pragma once

// Command-line front end. Exit codes: 0 ok, 1 runtime or check failure,
// 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ubatrack/evalkit.hpp"
#include "ubatrack/harness/checks.hpp"
#include "ubatrack/harness/synth.hpp"
#include "ubatrack/harness/training.hpp"
#include "ubatrack/tracker.hpp"

namespace ubatrack {

inline constexpr int kExitOk = 0, kExitFailure = 1, kExitUsage = 2;

struct RunConfig {
  TrackerConfig model;
  TrainConfig train;
};

// Desk-scale defaults used by the train command.
inline RunConfig desk_defaults() {
  RunConfig c;
  c.model.template_size = 64;
  c.model.search_size = 128;
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = desk_defaults()) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "model" && it.key() != "train") throw ConfigError("unknown config section '" + it.key() + "'");
  if (j.contains("model")) base.model = config_from_json(j["model"], base.model);
  if (j.contains("train")) base.train = config_from_json(j["train"], base.train);
  base.model.validate();
  base.train.validate();
  return base;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"model", config_to_json(c.model)}, {"train", config_to_json(c.train)}};
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << j.dump(2) << '\n';
  if (!f) throw Error("write failed for " + path);
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir + ": " + ec.message());
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-modality Mamba-adapter tracker: data synthesis, training, tracking, evaluation, checks"};
  app.require_subcommand(1);

  std::string out_dir, data_dir, config_path, checkpoint, results_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, sequences, frames, templates;
  std::optional<double> lr, occlusion;

  auto* synth = app.add_subcommand("synth", "generate synthetic two-modality sequences");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--config", config_path, "JSON generator config");
  synth->add_option("--seed", seed);
  synth->add_option("--sequences", sequences);
  synth->add_option("--frames", frames);
  synth->add_option("--occlusion", occlusion, "per-frame occlusion probability");

  auto* train = app.add_subcommand("train", "train adapters, mixer and head on a dataset");
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", out_dir)->required();
  train->add_option("--config", config_path, "JSON with optional \"model\" and \"train\" sections");
  train->add_option("--seed", seed);
  train->add_option("--steps", steps);
  train->add_option("--lr", lr);

  auto* track = app.add_subcommand("track", "run the tracker over every sequence");
  track->add_option("--data", data_dir)->required();
  track->add_option("--checkpoint", checkpoint)->required();
  track->add_option("--config", config_path, "defaults to config.json next to the checkpoint");
  track->add_option("--out", out_dir)->required();
  track->add_option("--templates", templates, "M in the template schedule");

  auto* eval = app.add_subcommand("eval", "score result files against ground truth");
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--results", results_dir)->required();
  eval->add_option("--out", out_dir)->required();

  std::uint64_t check_seed = 7;
  std::size_t scan_shapes = 48;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every module (f64)");
  gradcheck->add_option("--seed", check_seed);
  auto* scancheck = app.add_subcommand("scancheck", "chunked scan vs sequential reference sweep");
  scancheck->add_option("--seed", check_seed);
  scancheck->add_option("--shapes", scan_shapes);

  std::size_t frame = 0, sched_templates = 1;
  auto* schedule = app.add_subcommand("schedule", "print the template frame schedule");
  schedule->add_option("--frame", frame)->required();
  schedule->add_option("--templates", sched_templates)->required()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      SynthConfig sc;
      if (!config_path.empty()) sc = config_from_json(read_json_file(config_path), sc);
      if (seed) sc.seed = *seed;
      if (sequences) sc.num_sequences = *sequences;
      if (frames) sc.frames_per_sequence = *frames;
      if (occlusion) sc.occlusion_prob = *occlusion;
      sc.validate();
      synth_generate(sc, out_dir);
      write_json_file((std::filesystem::path(out_dir) / "config.json").string(), config_to_json(sc));
      out << "wrote " << sc.num_sequences << " sequences to " << out_dir << "\n";
    } else if (train->parsed()) {
      RunConfig rc = config_path.empty() ? desk_defaults() : run_config_from_json(read_json_file(config_path));
      if (seed) rc.model.seed = *seed;
      if (steps) rc.train.steps = *steps;
      if (lr) rc.model.lr = *lr;
      rc.model.validate();
      rc.train.validate();
      const auto data = load_dataset(data_dir);
      ensure_dir(out_dir);
      write_json_file((std::filesystem::path(out_dir) / "config.json").string(), run_config_to_json(rc));
      auto res = train_model(rc.model, rc.train, data, [&](const LossRecord& r) {
        if (rc.train.log_every && (r.step % rc.train.log_every == 0 || r.step + 1 == rc.train.steps)) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "step %zu lr %.3g loss %.5f focal %.5f l1 %.5f giou %.4f\n", r.step, r.lr,
                        r.report.loss, r.report.focal, r.report.l1, r.report.giou);
          out << buf << std::flush;
        }
      });
      const auto ckpt = (std::filesystem::path(out_dir) / "model.ubat").string();
      save_checkpoint(res.model, ckpt);
      write_loss_curve((std::filesystem::path(out_dir) / "loss.csv").string(), res.curve);
      out << "checkpoint " << ckpt << "\n";
    } else if (track->parsed()) {
      if (config_path.empty()) config_path = (std::filesystem::path(checkpoint).parent_path() / "config.json").string();
      const RunConfig rc = run_config_from_json(read_json_file(config_path));
      const std::size_t M = templates.value_or(rc.model.templates);
      if (M == 0) throw ConfigError("--templates must be positive");
      const auto model = load_checkpoint<float>(rc.model, checkpoint);
      const auto data = load_dataset(data_dir);
      ensure_dir(out_dir);
      auto echo = run_config_to_json(rc);
      echo["templates"] = M;
      write_json_file((std::filesystem::path(out_dir) / "config.json").string(), echo);
      const auto results = run_sequences(model, data, M);
      for (std::size_t i = 0; i < data.size(); ++i) {
        write_results((std::filesystem::path(out_dir) / (data[i].name + ".txt")).string(), results[i]);
      }
      out << "tracked " << data.size() << " sequences into " << out_dir << "\n";
    } else if (eval->parsed()) {
      const auto rep = metrics_report(load_results(data_dir, results_dir));
      ensure_dir(out_dir);
      write_json_file((std::filesystem::path(out_dir) / "config.json").string(),
                      {{"data", data_dir}, {"results", results_dir}});
      write_json_file((std::filesystem::path(out_dir) / "report.json").string(), rep);
      char buf[160];
      out << "sequence           PR       SR      NPR\n";
      for (const auto& [name, m] : rep["sequences"].items()) {
        std::snprintf(buf, sizeof buf, "%-14s %8.4f %8.4f %8.4f\n", name.c_str(), m["pr"].get<double>(),
                      m["sr"].get<double>(), m["npr"].get<double>());
        out << buf;
      }
      const auto& o = rep["overall"];
      std::snprintf(buf, sizeof buf, "%-14s %8.4f %8.4f %8.4f\n", "mean", o["pr"].get<double>(), o["sr"].get<double>(),
                    o["npr"].get<double>());
      out << buf;
      std::snprintf(buf, sizeof buf, "F %.4f  Pr %.4f  Re %.4f  tau %.4f\n", o["f"].get<double>(),
                    o["f_pr"].get<double>(), o["f_re"].get<double>(), o["f_tau"].get<double>());
      out << buf;
    } else if (gradcheck->parsed()) {
      const auto rep = run_grad_suite({check_seed, check_seed + 1, check_seed + 2});
      char buf[200];
      for (const auto& e : rep.entries) {
        std::snprintf(buf, sizeof buf, "%-24s seed %-4llu max rel %.3e  %s\n", e.name.c_str(),
                      static_cast<unsigned long long>(e.seed), e.max_rel_error, e.worst_param.c_str());
        out << buf;
      }
      std::snprintf(buf, sizeof buf, "worst relative error %.3e (tolerance %.0e)\n", rep.worst(), rep.tolerance);
      out << buf;
      return rep.passed() ? kExitOk : kExitFailure;
    } else if (scancheck->parsed()) {
      const auto rep = run_scan_sweep(check_seed, scan_shapes);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%zu shapes  max |fast - ref| f32 %.3e  f64 %.3e\n", rep.shapes, rep.worst_f32,
                    rep.worst_f64);
      out << buf;
      return rep.passed() ? kExitOk : kExitFailure;
    } else if (schedule->parsed()) {
      out << join(template_schedule(frame, sched_templates)) << "\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace ubatrack
