#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "ubatrack/evalkit/metrics.hpp"
#include "ubatrack/tracker.hpp"

namespace ubatrack {

// Paired modality streams: v frames are 3-channel, x frames 1- or 3-channel.
struct SequenceFrames {
  std::string name;
  std::vector<Image> v, x;
  std::vector<GroundTruth> gt;  // optional; copied into the result when present
};

// Frame 0 is given; each later frame uses templates cut at the scheduled
// earlier frames (around the box tracked there) and a search crop centred on
// the previous box.
template <class T>
SequenceResult run_sequence(const TrackerModel<T>& model, const SequenceFrames& seq, const Box& gt0,
                            std::size_t M) {
  const std::size_t n = seq.v.size();
  if (seq.x.size() != n) {
    throw ShapeError("run_sequence: " + std::to_string(n) + " V frames vs " + std::to_string(seq.x.size()) +
                     " X frames");
  }
  if (!seq.gt.empty() && seq.gt.size() != n) throw ShapeError("run_sequence: ground truth length differs from frames");
  if (n == 0) throw ShapeError("run_sequence: empty sequence");
  if (M == 0) throw ConfigError("run_sequence: template count must be positive");
  const auto& cfg = model.config;
  SequenceResult r;
  r.boxes.push_back(gt0);
  r.confidence.push_back(1.0);
  std::vector<Image> bank_v{template_crop(seq.v[0], gt0, cfg.template_size)};
  std::vector<Image> bank_x{crop(template_crop(seq.x[0], gt0, cfg.template_size), {0, 0, cfg.template_size})};
  NoGradGuard guard;
  for (std::size_t t = 1; t < n; ++t) {
    std::vector<Image> tv, tx;
    for (std::size_t k : template_schedule(t, M)) {
      tv.push_back(bank_v[k]);
      tx.push_back(bank_x[k]);
    }
    const auto win = search_window(seq.v[t], r.boxes.back(), cfg.search_size);
    const auto in = make_input<T>({tv}, {tx}, {crop(seq.v[t], win)}, {crop(seq.x[t], win)}, cfg.patch);
    const auto d = head_decode(forward_track(in, model));
    const Box b = from_crop_norm(d.box, win);
    r.boxes.push_back(b);
    r.confidence.push_back(d.score);
    bank_v.push_back(template_crop(seq.v[t], b, cfg.template_size));
    bank_x.push_back(crop(template_crop(seq.x[t], b, cfg.template_size), {0, 0, cfg.template_size}));
  }
  r.gt = seq.gt.empty() ? std::vector<GroundTruth>(n) : seq.gt;
  return r;
}

// Worker count from UBATRACK_THREADS (unset or invalid: hardware concurrency).
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("UBATRACK_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = std::size_t(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Independent sequences in parallel; results keep the input order.
template <class T>
std::vector<SequenceResult> run_sequences(const TrackerModel<T>& model, const std::vector<SequenceFrames>& seqs,
                                          std::size_t M) {
  std::vector<SequenceResult> out(seqs.size());
  std::vector<std::exception_ptr> errors(seqs.size());
  const std::size_t workers = worker_count(seqs.size());
  auto job = [&](std::size_t w) {
    for (std::size_t i = w; i < seqs.size(); i += workers) {
      try {
        const auto& s = seqs[i];
        if (s.gt.empty() || !s.gt[0].present) throw DomainError("sequence " + s.name + ": frame 0 has no target");
        out[i] = run_sequence(model, s, s.gt[0].box, M);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    job(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(job, w);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace ubatrack
