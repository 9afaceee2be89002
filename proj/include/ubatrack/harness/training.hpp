#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ubatrack/evalkit/runner.hpp"
#include "ubatrack/tracker.hpp"

namespace ubatrack {

struct LossRecord {
  std::size_t step = 0;
  double lr = 0;
  StepReport report;
};

// One training sample: sorted template frames plus several search frames of
// a single sequence. Each search frame becomes one batch entry.
struct SampleRef {
  std::size_t sequence = 0;
  std::vector<std::size_t> templates, search;
};

namespace detail {

inline std::vector<std::size_t> present_frames(const SequenceFrames& s) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < s.gt.size(); ++t)
    if (s.gt[t].present) out.push_back(t);
  return out;
}

// k distinct entries of `pool` when it is large enough, else with repeats.
inline std::vector<std::size_t> pick(const std::vector<std::size_t>& pool, std::size_t k, Rng& rng) {
  std::vector<std::size_t> p = pool, out;
  if (p.size() >= k) {
    for (std::size_t i = 0; i < k; ++i) std::swap(p[i], p[i + rng.below(p.size() - i)]);
    out.assign(p.begin(), p.begin() + std::ptrdiff_t(k));
  } else {
    for (std::size_t i = 0; i < k; ++i) out.push_back(p[rng.below(p.size())]);
  }
  return out;
}

}  // namespace detail

inline SampleRef sample_ref(const std::vector<SequenceFrames>& data, const TrainConfig& tc, Rng& rng) {
  SampleRef s;
  s.sequence = rng.below(data.size());
  const auto& seq = data[s.sequence];
  const auto present = detail::present_frames(seq);
  if (present.empty()) throw DomainError("training sequence " + seq.name + " has no visible target");
  s.templates = detail::pick(present, tc.train_templates, rng);
  std::sort(s.templates.begin(), s.templates.end());
  std::vector<std::size_t> all(seq.v.size());
  for (std::size_t t = 0; t < all.size(); ++t) all[t] = t;
  s.search = detail::pick(all, tc.train_search, rng);
  return s;
}

// Search crops are centred on the target (or the frame centre when absent),
// shifted by up to search_jitter * search_size.
template <class T>
std::pair<TrackInput<T>, std::vector<FrameTarget>> build_batch(const std::vector<SequenceFrames>& data,
                                                               const std::vector<SampleRef>& refs,
                                                               const TrackerConfig& mc, const TrainConfig& tc, Rng& rng) {
  std::vector<std::vector<Image>> tv, tx;
  std::vector<Image> sv, sx;
  std::vector<FrameTarget> targets;
  for (const auto& r : refs) {
    const auto& seq = data[r.sequence];
    std::vector<Image> kv, kx;
    for (auto t : r.templates) {
      kv.push_back(template_crop(seq.v[t], seq.gt[t].box, mc.template_size));
      kx.push_back(crop(template_crop(seq.x[t], seq.gt[t].box, mc.template_size), {0, 0, mc.template_size}));
    }
    for (auto t : r.search) {
      const auto& g = seq.gt[t];
      const Image& frame = seq.v[t];
      Box centre = g.present ? g.box : Box{0.5 * double(frame.width), 0.5 * double(frame.height), 0, 0};
      const double j = tc.search_jitter * double(mc.search_size);
      if (j > 0) {
        centre.x += rng.uniform(-j, j);
        centre.y += rng.uniform(-j, j);
      }
      const auto win = search_window(frame, centre, mc.search_size);
      tv.push_back(kv);
      tx.push_back(kx);
      sv.push_back(crop(frame, win));
      sx.push_back(crop(seq.x[t], win));
      targets.push_back({g.present ? to_crop_norm(g.box, win) : NormBox{}, g.present});
    }
  }
  return {make_input<T>(tv, tx, sv, sx, mc.patch), std::move(targets)};
}

struct TrainOutcome {
  TrackerModel<float> model;
  std::vector<LossRecord> curve;
};

// Seeded end to end: model init from mc.seed, sampling and dropout from
// streams keyed on the same seed.
inline TrainOutcome train_model(const TrackerConfig& mc, const TrainConfig& tc, const std::vector<SequenceFrames>& data,
                                const std::function<void(const LossRecord&)>& on_step = {}) {
  mc.validate();
  tc.validate();
  if (data.empty()) throw Error("train: empty dataset");
  TrainOutcome out{build_model<float>(mc), {}};
  auto opt = make_optimizer(out.model);
  Rng sampler = Rng::keyed(mc.seed, "train.sample");
  Rng jitter = Rng::keyed(mc.seed, "train.jitter");
  Rng drop = Rng::keyed(mc.seed, "train.dropout");
  for (std::size_t step = 0; step < tc.steps; ++step) {
    const double lr = scheduled_lr(mc.lr, step, tc.steps, tc.lr_decay_at);
    opt.set_lr(lr);
    std::vector<SampleRef> refs;
    for (std::size_t b = 0; b < tc.batch; ++b) refs.push_back(sample_ref(data, tc, sampler));
    const auto [in, targets] = build_batch<float>(data, refs, mc, tc, jitter);
    LossRecord rec{step, lr, train_step(out.model, opt, in, targets, drop, tc.max_grad_norm)};
    out.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  return out;
}

inline void write_loss_curve(const std::string& path, const std::vector<LossRecord>& curve) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << "step,lr,loss,focal,l1,giou,grad_norm\n";
  char buf[256];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.lr, r.report.loss, r.report.focal,
                  r.report.l1, r.report.giou, r.report.grad_norm);
    f << buf;
  }
  if (!f) throw Error("write failed for " + path);
}

// Mean IoU over every visible frame of the training set. Templates are cut
// at the target in the scheduled frames (visible ones only, frame 0 fallback),
// the search crop is centred on the target.
template <class T>
double training_iou(const TrackerModel<T>& model, const std::vector<SequenceFrames>& data, std::size_t M) {
  const auto& mc = model.config;
  double sum = 0;
  std::size_t n = 0;
  NoGradGuard guard;
  for (const auto& seq : data) {
    for (std::size_t t = 0; t < seq.v.size(); ++t) {
      if (!seq.gt[t].present) continue;
      std::vector<Image> tv, tx;
      for (auto k : template_schedule(t, M)) {
        if (!seq.gt[k].present) continue;
        tv.push_back(template_crop(seq.v[k], seq.gt[k].box, mc.template_size));
        tx.push_back(crop(template_crop(seq.x[k], seq.gt[k].box, mc.template_size), {0, 0, mc.template_size}));
      }
      if (tv.empty()) {
        tv.push_back(template_crop(seq.v[t], seq.gt[t].box, mc.template_size));
        tx.push_back(crop(template_crop(seq.x[t], seq.gt[t].box, mc.template_size), {0, 0, mc.template_size}));
      }
      const auto win = search_window(seq.v[t], seq.gt[t].box, mc.search_size);
      const auto in = make_input<T>({tv}, {tx}, {crop(seq.v[t], win)}, {crop(seq.x[t], win)}, mc.patch);
      const auto d = head_decode(forward_track(in, model));
      sum += iou(from_crop_norm(d.box, win), seq.gt[t].box);
      ++n;
    }
  }
  if (n == 0) throw DomainError("training_iou: no visible frames");
  return sum / double(n);
}

}  // namespace ubatrack
