#pragma once

// Short-term (PR, SR, NPR) and long-term (F-score) tracking metrics.
// Every frame with a present target counts, frame 0 included.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ubatrack/tracker/image.hpp"

namespace ubatrack {

struct SequenceResult {
  std::vector<Box> boxes;
  std::vector<double> confidence;
  std::vector<GroundTruth> gt;

  std::size_t size() const { return boxes.size(); }

  void validate() const {
    if (confidence.size() != boxes.size() || gt.size() != boxes.size()) {
      throw ShapeError("SequenceResult: " + std::to_string(boxes.size()) + " boxes, " +
                       std::to_string(confidence.size()) + " confidences, " + std::to_string(gt.size()) +
                       " ground-truth entries");
    }
  }
};

inline constexpr double kPrecisionThresholdPx = 20.0;
inline constexpr std::size_t kSweepPoints = 21;

inline double center_error(const Box& a, const Box& b) { return std::hypot(a.cx() - b.cx(), a.cy() - b.cy()); }

namespace detail {

inline std::size_t present_count(const SequenceResult& r) {
  r.validate();
  std::size_t n = 0;
  for (const auto& g : r.gt) n += g.present;
  if (n == 0) throw DomainError("metric undefined: sequence has no frame with a present target");
  return n;
}

}  // namespace detail

inline double center_precision(const SequenceResult& r, double threshold = kPrecisionThresholdPx) {
  if (!(threshold > 0)) throw DomainError("center_precision: threshold must be positive");
  const std::size_t n = detail::present_count(r);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (r.gt[i].present && center_error(r.boxes[i], r.gt[i].box) <= threshold) ++hit;
  return double(hit) / double(n);
}

// success(t) for t = k / 20, k = 0..20.
inline std::vector<double> success_curve(const SequenceResult& r) {
  const std::size_t n = detail::present_count(r);
  std::vector<double> curve(kSweepPoints, 0.0);
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!r.gt[i].present) continue;
    const double o = iou(r.boxes[i], r.gt[i].box);
    for (std::size_t k = 0; k < kSweepPoints; ++k)
      if (o >= double(k) / 20.0) curve[k] += 1.0;
  }
  for (auto& c : curve) c /= double(n);
  return curve;
}

inline double success_auc(const SequenceResult& r) {
  const auto c = success_curve(r);
  double s = 0;
  for (double v : c) s += v;
  return s / double(c.size());
}

// Centre error scaled per axis by the ground-truth extent; thresholds k / 40,
// k = 0..20. Frames whose ground truth has zero width or height are skipped.
inline double norm_precision(const SequenceResult& r) {
  detail::present_count(r);
  std::vector<double> errs;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& g = r.gt[i];
    if (!g.present || !(g.box.w > 0) || !(g.box.h > 0)) continue;
    errs.push_back(std::hypot((r.boxes[i].cx() - g.box.cx()) / g.box.w, (r.boxes[i].cy() - g.box.cy()) / g.box.h));
  }
  if (errs.empty()) throw DomainError("norm_precision: no frame with a positive-extent target");
  double s = 0;
  for (std::size_t k = 0; k < kSweepPoints; ++k) {
    const double t = double(k) / 40.0;
    s += double(std::count_if(errs.begin(), errs.end(), [&](double e) { return e <= t; })) / double(errs.size());
  }
  return s / double(kSweepPoints);
}

// Sequence-set variants: mean of per-sequence values.
template <class Fn>
double mean_over(const std::vector<SequenceResult>& set, Fn&& metric) {
  if (set.empty()) throw DomainError("metric over an empty sequence set");
  double s = 0;
  for (const auto& r : set) s += metric(r);
  return s / double(set.size());
}

struct FScore {
  double f = 0, precision = 0, recall = 0, tau = 0;
};

// Long-term protocol pooled over all frames of all sequences. At threshold tau
// a frame is reported when its confidence >= tau and the predicted box has
// positive extent; reported frames with an absent target score IoU 0.
//   Pr(tau) = sum IoU over reported frames / #reported
//   Re(tau) = sum IoU over reported present frames / #present frames
// tau sweeps every observed confidence; ties keep the smallest tau.
inline FScore f_score_lt(const std::vector<SequenceResult>& set) {
  struct Frame {
    double conf, overlap;
    bool present;
  };
  std::vector<Frame> frames;
  std::size_t present = 0;
  for (const auto& r : set) {
    r.validate();
    for (std::size_t i = 0; i < r.size(); ++i) {
      const bool reported = r.boxes[i].w > 0 && r.boxes[i].h > 0;
      const bool p = r.gt[i].present;
      present += p;
      if (!reported) continue;
      frames.push_back({r.confidence[i], p ? iou(r.boxes[i], r.gt[i].box) : 0.0, p});
    }
  }
  if (present == 0) throw DomainError("f_score_lt: no frame with a present target");
  // summation order independent of sequence order
  std::sort(frames.begin(), frames.end(), [](const Frame& a, const Frame& b) {
    return a.conf != b.conf ? a.conf < b.conf : a.overlap < b.overlap;
  });
  std::vector<double> taus;
  for (const auto& fr : frames) taus.push_back(fr.conf);
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  FScore best;
  bool any = false;
  for (double tau : taus) {
    double sum_all = 0;
    std::size_t reported = 0;
    for (const auto& fr : frames)
      if (fr.conf >= tau) {
        sum_all += fr.overlap;
        ++reported;
      }
    const double pr = sum_all / double(reported);
    const double re = sum_all / double(present);
    const double f = pr + re > 0 ? 2 * pr * re / (pr + re) : 0.0;
    if (!any || f > best.f) {
      best = {f, pr, re, tau};
      any = true;
    }
  }
  return best;
}

}  // namespace ubatrack
