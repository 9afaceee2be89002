#pragma once

// Central finite-difference check of reverse-mode gradients (f64 only).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ubatrack/numerics/random.hpp"
#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

class NonDeterministicError : public Error {
 public:
  using Error::Error;
};

struct GradCheckOptions {
  double eps = 1e-4;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, magnitude_floor).
  double magnitude_floor = 1e-3;
  // 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t flagged = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> params;
  double tolerance = 1e-4;

  bool passed() const { return max_rel_error <= tolerance; }
  std::size_t flagged() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.flagged;
    return n;
  }
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

inline GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                                  std::vector<NamedTensor> params,
                                  const GradCheckOptions& options = {}) {
  auto evaluate = [&fn] {
    NoGradGuard guard;
    return fn().item();
  };
  const double base_a = evaluate();
  const double base_b = evaluate();
  if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0) {
    throw NonDeterministicError("grad_check: two baseline evaluations differ (" +
                                std::to_string(base_a) + " vs " + std::to_string(base_b) + ")");
  }

  for (auto& [name, p] : params) {
    if (!p.requires_grad()) throw Error("grad_check: parameter " + name + " does not require grad");
    p.zero_grad();
  }
  backward(fn());

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng sampler(options.sample_seed);
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> entries(p.numel());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_param && entries.size() > options.max_entries_per_param) {
      for (std::size_t i = 0; i < options.max_entries_per_param; ++i) {
        const auto j = i + sampler.below(entries.size() - i);
        std::swap(entries[i], entries[j]);
      }
      entries.resize(options.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }

    GradCheckEntry entry{name};
    auto values = p.mutable_data();
    for (auto idx : entries) {
      const double saved = values[idx];
      values[idx] = saved + options.eps;
      const double plus = evaluate();
      values[idx] = saved - options.eps;
      const double minus = evaluate();
      values[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double abs_err = std::abs(numeric - analytic[idx]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), options.magnitude_floor});
      double rel = abs_err / denom;
      if (!std::isfinite(rel)) rel = std::numeric_limits<double>::infinity();
      entry.checked++;
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      if (rel > options.tolerance) entry.flagged++;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ubatrack
