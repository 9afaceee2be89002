#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/tracker/head.hpp"
#include "ubatrack/tracker/model.hpp"

namespace ubatrack {

// Adam with decoupled weight decay over a fixed list of parameter handles.
template <class T>
class AdamW {
 public:
  struct Options {
    double lr = 2e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  };

  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto& [name, p] : params_) {
      if (!p.requires_grad()) throw Error("AdamW: parameter " + name + " is frozen");
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  std::size_t steps() const { return t_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Parameters without a gradient this step are left untouched.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = double(g[k]);
        m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
        v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opt_.eps);
        w[k] = T(double(w[k]) - opt_.lr * opt_.weight_decay * double(w[k]) - opt_.lr * update);
      }
    }
  }

  // Scales all gradients so their global L2 norm is at most max_norm.
  double clip_grad_norm(double max_norm) {
    double total = 0;
    for (auto& [name, p] : params_)
      if (p.has_grad())
        for (T g : p.grad()) total += double(g) * double(g);
    total = std::sqrt(total);
    if (max_norm > 0 && total > max_norm) {
      const T scale = T(max_norm / total);
      for (auto& [name, p] : params_)
        if (p.has_grad()) {
          auto& g = p.node().grad;
          for (auto& v : g) v *= scale;
        }
    }
    return total;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<double>> m_, v_;
  Options opt_;
  std::size_t t_ = 0;
};

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> trainable_parameters(TrackerModel<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  model.visit_trainable([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
  return out;
}

template <class T>
AdamW<T> make_optimizer(TrackerModel<T>& model) {
  return AdamW<T>(trainable_parameters(model), {model.config.lr, model.config.weight_decay});
}

// Step-wise schedule: base lr, then x0.1 from decay_at * total steps on.
inline double scheduled_lr(double base, std::size_t step, std::size_t total, double decay_at) {
  return double(step) >= decay_at * double(total) ? base * 0.1 : base;
}

struct StepReport {
  double loss = 0, focal = 0, l1 = 0, giou = 0, grad_norm = 0;
};

template <class T>
void require_finite(const std::string& name, std::span<const T> values) {
  if (!all_finite(values)) throw NonFiniteError("non-finite values in " + name);
}

// One optimizer step on a batch; returns the pre-step loss.
template <class T>
StepReport train_step(TrackerModel<T>& model, AdamW<T>& opt, const TrackInput<T>& in,
                      const std::vector<FrameTarget>& targets, Rng& rng, double max_grad_norm = 0.0) {
  opt.zero_grad();
  const auto pred = forward_track(in, model, {true, &rng});
  const auto parts = loss_total(pred, targets, {model.config.lambda1, model.config.lambda2});
  if (!std::isfinite(double(parts.total.item()))) {
    for (const auto& [name, p] : opt.params()) require_finite(name, p.data());
    require_finite<T>("prediction.cls", pred.cls.data());
    require_finite<T>("prediction.size", pred.size.data());
    require_finite<T>("prediction.offset", pred.offset.data());
    throw NonFiniteError("non-finite values in loss");
  }
  backward(parts.total);
  for (const auto& [name, p] : opt.params())
    if (p.has_grad()) require_finite("gradient of " + name, p.grad());
  StepReport r;
  r.grad_norm = opt.clip_grad_norm(max_grad_norm);
  opt.step();
  r.loss = double(parts.total.item());
  r.focal = parts.focal;
  r.l1 = parts.l1;
  r.giou = parts.giou;
  return r;
}

}  // namespace ubatrack
