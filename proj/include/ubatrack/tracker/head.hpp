#pragma once

// Centre-point prediction head, box decoding, and the training losses.
// Maps are channels-last: (B, H', W', C).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/tracker/image.hpp"

namespace ubatrack {

template <class T>
struct ConvNormReluParams {
  Tensor<T> w, b;        // (9 * Cin, Cout), (Cout)
  Tensor<T> ln_g, ln_b;  // (Cout)
};

template <class T>
struct BranchParams {
  std::vector<ConvNormReluParams<T>> layers;
  Tensor<T> out_w, out_b;  // 1x1 projection to the branch outputs

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = prefix + "conv" + std::to_string(i) + ".";
      fn(p + "w", layers[i].w);
      fn(p + "b", layers[i].b);
      fn(p + "norm.gamma", layers[i].ln_g);
      fn(p + "norm.beta", layers[i].ln_b);
    }
    fn(prefix + "out.w", out_w);
    fn(prefix + "out.b", out_b);
  }
};

template <class T>
struct HeadParams {
  BranchParams<T> cls, size, offset;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    cls.visit(prefix + "cls.", fn);
    size.visit(prefix + "size.", fn);
    offset.visit(prefix + "offset.", fn);
  }
};

// Initial classification bias: sigmoid(-2.19) ~ 0.1.
inline constexpr double kClsBiasInit = -2.19;

template <class T>
BranchParams<T> branch_init(std::size_t D, std::size_t outputs, double out_bias, Rng& rng) {
  const std::vector<std::size_t> widths{D, D, std::max<std::size_t>(1, D / 2), std::max<std::size_t>(1, D / 4)};
  BranchParams<T> br;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t fan_in = 9 * widths[i];
    ConvNormReluParams<T> l;
    l.w = randn<T>({fan_in, widths[i + 1]}, rng, std::sqrt(2.0 / double(fan_in)));
    l.b = Tensor<T>::zeros({widths[i + 1]});
    l.ln_g = Tensor<T>::full({widths[i + 1]}, T(1));
    l.ln_b = Tensor<T>::zeros({widths[i + 1]});
    br.layers.push_back(std::move(l));
  }
  br.out_w = randn<T>({widths.back(), outputs}, rng, 0.01);
  br.out_b = Tensor<T>::full({outputs}, T(out_bias));
  return br;
}

template <class T>
HeadParams<T> head_init(std::size_t D, std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, "head");
  HeadParams<T> h;
  h.cls = branch_init<T>(D, 1, kClsBiasInit, rng);
  h.size = branch_init<T>(D, 2, 0.0, rng);
  h.offset = branch_init<T>(D, 2, 0.0, rng);
  return h;
}

template <class T>
struct BoxPrediction {
  Tensor<T> cls;     // (B, H', W', 1)
  Tensor<T> size;    // (B, H', W', 2) normalized (w, h)
  Tensor<T> offset;  // (B, H', W', 2) sub-cell (x, y)

  std::size_t batch() const { return cls.dim(0); }
  std::size_t grid_h() const { return cls.dim(1); }
  std::size_t grid_w() const { return cls.dim(2); }
};

template <class T>
Tensor<T> branch_forward(const Tensor<T>& x, const BranchParams<T>& br) {
  auto h = x;
  for (const auto& l : br.layers) h = relu(layer_norm(linear(im2col3x3(h), l.w, &l.b), l.ln_g, l.ln_b));
  return sigmoid(linear(h, br.out_w, &br.out_b));
}

template <class T>
BoxPrediction<T> head_forward(const Tensor<T>& features, const HeadParams<T>& p) {
  if (features.rank() != 4) throw ShapeError("head: expected (B, H', W', D), got " + shape_str(features.shape()));
  return {branch_forward(features, p.cls), branch_forward(features, p.size), branch_forward(features, p.offset)};
}

// Box normalized to the search region, centre form.
struct NormBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct Decoded {
  NormBox box;
  double score = 0;
  std::size_t row = 0, col = 0;
};

// Argmax of the score map (first maximum in raster order), centre from cell
// plus offset, extent from the size map clamped to [1e-2 / W', 1].
template <class T>
Decoded head_decode(const BoxPrediction<T>& pred, std::size_t b = 0) {
  const std::size_t H = pred.grid_h(), W = pred.grid_w();
  const auto& cls = pred.cls.values();
  const std::size_t base = b * H * W;
  std::size_t best = 0;
  for (std::size_t i = 1; i < H * W; ++i)
    if (cls[base + i] > cls[base + best]) best = i;
  Decoded d;
  d.row = best / W;
  d.col = best % W;
  d.score = double(cls[base + best]);
  const std::size_t at = (base + best) * 2;
  const double lo = 1e-2 / double(W);
  d.box.cx = (double(d.col) + double(pred.offset[at])) / double(W);
  d.box.cy = (double(d.row) + double(pred.offset[at + 1])) / double(H);
  d.box.w = std::clamp(double(pred.size[at]), lo, 1.0);
  d.box.h = std::clamp(double(pred.size[at + 1]), lo, 1.0);
  return d;
}

inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;
inline constexpr double kFocalClamp = 1e-6;

// Gaussian peak, sigma one cell, exactly 1 at (row, col).
template <class T>
Tensor<T> gaussian_target(std::size_t H, std::size_t W, std::size_t row, std::size_t col, double sigma = 1.0) {
  std::vector<T> t(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double dr = double(r) - double(row), dc = double(c) - double(col);
      t[r * W + c] = T(std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma)));
    }
  return Tensor<T>::from_data({H, W}, std::move(t));
}

// Penalty-reduced focal loss summed over cells, divided by max(1, #positives).
template <class T>
Tensor<T> focal_loss(const Tensor<T>& cls, const Tensor<T>& target, bool present) {
  if (cls.numel() != target.numel()) {
    throw ShapeError("focal_loss: map " + shape_str(cls.shape()) + " vs target " + shape_str(target.shape()));
  }
  const auto c = reshape(cls, target.shape());
  std::vector<T> pos(target.numel()), negw(target.numel());
  std::size_t npos = 0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T t = target[i];
    if (t < T(0) || t > T(1)) throw DomainError("focal_loss: target values must lie in [0, 1]");
    pos[i] = t == T(1) ? T(1) : T(0);
    negw[i] = t == T(1) ? T(0) : T(std::pow(1.0 - double(t), kFocalBeta));
    npos += t == T(1);
  }
  if (present && npos == 0) throw DomainError("focal_loss: target is present but no cell equals 1");
  const auto p = clamp(c, T(kFocalClamp), T(1 - kFocalClamp));
  const auto one_minus = add_scalar(neg(p), T(1));
  const auto pos_t = mul(Tensor<T>::from_data(target.shape(), pos), mul(square(one_minus), log(p)));
  const auto neg_t = mul(Tensor<T>::from_data(target.shape(), negw), mul(square(p), log(one_minus)));
  return mul_scalar(sum(add(pos_t, neg_t)), T(-1) / T(std::max<std::size_t>(1, npos)));
}

// Differentiable GIoU of a predicted centre-form box (4) against a constant one.
template <class T>
Tensor<T> giou_loss_term(const Tensor<T>& box, const NormBox& gt) {
  auto comp = [&](std::size_t i) { return slice(box, 0, i, 1); };
  auto cst = [](double v) { return Tensor<T>::scalar(T(v)); };
  const auto hw = mul_scalar(comp(2), T(0.5)), hh = mul_scalar(comp(3), T(0.5));
  const auto px1 = sub(comp(0), hw), px2 = add(comp(0), hw);
  const auto py1 = sub(comp(1), hh), py2 = add(comp(1), hh);
  const auto gx1 = cst(gt.cx - 0.5 * gt.w), gx2 = cst(gt.cx + 0.5 * gt.w);
  const auto gy1 = cst(gt.cy - 0.5 * gt.h), gy2 = cst(gt.cy + 0.5 * gt.h);
  const auto iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
  const auto ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
  const auto inter = mul(iw, ih);
  const auto uni = sub(add(mul(comp(2), comp(3)), cst(gt.w * gt.h)), inter);
  const auto enc = mul(sub(maximum(px2, gx2), minimum(px1, gx1)), sub(maximum(py2, gy2), minimum(py1, gy1)));
  return sub(div(inter, uni), div(sub(enc, uni), enc));
}

struct FrameTarget {
  NormBox box;
  bool present = true;
};

inline void gt_cell(const NormBox& b, std::size_t H, std::size_t W, std::size_t& row, std::size_t& col) {
  col = std::min<std::size_t>(W - 1, std::size_t(std::max(0.0, std::floor(b.cx * double(W)))));
  row = std::min<std::size_t>(H - 1, std::size_t(std::max(0.0, std::floor(b.cy * double(H)))));
}

struct LossWeights {
  double lambda1 = 5.0;
  double lambda2 = 2.0;
};

template <class T>
struct LossParts {
  Tensor<T> total;
  double focal = 0, l1 = 0, giou = 0;  // means over frames (regression over present frames)
};

// Mean over batch entries of focal + l1 * L1 + l2 * (1 - GIoU); the regression
// terms read the maps at the ground-truth cell and vanish for absent frames.
template <class T>
LossParts<T> loss_total(const BoxPrediction<T>& pred, const std::vector<FrameTarget>& targets,
                        const LossWeights& w = {}) {
  const std::size_t B = pred.batch(), H = pred.grid_h(), W = pred.grid_w();
  if (targets.empty()) throw ShapeError("loss_total: empty frame list");
  if (targets.size() != B) {
    throw ShapeError("loss_total: " + std::to_string(targets.size()) + " targets for " + std::to_string(B) + " frames");
  }
  LossParts<T> parts;
  std::vector<Tensor<T>> per_frame;
  std::size_t present = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& tg = targets[b];
    const auto cls_b = slice(pred.cls, 0, b, 1);
    if (!tg.present) {
      auto f = focal_loss(cls_b, Tensor<T>::zeros({H, W}), false);
      parts.focal += double(f.item());
      per_frame.push_back(f);
      continue;
    }
    ++present;
    std::size_t row, col;
    gt_cell(tg.box, H, W, row, col);
    auto f = focal_loss(cls_b, gaussian_target<T>(H, W, row, col), true);
    auto cell = [&](const Tensor<T>& map) {
      return reshape(slice(slice(slice(map, 0, b, 1), 1, row, 1), 2, col, 1), {map.dim(3)});
    };
    const auto centre = mul(add(cell(pred.offset), Tensor<T>::from_data({2}, {T(col), T(row)})),
                            Tensor<T>::from_data({2}, {T(1) / T(W), T(1) / T(H)}));
    const auto box = concat(std::vector<Tensor<T>>{centre, cell(pred.size)}, 0);
    const auto gt = Tensor<T>::from_data({4}, {T(tg.box.cx), T(tg.box.cy), T(tg.box.w), T(tg.box.h)});
    const auto l1 = mean(abs(sub(box, gt)));
    const auto g = giou_loss_term(box, tg.box);
    parts.focal += double(f.item());
    parts.l1 += double(l1.item());
    parts.giou += double(g.item());
    per_frame.push_back(add(add(f, mul_scalar(l1, T(w.lambda1))),
                            mul_scalar(add_scalar(neg(g), T(1)), T(w.lambda2))));
  }
  parts.total = mul_scalar(sum(concat(per_frame, 0)), T(1) / T(B));
  parts.focal /= double(B);
  if (present) {
    parts.l1 /= double(present);
    parts.giou /= double(present);
  }
  return parts;
}

}  // namespace ubatrack
