#pragma once

// Multi-modal feature mixer on search tokens. V and X search tokens are
// concatenated along channels (extent 2D), passed through one pre-norm Mixer
// layer (MultiMixer block, then channel MLP), and pooled back to D by
// averaging the two modality halves.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/stma.hpp"

namespace ubatrack {

template <class T>
struct MMixParams {
  Tensor<T> reduce;  // (D / S, d), shared by all segments
  Tensor<T> gen;     // (L * d, L * L)
  Tensor<T> gen_b;   // (L * L)
  std::size_t segments = 2;

  std::size_t axis_extent() const { return static_cast<std::size_t>(std::llround(std::sqrt(double(gen.dim(1))))); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "reduce", reduce);
    fn(prefix + "gen", gen);
    fn(prefix + "gen_b", gen_b);
  }
};

template <class T>
MMixParams<T> mmix_init(std::size_t axis, std::size_t channels, std::size_t segments, std::size_t reduced, Rng& rng) {
  if (segments < 1 || channels % segments != 0) {
    throw ConfigError("mmix: " + std::to_string(segments) + " segments do not divide " + std::to_string(channels) +
                      " channels");
  }
  const std::size_t seg = channels / segments;
  if (reduced < 1 || reduced > seg) {
    throw ConfigError("mmix: reduced extent " + std::to_string(reduced) + " must lie in [1, " + std::to_string(seg) +
                      "]");
  }
  MMixParams<T> p;
  const double rb = 1.0 / std::sqrt(double(seg)), gb = 1.0 / std::sqrt(double(axis * reduced));
  p.reduce = rand_uniform<T>({seg, reduced}, rng, -rb, rb);
  p.gen = rand_uniform<T>({axis * reduced, axis * axis}, rng, -gb, gb);
  p.gen_b = Tensor<T>::zeros({axis * axis});
  p.segments = segments;
  return p;
}

// Row-stochastic dynamic mixing matrices, one per (row, segment):
// (R, L, D) -> (R, S, L, L).
template <class T>
Tensor<T> mmix_matrices(const Tensor<T>& x, const MMixParams<T>& p) {
  if (x.rank() != 3) throw ShapeError("mmix: expected (R, L, D), got " + shape_str(x.shape()));
  const std::size_t R = x.dim(0), L = x.dim(1), D = x.dim(2), S = p.segments;
  if (S < 1 || D % S != 0) throw ConfigError("mmix: segment count does not divide the channel extent");
  const std::size_t seg = D / S, d = p.reduce.dim(1);
  if (p.reduce.dim(0) != seg || p.gen.dim(0) != L * d || p.gen.dim(1) != L * L) {
    throw ShapeError("mmix: parameters sized for a different axis or channel extent (input " + shape_str(x.shape()) +
                     ")");
  }
  std::vector<Tensor<T>> mats;
  for (std::size_t s = 0; s < S; ++s) {
    const auto reduced = linear(slice(x, 2, s * seg, seg), p.reduce);
    const auto logits = linear(reshape(reduced, {R, L * d}), p.gen, &p.gen_b);
    mats.push_back(reshape(logits, {R, 1, L, L}));
  }
  return softmax(concat(mats, 1));
}

// Mixes tokens along axis -2 of x (..., L, D).
template <class T>
Tensor<T> mmix_op(const Tensor<T>& x, const MMixParams<T>& p) {
  if (x.rank() < 2) throw ShapeError("mmix_op: expected (..., L, D), got " + shape_str(x.shape()));
  const std::size_t L = x.dim(x.rank() - 2), D = x.shape().back(), R = x.numel() / (L * D), S = p.segments;
  if (L < 1) throw ShapeError("mmix_op: empty mixing axis");
  const auto flat = reshape(x, {R, L, D});
  const auto P = mmix_matrices(flat, p);
  const std::size_t seg = D / S;
  std::vector<Tensor<T>> parts;
  for (std::size_t s = 0; s < S; ++s) {
    const auto Ps = reshape(slice(P, 1, s, 1), {R, L, L});
    parts.push_back(contract(Ps, slice(flat, 2, s * seg, seg), "rij,rjc->ric"));
  }
  return reshape(concat(parts, 2), x.shape());
}

struct DmfmConfig {
  std::size_t dim = 32;  // per-modality extent; the mixer runs at 2 * dim
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t segments = 2;
  std::size_t reduced = 0;  // 0: mixer extent / 4
  std::size_t mlp_ratio = 4;
};

template <class T>
struct DmfmParams {
  Tensor<T> norm1_g, norm1_b, norm2_g, norm2_b;
  MMixParams<T> row_mix;  // along W'
  MMixParams<T> col_mix;  // along H'
  Tensor<T> chan_w, chan_b;
  Tensor<T> psi_w, psi_b;  // zero at init
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;  // fc2 zero at init
  std::size_t grid_h = 0, grid_w = 0;

  std::size_t mixer_channels() const { return norm1_g.numel(); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "norm1.gamma", norm1_g);
    fn(prefix + "norm1.beta", norm1_b);
    row_mix.visit(prefix + "row_mix.", fn);
    col_mix.visit(prefix + "col_mix.", fn);
    fn(prefix + "chan_mix.w", chan_w);
    fn(prefix + "chan_mix.b", chan_b);
    fn(prefix + "psi.w", psi_w);
    fn(prefix + "psi.b", psi_b);
    fn(prefix + "norm2.gamma", norm2_g);
    fn(prefix + "norm2.beta", norm2_b);
    fn(prefix + "cmlp.fc1.w", fc1_w);
    fn(prefix + "cmlp.fc1.b", fc1_b);
    fn(prefix + "cmlp.fc2.w", fc2_w);
    fn(prefix + "cmlp.fc2.b", fc2_b);
  }
};

template <class T>
DmfmParams<T> dmfm_init(const DmfmConfig& cfg, std::uint64_t seed) {
  if (cfg.grid_h < 1 || cfg.grid_w < 1) throw ConfigError("dmfm: grid extents must be positive");
  const std::size_t C = 2 * cfg.dim, H = cfg.mlp_ratio * C;
  const std::size_t d = cfg.reduced ? cfg.reduced : std::max<std::size_t>(1, C / 4);
  Rng rng = Rng::keyed(seed, "dmfm");
  DmfmParams<T> p;
  p.norm1_g = Tensor<T>::full({C}, T(1));
  p.norm1_b = Tensor<T>::zeros({C});
  p.norm2_g = Tensor<T>::full({C}, T(1));
  p.norm2_b = Tensor<T>::zeros({C});
  p.row_mix = mmix_init<T>(cfg.grid_w, C, cfg.segments, d, rng);
  p.col_mix = mmix_init<T>(cfg.grid_h, C, cfg.segments, d, rng);
  const double cb = 1.0 / std::sqrt(double(C));
  p.chan_w = rand_uniform<T>({C, C}, rng, -cb, cb);
  p.chan_b = Tensor<T>::zeros({C});
  p.psi_w = Tensor<T>::zeros({C, C});
  p.psi_b = Tensor<T>::zeros({C});
  p.fc1_w = rand_uniform<T>({C, H}, rng, -cb, cb);
  p.fc1_b = Tensor<T>::zeros({H});
  p.fc2_w = Tensor<T>::zeros({H, C});
  p.fc2_b = Tensor<T>::zeros({C});
  p.grid_h = cfg.grid_h;
  p.grid_w = cfg.grid_w;
  return p;
}

// g (B, H', W', C) -> psi(s_w + s_h + s_c)
template <class T>
Tensor<T> multimixer_block(const Tensor<T>& g, const DmfmParams<T>& p) {
  if (g.rank() != 4 || g.dim(1) != p.grid_h || g.dim(2) != p.grid_w || g.dim(3) != p.mixer_channels()) {
    throw ShapeError("multimixer_block: input " + shape_str(g.shape()) + " vs grid " + std::to_string(p.grid_h) + "x" +
                     std::to_string(p.grid_w) + "x" + std::to_string(p.mixer_channels()));
  }
  const auto s_w = mmix_op(g, p.row_mix);
  const auto s_h = permute(mmix_op(permute(g, {0, 2, 1, 3}), p.col_mix), {0, 2, 1, 3});
  const auto s_c = linear(g, p.chan_w, &p.chan_b);
  return linear(add(add(s_w, s_h), s_c), p.psi_w, &p.psi_b);
}

// Mixer layer on the concatenated grid (B, H', W', 2D):
//   s = MixB(Norm x) + x;  b = CMLP(Norm s) + s
template <class T>
Tensor<T> mixer_layer(const Tensor<T>& x, const DmfmParams<T>& p) {
  const auto s = add(multimixer_block(layer_norm(x, p.norm1_g, p.norm1_b), p), x);
  const auto h = gelu(linear(layer_norm(s, p.norm2_g, p.norm2_b), p.fc1_w, &p.fc1_b));
  return add(linear(h, p.fc2_w, &p.fc2_b), s);
}

// Mean over the modality axis of (..., 2D) viewed as (..., 2, D). Also the
// plain fusion used when the mixer is disabled.
template <class T>
Tensor<T> modality_mean(const Tensor<T>& a, const Tensor<T>& b) {
  return mul_scalar(add(a, b), T(0.5));
}

template <class T>
Tensor<T> gap_modalities(const Tensor<T>& x) {
  const std::size_t C = x.shape().back();
  if (C % 2 != 0) throw ShapeError("gap_modalities: odd channel extent");
  const std::size_t axis = x.rank() - 1;
  return modality_mean(slice(x, axis, 0, C / 2), slice(x, axis, C / 2, C / 2));
}

namespace detail {

// Per-frame grids from a search-token stream; tokens of one frame are a
// contiguous run of H'W' tokens. Returns (B * F, H', W', D).
template <class T>
Tensor<T> search_grid(const TokenBatch<T>& t, std::size_t H, std::size_t W, std::size_t& frames) {
  t.validate();
  const std::size_t HW = H * W, L = t.length();
  if (L == 0 || L % HW != 0) {
    throw ShapeError("dmfm: " + std::to_string(L) + " search tokens do not tile a " + std::to_string(H) + "x" +
                     std::to_string(W) + " grid");
  }
  frames = L / HW;
  for (std::size_t i = 0; i < L; ++i) {
    if (t.layout[i].role != Role::kSearch) throw ShapeError("dmfm: template token in the search stream");
    if (t.layout[i].frame != t.layout[(i / HW) * HW].frame) throw ShapeError("dmfm: frame run is not contiguous");
  }
  return reshape(t.data, {t.batch() * frames, H, W, t.channels()});
}

}  // namespace detail

// sV, sX: search tokens of each modality, aligned token for token.
// Output (B * F, H', W', D), index b * F + f.
template <class T>
Tensor<T> dmfm_forward(const TokenBatch<T>& sV, const TokenBatch<T>& sX, const DmfmParams<T>& p) {
  if (sV.data.shape() != sX.data.shape()) {
    throw ShapeError("dmfm: V " + shape_str(sV.data.shape()) + " vs X " + shape_str(sX.data.shape()));
  }
  for (std::size_t i = 0; i < sV.layout.size(); ++i) {
    const auto &a = sV.layout[i], &b = sX.layout[i];
    if (a.modality != Modality::kV || b.modality != Modality::kX || a.role != b.role || a.frame != b.frame) {
      throw ShapeError("dmfm: V and X tokens misaligned at position " + std::to_string(i));
    }
  }
  if (2 * sV.channels() != p.mixer_channels()) throw ShapeError("dmfm: channel extent differs from the mixer");
  std::size_t frames = 0;
  const auto gv = detail::search_grid(sV, p.grid_h, p.grid_w, frames);
  const auto gx = detail::search_grid(sX, p.grid_h, p.grid_w, frames);
  return gap_modalities(mixer_layer(concat(std::vector<Tensor<T>>{gv, gx}, 3), p));
}

// Baseline without the mixer: per-token modality mean on the same grid.
template <class T>
Tensor<T> mean_fusion(const TokenBatch<T>& sV, const TokenBatch<T>& sX, std::size_t H, std::size_t W) {
  std::size_t frames = 0;
  return modality_mean(detail::search_grid(sV, H, W, frames), detail::search_grid(sX, H, W, frames));
}

}  // namespace ubatrack
