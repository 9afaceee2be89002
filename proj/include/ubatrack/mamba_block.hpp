#pragma once

// Gated Mamba token mixer:
//   (u, g) = split(in_proj x)
//   u      = silu(causal_dwconv(u))
//   y      = selective_scan(s6(u), u)
//   out    = out_proj(y * silu(g))
//
// Parameter count for channel extent D, inner extent E, state N, kernel k:
//   3DE + E(k + 2) + 3EN + E^2
// (in_proj 2DE, conv kE + E, proj_B/proj_C 2EN, proj_delta E^2 + E,
//  A_log EN, out_proj ED).

#include <cstddef>
#include <cstdint>
#include <string>

#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/ssm_core.hpp"

namespace ubatrack {

// Depthwise convolution over the sequence axis, left-padded so y_t only sees
// x_{t-k+1..t}. x (B, L, E), weight (k, E), bias (E).
template <class T>
Tensor<T> causal_dwconv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 3 || weight.rank() != 2 || weight.dim(1) != x.dim(2) || bias.numel() != x.dim(2)) {
    throw ShapeError("causal_dwconv1d: x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                     ", bias " + shape_str(bias.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), E = x.dim(2), K = weight.dim(0);
  std::vector<T> y(x.numel());
  const auto& xv = x.values();
  const auto& wv = weight.values();
  const auto& bv = bias.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* dst = y.data() + (b * L + t) * E;
      std::copy_n(bv.begin(), E, dst);
      for (std::size_t j = 0; j < K; ++j) {
        if (t + j + 1 < K) continue;
        const std::size_t src_t = t + j + 1 - K;
        const T* src = xv.data() + (b * L + src_t) * E;
        const T* w = wv.data() + j * E;
        for (std::size_t e = 0; e < E; ++e) dst[e] += w[e] * src[e];
      }
    }
  return make_result<T>(x.shape(), std::move(y), {&x, &weight, &bias}, [B, L, E, K](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    auto& nb = *self.inputs[2];
    T* gx = nx.requires_grad ? nx.ensure_grad().data() : nullptr;
    T* gw = nw.requires_grad ? nw.ensure_grad().data() : nullptr;
    T* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const T* g = self.grad.data() + (b * L + t) * E;
        if (gb)
          for (std::size_t e = 0; e < E; ++e) gb[e] += g[e];
        for (std::size_t j = 0; j < K; ++j) {
          if (t + j + 1 < K) continue;
          const std::size_t src = (b * L + t + j + 1 - K) * E;
          for (std::size_t e = 0; e < E; ++e) {
            if (gx) gx[src + e] += g[e] * nw.value[j * E + e];
            if (gw) gw[j * E + e] += g[e] * nx.value[src + e];
          }
        }
      }
  });
}

template <class T>
struct MambaBlockParams {
  Tensor<T> in_proj;   // (D, 2E)
  Tensor<T> conv_w;    // (k, E)
  Tensor<T> conv_b;    // (E)
  SsmParams<T> ssm;    // channel extent E
  Tensor<T> out_proj;  // (E, D), zero at init
  ScanAlgorithm scan = ScanAlgorithm::kChunked;
  std::size_t scan_chunk = kDefaultScanChunk;

  std::size_t dim() const { return in_proj.dim(0); }
  std::size_t inner() const { return conv_w.dim(1); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "in_proj", in_proj);
    fn(prefix + "conv_w", conv_w);
    fn(prefix + "conv_b", conv_b);
    ssm.visit(prefix + "ssm.", fn);
    fn(prefix + "out_proj", out_proj);
  }
};

inline std::size_t mamba_param_count(std::size_t D, std::size_t E, std::size_t N, std::size_t k) {
  return 3 * D * E + E * (k + 2) + 3 * E * N + E * E;
}

template <class T>
MambaBlockParams<T> mamba_init(std::size_t D, std::size_t E, std::size_t N, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("mamba_init: conv kernel must be >= 1");
  if (E < D) throw ConfigError("mamba_init: inner extent E must be >= D");
  Rng rng = Rng::keyed(seed, "mamba");
  MambaBlockParams<T> p;
  const double in_bound = 1.0 / std::sqrt(double(D));
  const double conv_bound = 1.0 / std::sqrt(double(k));
  p.in_proj = rand_uniform<T>({D, 2 * E}, rng, -in_bound, in_bound);
  p.conv_w = rand_uniform<T>({k, E}, rng, -conv_bound, conv_bound);
  p.conv_b = rand_uniform<T>({E}, rng, -conv_bound, conv_bound);
  p.ssm = ssm_init<T>(E, N, rng);
  p.out_proj = Tensor<T>::zeros({E, D});
  return p;
}

template <class T>
Tensor<T> mamba_forward(const Tensor<T>& x, const MambaBlockParams<T>& p) {
  if (x.rank() != 3 || x.dim(2) != p.dim()) {
    throw ShapeError("mamba_forward: input " + shape_str(x.shape()) + " vs channel extent " + std::to_string(p.dim()));
  }
  const std::size_t E = p.inner();
  const auto xz = linear(x, p.in_proj);
  const auto gate = slice(xz, 2, E, E);
  const auto u = silu(causal_dwconv1d(slice(xz, 2, 0, E), p.conv_w, p.conv_b));
  const auto sel = s6_parameterize(u, p.ssm);
  const auto disc = zoh_discretize(p.ssm.A(), sel.delta);
  const auto y = detail::selective_scan(disc.Abar, disc.Bbar_scale, sel.Bmat, sel.Cmat, u, p.scan, p.scan_chunk);
  return linear(mul(y, silu(gate)), p.out_proj);
}

}  // namespace ubatrack
