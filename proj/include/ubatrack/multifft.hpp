#pragma once

// Frequency-domain channel mixer: real FFT along channels, block-diagonal
// complex matrix multiply (EMM), sigmoid on real and imaginary parts, a
// second EMM, inverse real FFT.

#include <cstddef>
#include <string>

#include "ubatrack/numerics/numerics.hpp"

namespace ubatrack {

template <class T>
struct EmmParams {
  Tensor<T> W_re, W_im;  // (C_b, C_d, C_d), y_o = sum_i s_i W[b, i, o]
  Tensor<T> b_re, b_im;  // (C_b, C_d)

  std::size_t blocks() const { return W_re.dim(0); }
  std::size_t block_extent() const { return W_re.dim(1); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "W_re", W_re);
    fn(prefix + "W_im", W_im);
    fn(prefix + "b_re", b_re);
    fn(prefix + "b_im", b_im);
  }
};

template <class T>
EmmParams<T> emm_zeros(std::size_t blocks, std::size_t block_extent) {
  return {Tensor<T>::zeros({blocks, block_extent, block_extent}), Tensor<T>::zeros({blocks, block_extent, block_extent}),
          Tensor<T>::zeros({blocks, block_extent}), Tensor<T>::zeros({blocks, block_extent})};
}

template <class T>
EmmParams<T> emm_random(std::size_t blocks, std::size_t block_extent, Rng& rng, double scale) {
  return {randn<T>({blocks, block_extent, block_extent}, rng, scale),
          randn<T>({blocks, block_extent, block_extent}, rng, scale), Tensor<T>::zeros({blocks, block_extent}),
          Tensor<T>::zeros({blocks, block_extent})};
}

// Complex block product on the last axis (extent C_b * C_d):
//   y_re = s_re W_re - s_im W_im + b_re,  y_im = s_re W_im + s_im W_re + b_im
template <class T>
ComplexPair<T> emm(const ComplexPair<T>& s, const EmmParams<T>& p) {
  const std::size_t blocks = p.blocks(), extent = p.block_extent();
  const std::size_t F = s.re.shape().back();
  if (s.re.shape() != s.im.shape()) throw ShapeError("emm: re/im shape mismatch");
  if (F != blocks * extent) {
    throw ShapeError("emm: spectrum extent " + std::to_string(F) + " is not " + std::to_string(blocks) +
                     " blocks x " + std::to_string(extent));
  }
  const std::size_t rows = s.re.numel() / F;
  const auto re = reshape(s.re, {rows, blocks, extent});
  const auto im = reshape(s.im, {rows, blocks, extent});
  constexpr const char* kSpec = "rbi,bio->rbo";
  auto y_re = add(sub(contract(re, p.W_re, kSpec), contract(im, p.W_im, kSpec)), p.b_re);
  auto y_im = add(add(contract(re, p.W_im, kSpec), contract(im, p.W_re, kSpec)), p.b_im);
  return {reshape(y_re, s.re.shape()), reshape(y_im, s.im.shape())};
}

template <class T>
struct MultiFftParams {
  EmmParams<T> emm1;
  EmmParams<T> emm2;  // zero at init
  std::size_t channels = 0;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    emm1.visit(prefix + "emm1.", fn);
    emm2.visit(prefix + "emm2.", fn);
  }
};

// Largest divisor of the half-spectrum extent not above 4.
inline std::size_t default_fft_blocks(std::size_t channels) {
  const std::size_t F = half_spectrum_extent(channels);
  for (std::size_t b = 4; b > 1; --b)
    if (F % b == 0) return b;
  return 1;
}

// blocks == 0 selects default_fft_blocks().
template <class T>
MultiFftParams<T> multifft_init(std::size_t channels, std::size_t blocks, Rng& rng, double scale = 0.02) {
  if (channels < 4 || channels % 2 != 0) {
    throw ConfigError("multifft: channel extent must be even and >= 4, got " + std::to_string(channels));
  }
  const std::size_t F = half_spectrum_extent(channels);
  if (blocks == 0) blocks = default_fft_blocks(channels);
  if (F % blocks != 0) {
    throw ConfigError("multifft: " + std::to_string(blocks) + " blocks do not divide the half-spectrum extent " +
                      std::to_string(F));
  }
  return {emm_random<T>(blocks, F / blocks, rng, scale), emm_zeros<T>(blocks, F / blocks), channels};
}

template <class T>
Tensor<T> multifft_forward(const Tensor<T>& x, const MultiFftParams<T>& p) {
  if (x.shape().back() != p.channels) {
    throw ShapeError("multifft_forward: input " + shape_str(x.shape()) + " vs channel extent " +
                     std::to_string(p.channels));
  }
  auto s = emm(rfft_channels(x), p.emm1);
  s = {sigmoid(s.re), sigmoid(s.im)};
  s = emm(s, p.emm2);
  return irfft_channels(s, p.channels);
}

}  // namespace ubatrack
