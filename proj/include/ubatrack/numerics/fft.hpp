#pragma once

// Mixed-radix FFT plus the real half-spectrum transforms along the last
// (channel) axis. Gradients use the adjoint transforms directly.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <numbers>
#include <vector>

#include "ubatrack/numerics/ops.hpp"
#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

// Recursive decimation-in-time Cooley-Tukey over the prime factors of n;
// prime lengths fall back to a direct DFT at that level.
template <class T>
class FftPlan {
 public:
  using Complex = std::complex<T>;

  explicit FftPlan(std::size_t n) : n_(n), twiddle_(n), scratch_(n) {
    if (n == 0) throw DomainError("FFT length must be positive");
    for (std::size_t j = 0; j < n; ++j) {
      const long double angle = -2.0L * std::numbers::pi_v<long double> * static_cast<long double>(j) /
                                static_cast<long double>(n);
      twiddle_[j] = Complex(static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle)));
    }
  }

  std::size_t size() const { return n_; }

  // out_k = sum_j in_j exp(-2 pi i jk / n)
  void forward(const Complex* in, Complex* out) { run(in, 1, out, n_, false); }
  // out_j = sum_k in_k exp(+2 pi i jk / n), no 1/n factor
  void inverse_unscaled(const Complex* in, Complex* out) { run(in, 1, out, n_, true); }

 private:
  static std::size_t smallest_factor(std::size_t len) {
    if (len % 2 == 0) return 2;
    for (std::size_t f = 3; f * f <= len; f += 2)
      if (len % f == 0) return f;
    return len;
  }

  Complex root(std::size_t exponent, std::size_t len, bool inverse) const {
    const Complex w = twiddle_[(exponent % len) * (n_ / len)];
    return inverse ? std::conj(w) : w;
  }

  void run(const Complex* in, std::size_t stride, Complex* out, std::size_t len, bool inverse) {
    if (len == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t radix = smallest_factor(len);
    const std::size_t m = len / radix;
    for (std::size_t r = 0; r < radix; ++r) run(in + r * stride, stride * radix, out + r * m, m, inverse);

    // Combine radix sub-transforms of length m into one of length len.
    Complex* tmp = scratch_.data();
    if (radix == 2) {
      for (std::size_t k = 0; k < m; ++k) {
        const Complex t = root(k, len, inverse) * out[m + k];
        tmp[k] = out[k] + t;
        tmp[k + m] = out[k] - t;
      }
    } else {
      for (std::size_t q = 0; q < radix; ++q) {
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t freq = k + q * m;
          Complex acc = out[k];
          for (std::size_t r = 1; r < radix; ++r) acc += root(r * freq, len, inverse) * out[r * m + k];
          tmp[freq] = acc;
        }
      }
    }
    std::copy(tmp, tmp + len, out);
  }

  std::size_t n_;
  std::vector<Complex> twiddle_;
  std::vector<Complex> scratch_;
};

template <class T>
FftPlan<T>& fft_plan(std::size_t n) {
  thread_local std::map<std::size_t, FftPlan<T>> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, FftPlan<T>(n)).first;
  return it->second;
}

// Half spectrum along the last axis: (re, im), each of extent floor(C/2)+1.
template <class T>
struct ComplexPair {
  Tensor<T> re;
  Tensor<T> im;
};

inline std::size_t half_spectrum_extent(std::size_t channels) { return channels / 2 + 1; }

namespace detail {

// (..., C) -> (..., 2F) laid out [re_0..re_{F-1}, im_0..im_{F-1}]
template <class T>
Tensor<T> rfft_packed(const Tensor<T>& x) {
  const std::size_t C = x.shape().back();
  if (C < 2) throw DomainError("rfft_channels needs a channel extent >= 2, got " + std::to_string(C));
  const std::size_t F = half_spectrum_extent(C), rows = x.numel() / C;
  using Complex = std::complex<T>;
  std::vector<Complex> buf_in(C), buf_out(C);
  std::vector<T> out(rows * 2 * F);
  auto& plan = fft_plan<T>(C);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < C; ++c) buf_in[c] = Complex(x.values()[r * C + c], T(0));
    plan.forward(buf_in.data(), buf_out.data());
    for (std::size_t k = 0; k < F; ++k) {
      out[r * 2 * F + k] = buf_out[k].real();
      out[r * 2 * F + F + k] = buf_out[k].imag();
    }
  }
  Shape shape = x.shape();
  shape.back() = 2 * F;
  return make_result<T>(std::move(shape), std::move(out), {&x}, [C, F, rows](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    // Adjoint: real part of the unscaled inverse of the zero-padded gradient.
    auto& g = src.ensure_grad();
    auto& plan = fft_plan<T>(C);
    std::vector<Complex> in(C), res(C);
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(in.begin(), in.end(), Complex(0));
      for (std::size_t k = 0; k < F; ++k)
        in[k] = Complex(self.grad[r * 2 * F + k], self.grad[r * 2 * F + F + k]);
      plan.inverse_unscaled(in.data(), res.data());
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += res[c].real();
    }
  });
}

// (..., 2F) -> (..., C). Imaginary parts of the DC and (even C) Nyquist bins
// carry no information for a real signal and are ignored.
template <class T>
Tensor<T> irfft_packed(const Tensor<T>& s, std::size_t C) {
  const std::size_t F = half_spectrum_extent(C);
  if (C < 2) throw DomainError("irfft_channels needs C >= 2, got " + std::to_string(C));
  if (s.shape().back() != 2 * F) {
    throw ShapeError("irfft_channels: spectrum extent " + std::to_string(s.shape().back() / 2) +
                     " does not match C=" + std::to_string(C) + " (expected " + std::to_string(F) + ")");
  }
  const std::size_t rows = s.numel() / (2 * F);
  const bool has_nyquist = C % 2 == 0;
  using Complex = std::complex<T>;
  std::vector<Complex> full(C), res(C);
  std::vector<T> out(rows * C);
  auto& plan = fft_plan<T>(C);
  const T inv_c = T(1) / static_cast<T>(C);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* re = s.values().data() + r * 2 * F;
    const T* im = re + F;
    full[0] = Complex(re[0], T(0));
    for (std::size_t k = 1; k < F; ++k) {
      if (has_nyquist && k == C / 2) {
        full[k] = Complex(re[k], T(0));
      } else {
        full[k] = Complex(re[k], im[k]);
        full[C - k] = Complex(re[k], -im[k]);
      }
    }
    plan.inverse_unscaled(full.data(), res.data());
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = res[c].real() * inv_c;
  }
  Shape shape = s.shape();
  shape.back() = C;
  return make_result<T>(std::move(shape), std::move(out), {&s}, [C, F, rows, has_nyquist](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (!src.requires_grad) return;
    // Adjoint: weighted forward transform of the output gradient.
    auto& g = src.ensure_grad();
    auto& plan = fft_plan<T>(C);
    std::vector<Complex> in(C), res(C);
    const T inv_c = T(1) / static_cast<T>(C);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < C; ++c) in[c] = Complex(self.grad[r * C + c], T(0));
      plan.forward(in.data(), res.data());
      for (std::size_t k = 0; k < F; ++k) {
        const bool edge = k == 0 || (has_nyquist && k == C / 2);
        const T w = (edge ? T(1) : T(2)) * inv_c;
        g[r * 2 * F + k] += w * res[k].real();
        if (!edge) g[r * 2 * F + F + k] += w * res[k].imag();
      }
    }
  });
}

}  // namespace detail

template <class T>
ComplexPair<T> rfft_channels(const Tensor<T>& x) {
  const auto packed = detail::rfft_packed(x);
  const std::size_t axis = x.rank() - 1;
  const std::size_t F = packed.shape().back() / 2;
  return {slice(packed, axis, 0, F), slice(packed, axis, F, F)};
}

template <class T>
Tensor<T> irfft_channels(const ComplexPair<T>& s, std::size_t C) {
  if (s.re.shape() != s.im.shape()) {
    throw ShapeError("irfft_channels: re " + shape_str(s.re.shape()) + " vs im " + shape_str(s.im.shape()));
  }
  if (s.re.shape().back() != half_spectrum_extent(C)) {
    throw ShapeError("irfft_channels: spectrum extent " + std::to_string(s.re.shape().back()) +
                     " does not match C=" + std::to_string(C) + " (expected " +
                     std::to_string(half_spectrum_extent(C)) + ")");
  }
  return detail::irfft_packed(concat(std::vector<Tensor<T>>{s.re, s.im}, s.re.rank() - 1), C);
}

}  // namespace ubatrack
