#pragma once

// Diagonal selective state space model: zero-order-hold discretization, the
// input-dependent (B, C, delta) parameterization, and two evaluations of the
// scan recurrence
//
//   h_t[d,n] = Abar_t[d,n] h_{t-1}[d,n] + Bbar_t[d,n] B_t[n] x_t[d]
//   y_t[d]   = sum_n C_t[n] h_t[d,n],          h_{-1} = 0
//
// The sequential form is the reference. The chunked form evaluates each chunk
// from a zero state together with its running product of Abar, then chains
// the chunks with a serial carry pass.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ubatrack/numerics/numerics.hpp"

namespace ubatrack {

// Below this |delta * A| the expm1(z)/z factor is replaced by its limit 1.
inline constexpr double kZohSmallArgument = 1e-6;
inline constexpr std::size_t kDefaultScanChunk = 16;

template <class T>
struct SsmParams {
  Tensor<T> A_log;       // (D, N), A = -exp(A_log)
  Tensor<T> proj_B;      // (D, N)
  Tensor<T> proj_C;      // (D, N)
  Tensor<T> proj_delta;  // (D, D)
  Tensor<T> delta_bias;  // (D)

  std::size_t channels() const { return A_log.dim(0); }
  std::size_t state() const { return A_log.dim(1); }

  Tensor<T> A() const { return neg(exp(A_log)); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "A_log", A_log);
    fn(prefix + "proj_B", proj_B);
    fn(prefix + "proj_C", proj_C);
    fn(prefix + "proj_delta", proj_delta);
    fn(prefix + "delta_bias", delta_bias);
  }
};

// A spans -1..-N along the state axis for every channel; the delta bias is
// the inverse softplus of a log-uniform sample in [1e-3, 1e-1].
template <class T>
SsmParams<T> ssm_init(std::size_t channels, std::size_t state, Rng& rng) {
  SsmParams<T> p;
  std::vector<T> a_log(channels * state);
  for (std::size_t d = 0; d < channels; ++d)
    for (std::size_t n = 0; n < state; ++n) a_log[d * state + n] = static_cast<T>(std::log(double(n + 1)));
  p.A_log = Tensor<T>::from_data({channels, state}, std::move(a_log));
  const double bound = 1.0 / std::sqrt(double(channels));
  p.proj_B = rand_uniform<T>({channels, state}, rng, -bound, bound);
  p.proj_C = rand_uniform<T>({channels, state}, rng, -bound, bound);
  p.proj_delta = rand_uniform<T>({channels, channels}, rng, -bound, bound);
  std::vector<T> bias(channels);
  for (auto& b : bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  p.delta_bias = Tensor<T>::from_data({channels}, std::move(bias));
  return p;
}

template <class T>
struct Discretized {
  Tensor<T> Abar;        // (B, L, D, N)
  Tensor<T> Bbar_scale;  // (B, L, D, N)
};

namespace detail {

// d/dz of expm1(z)/z
template <class T>
T zoh_phi_prime(T z) {
  if (std::abs(z) < T(1e-2)) {
    return T(0.5) + z * (T(1) / T(3) + z * (T(1) / T(8) + z * (T(1) / T(30) + z / T(144))));
  }
  return (std::exp(z) * (z - T(1)) + T(1)) / (z * z);
}

template <class T>
void check_finite_input(const Tensor<T>& t, const char* name) {
  for (T v : t.values()) {
    if (std::isnan(v)) throw DomainError(std::string("selective scan: NaN in ") + name);
  }
}

}  // namespace detail

// Abar = exp(delta A); Bbar_scale = (delta A)^{-1} (exp(delta A) - 1) delta,
// which reduces to expm1(delta A) / A elementwise for diagonal A.
template <class T>
Discretized<T> zoh_discretize(const Tensor<T>& A_diag, const Tensor<T>& delta) {
  if (A_diag.rank() != 2) throw ShapeError("zoh_discretize: A must be (D,N), got " + shape_str(A_diag.shape()));
  if (delta.rank() != 3 || delta.dim(2) != A_diag.dim(0)) {
    throw ShapeError("zoh_discretize: delta " + shape_str(delta.shape()) + " vs A " + shape_str(A_diag.shape()));
  }
  for (T v : delta.values()) {
    if (!(v > T(0))) throw DomainError("zoh_discretize: delta must be positive, got " + std::to_string(double(v)));
  }
  for (T v : A_diag.values()) {
    if (!(v <= T(0))) throw DomainError("zoh_discretize: A must be non-positive, got " + std::to_string(double(v)));
  }
  const std::size_t B = delta.dim(0), L = delta.dim(1), D = A_diag.dim(0), N = A_diag.dim(1);
  const std::size_t total = B * L * D * N;
  std::vector<T> abar(total), bscale(total);
  const auto& a = A_diag.values();
  const auto& dt = delta.values();
  for (std::size_t r = 0; r < B * L; ++r)
    for (std::size_t d = 0; d < D; ++d) {
      const T step = dt[r * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const T av = a[d * N + n];
        const T z = step * av;
        const std::size_t i = (r * D + d) * N + n;
        abar[i] = std::exp(z);
        bscale[i] = std::abs(z) < T(kZohSmallArgument) ? step : std::expm1(z) / av;
      }
    }
  const Shape shape{B, L, D, N};
  auto grad_pair = [B, L, D, N](Node<T>& self, bool is_abar) {
    auto& na = *self.inputs[0];
    auto& nd = *self.inputs[1];
    std::vector<T>* ga = na.requires_grad ? &na.ensure_grad() : nullptr;
    std::vector<T>* gd = nd.requires_grad ? &nd.ensure_grad() : nullptr;
    for (std::size_t r = 0; r < B * L; ++r)
      for (std::size_t d = 0; d < D; ++d) {
        const T step = nd.value[r * D + d];
        for (std::size_t n = 0; n < N; ++n) {
          const T av = na.value[d * N + n];
          const T z = step * av;
          const T g = self.grad[(r * D + d) * N + n];
          const T ez = std::exp(z);
          if (is_abar) {
            if (ga) (*ga)[d * N + n] += g * step * ez;
            if (gd) (*gd)[r * D + d] += g * av * ez;
          } else {
            if (ga) (*ga)[d * N + n] += g * step * step * detail::zoh_phi_prime(z);
            if (gd) (*gd)[r * D + d] += g * ez;
          }
        }
      }
  };
  Discretized<T> out;
  out.Abar = make_result<T>(shape, std::move(abar), {&A_diag, &delta},
                            [grad_pair](Node<T>& self) { grad_pair(self, true); });
  out.Bbar_scale = make_result<T>(shape, std::move(bscale), {&A_diag, &delta},
                                  [grad_pair](Node<T>& self) { grad_pair(self, false); });
  return out;
}

template <class T>
struct SelectiveParams {
  Tensor<T> Bmat;   // (B, L, N)
  Tensor<T> Cmat;   // (B, L, N)
  Tensor<T> delta;  // (B, L, D)
};

template <class T>
SelectiveParams<T> s6_parameterize(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() != 3 || x.dim(2) != p.channels()) {
    throw ShapeError("s6_parameterize: input " + shape_str(x.shape()) + " vs channel extent " +
                     std::to_string(p.channels()));
  }
  return {linear(x, p.proj_B), linear(x, p.proj_C), softplus(linear(x, p.proj_delta, &p.delta_bias))};
}

enum class ScanAlgorithm { kReference, kChunked };

namespace detail {

struct ScanDims {
  std::size_t B, L, D, N;
};

template <class T>
ScanDims check_scan_inputs(const Tensor<T>& Abar, const Tensor<T>& Bs, const Tensor<T>& Bmat,
                           const Tensor<T>& Cmat, const Tensor<T>& x) {
  if (x.rank() != 3 || Abar.rank() != 4) {
    throw ShapeError("selective scan: x must be (B,L,D) and Abar (B,L,D,N); got " + shape_str(x.shape()) +
                     " and " + shape_str(Abar.shape()));
  }
  const ScanDims dims{x.dim(0), x.dim(1), x.dim(2), Abar.dim(3)};
  const Shape state{dims.B, dims.L, dims.D, dims.N}, proj{dims.B, dims.L, dims.N};
  if (Abar.shape() != state || Bs.shape() != state) {
    throw ShapeError("selective scan: Abar/Bbar_scale must be " + shape_str(state));
  }
  if (Bmat.shape() != proj || Cmat.shape() != proj) {
    throw ShapeError("selective scan: Bmat/Cmat must be " + shape_str(proj));
  }
  check_finite_input(Abar, "Abar");
  check_finite_input(Bs, "Bbar_scale");
  check_finite_input(Bmat, "Bmat");
  check_finite_input(Cmat, "Cmat");
  check_finite_input(x, "x");
  return dims;
}

// Fills y and the per-step states h (B,L,D,N).
template <class T>
void scan_reference(const ScanDims& s, const T* abar, const T* bs, const T* bm, const T* cm, const T* x,
                    T* y, T* states) {
  const std::size_t DN = s.D * s.N;
  std::vector<T> h(DN);
  for (std::size_t b = 0; b < s.B; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < s.L; ++t) {
      const std::size_t row = b * s.L + t;
      const T* a_t = abar + row * DN;
      const T* bs_t = bs + row * DN;
      const T* bm_t = bm + row * s.N;
      const T* cm_t = cm + row * s.N;
      const T* x_t = x + row * s.D;
      for (std::size_t d = 0; d < s.D; ++d) {
        T acc = T(0);
        for (std::size_t n = 0; n < s.N; ++n) {
          const std::size_t i = d * s.N + n;
          h[i] = a_t[i] * h[i] + (bs_t[i] * bm_t[n]) * x_t[d];
          acc += cm_t[n] * h[i];
        }
        y[row * s.D + d] = acc;
      }
      std::copy(h.begin(), h.end(), states + row * DN);
    }
  }
}

template <class T>
void scan_chunked(const ScanDims& s, std::size_t chunk, const T* abar, const T* bs, const T* bm, const T* cm,
                  const T* x, T* y, T* states) {
  const std::size_t DN = s.D * s.N;
  const std::size_t num_chunks = (s.L + chunk - 1) / chunk;
  // local: chunk-internal state from zero; prod: running product of Abar.
  std::vector<T> local(s.L * DN), prod(s.L * DN), carry(DN);
  for (std::size_t b = 0; b < s.B; ++b) {
    const std::size_t base = b * s.L;
    // Intra-chunk pass; chunks are independent of each other here.
    for (std::size_t c = 0; c < num_chunks; ++c) {
      const std::size_t t0 = c * chunk, t1 = std::min(s.L, t0 + chunk);
      for (std::size_t t = t0; t < t1; ++t) {
        const std::size_t row = base + t;
        const T* a_t = abar + row * DN;
        const T* bs_t = bs + row * DN;
        const T* bm_t = bm + row * s.N;
        const T* x_t = x + row * s.D;
        T* lo = local.data() + t * DN;
        T* pr = prod.data() + t * DN;
        const T* lo_prev = t == t0 ? nullptr : lo - DN;
        const T* pr_prev = t == t0 ? nullptr : pr - DN;
        for (std::size_t d = 0; d < s.D; ++d)
          for (std::size_t n = 0; n < s.N; ++n) {
            const std::size_t i = d * s.N + n;
            const T drive = (bs_t[i] * bm_t[n]) * x_t[d];
            lo[i] = lo_prev ? a_t[i] * lo_prev[i] + drive : drive;
            pr[i] = pr_prev ? pr_prev[i] * a_t[i] : a_t[i];
          }
      }
    }
    // Serial carry pass over chunk boundaries, then per-chunk outputs.
    std::fill(carry.begin(), carry.end(), T(0));
    for (std::size_t c = 0; c < num_chunks; ++c) {
      const std::size_t t0 = c * chunk, t1 = std::min(s.L, t0 + chunk);
      for (std::size_t t = t0; t < t1; ++t) {
        const std::size_t row = base + t;
        const T* cm_t = cm + row * s.N;
        T* h = states + row * DN;
        const T* lo = local.data() + t * DN;
        const T* pr = prod.data() + t * DN;
        for (std::size_t d = 0; d < s.D; ++d) {
          T acc = T(0);
          for (std::size_t n = 0; n < s.N; ++n) {
            const std::size_t i = d * s.N + n;
            h[i] = pr[i] * carry[i] + lo[i];
            acc += cm_t[n] * h[i];
          }
          y[row * s.D + d] = acc;
        }
      }
      std::copy_n(states + (base + t1 - 1) * DN, DN, carry.begin());
    }
  }
}

template <class T>
Tensor<T> selective_scan(const Tensor<T>& Abar, const Tensor<T>& Bs, const Tensor<T>& Bmat,
                         const Tensor<T>& Cmat, const Tensor<T>& x, ScanAlgorithm algo, std::size_t chunk) {
  const auto s = check_scan_inputs(Abar, Bs, Bmat, Cmat, x);
  if (chunk == 0) throw DomainError("selective scan: chunk size must be positive");
  const std::size_t DN = s.D * s.N;
  std::vector<T> y(s.B * s.L * s.D);
  auto states = std::make_shared<std::vector<T>>(s.B * s.L * DN);
  if (algo == ScanAlgorithm::kReference) {
    scan_reference(s, Abar.values().data(), Bs.values().data(), Bmat.values().data(), Cmat.values().data(),
                   x.values().data(), y.data(), states->data());
  } else {
    scan_chunked(s, chunk, Abar.values().data(), Bs.values().data(), Bmat.values().data(),
                 Cmat.values().data(), x.values().data(), y.data(), states->data());
  }
  return make_result<T>({s.B, s.L, s.D}, std::move(y), {&Abar, &Bs, &Bmat, &Cmat, &x},
                        [s, states](Node<T>& self) {
    // Reverse recurrence: gh_t = C_t gy_t + Abar_{t+1} gh_{t+1}.
    auto ptr = [](Node<T>& n) { return n.requires_grad ? n.ensure_grad().data() : nullptr; };
    Node<T>& n_abar = *self.inputs[0];
    Node<T>& n_bs = *self.inputs[1];
    Node<T>& n_bm = *self.inputs[2];
    Node<T>& n_cm = *self.inputs[3];
    Node<T>& n_x = *self.inputs[4];
    T* g_abar = ptr(n_abar);
    T* g_bs = ptr(n_bs);
    T* g_bm = ptr(n_bm);
    T* g_cm = ptr(n_cm);
    T* g_x = ptr(n_x);
    const std::size_t DN = s.D * s.N;
    const T* h_all = states->data();
    std::vector<T> gh(DN);
    for (std::size_t b = 0; b < s.B; ++b) {
      std::fill(gh.begin(), gh.end(), T(0));
      for (std::size_t t = s.L; t-- > 0;) {
        const std::size_t row = b * s.L + t;
        const T* gy = self.grad.data() + row * s.D;
        const T* h_t = h_all + row * DN;
        const T* h_prev = t > 0 ? h_t - DN : nullptr;
        const T* a_t = n_abar.value.data() + row * DN;
        const T* bs_t = n_bs.value.data() + row * DN;
        const T* bm_t = n_bm.value.data() + row * s.N;
        const T* cm_t = n_cm.value.data() + row * s.N;
        const T* x_t = n_x.value.data() + row * s.D;
        for (std::size_t d = 0; d < s.D; ++d) {
          T gx_acc = T(0);
          for (std::size_t n = 0; n < s.N; ++n) {
            const std::size_t i = d * s.N + n;
            gh[i] += gy[d] * cm_t[n];
            if (g_cm) g_cm[row * s.N + n] += gy[d] * h_t[i];
            if (g_abar && h_prev) g_abar[row * DN + i] += gh[i] * h_prev[i];
            if (g_bs) g_bs[row * DN + i] += gh[i] * bm_t[n] * x_t[d];
            if (g_bm) g_bm[row * s.N + n] += gh[i] * bs_t[i] * x_t[d];
            gx_acc += gh[i] * bs_t[i] * bm_t[n];
            gh[i] *= a_t[i];
          }
          if (g_x) g_x[row * s.D + d] += gx_acc;
        }
      }
    }
  });
}

}  // namespace detail

// Strict sequential recurrence; the equivalence oracle for the chunked scan.
template <class T>
Tensor<T> selective_scan_ref(const Tensor<T>& Abar, const Tensor<T>& Bbar_scale, const Tensor<T>& Bmat,
                             const Tensor<T>& Cmat, const Tensor<T>& x) {
  return detail::selective_scan(Abar, Bbar_scale, Bmat, Cmat, x, ScanAlgorithm::kReference, 1);
}

template <class T>
Tensor<T> selective_scan_fast(const Tensor<T>& Abar, const Tensor<T>& Bbar_scale, const Tensor<T>& Bmat,
                              const Tensor<T>& Cmat, const Tensor<T>& x, std::size_t chunk = kDefaultScanChunk) {
  return detail::selective_scan(Abar, Bbar_scale, Bmat, Cmat, x, ScanAlgorithm::kChunked, chunk);
}

}  // namespace ubatrack
