#pragma once

// Verification suites behind the gradcheck and scancheck commands.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ubatrack/dmfm.hpp"
#include "ubatrack/mamba_block.hpp"
#include "ubatrack/multifft.hpp"
#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/ssm_core.hpp"
#include "ubatrack/stma.hpp"
#include "ubatrack/tracker.hpp"

namespace ubatrack {

struct GradSuiteEntry {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0;
  std::string worst_param;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double tolerance = 1e-4;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool passed() const { return worst() <= tolerance; }
};

namespace detail {

using Td = Tensor<double>;

inline Td leaf(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = rand_uniform<double>(s, rng, lo, hi);
  t.set_requires_grad();
  return t;
}

inline Td weighted_sum(const Td& out, Rng& rng) { return sum(mul(out, rand_uniform<double>(out.shape(), rng, -1, 1))); }

// Moves every parameter off its initial value (zero-initialized branches
// would otherwise block upstream gradients) and collects it.
template <class P>
void liven(P& params, Rng& rng, std::vector<NamedTensor>& out, const std::string& prefix, double scale = 0.2) {
  params.visit(prefix, [&](const std::string& n, Td& t) {
    for (auto& v : t.mutable_data()) v += scale * (rng.uniform() - 0.5);
    t.set_requires_grad();
    out.emplace_back(n, t);
  });
}

struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t)> run;
};

inline std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"ops.pointwise", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto a = leaf({6}, rng, 0.2, 2.0), b = leaf({6}, rng, -2, 2);
                     auto f = [&] {
                       auto u = add(add(exp(b), log(a)), add(sigmoid(b), silu(b)));
                       u = add(u, add(softplus(b), gelu(b)));
                       u = add(u, add(div(b, a), add(square(b), pow_scalar(a, 1.5))));
                       Rng w(seed + 1);
                       return weighted_sum(add(u, expm1(a)), w);
                     };
                     return grad_check(f, {{"a", a}, {"b", b}});
                   }});
  cases.push_back({"ops.linear_norm_softmax", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto x = leaf({2, 3, 5}, rng), w = leaf({5, 4}, rng), bias = leaf({4}, rng);
                     auto g = leaf({4}, rng), be = leaf({4}, rng);
                     auto f = [&] {
                       Rng r(seed + 1);
                       return weighted_sum(softmax(layer_norm(linear(x, w, &bias), g, be)), r);
                     };
                     return grad_check(f, {{"x", x}, {"w", w}, {"bias", bias}, {"gamma", g}, {"beta", be}});
                   }});
  cases.push_back({"ops.shape_reduce", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto x = leaf({2, 3, 4}, rng), y = leaf({2, 2, 4}, rng);
                     auto f = [&] {
                       auto q = permute(concat(std::vector<Td>{x, y}, 1), {2, 0, 1});
                       auto s = index_select(slice(q, 2, 1, 3), 0, {3, 0, 0, 2});
                       Rng r(seed + 1);
                       return add(weighted_sum(s, r), weighted_sum(sum_axis(mul(x, x), 1), r));
                     };
                     return grad_check(f, {{"x", x}, {"y", y}});
                   }});
  cases.push_back({"ops.contract_im2col", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto a = leaf({2, 3, 4}, rng), b = leaf({3, 4, 5}, rng), img = leaf({1, 3, 4, 2}, rng);
                     auto f = [&] {
                       Rng r(seed + 1);
                       return add(weighted_sum(contract(a, b, "rbi,bio->rbo"), r), weighted_sum(im2col3x3(img), r));
                     };
                     return grad_check(f, {{"a", a}, {"b", b}, {"img", img}});
                   }});
  cases.push_back({"ops.fft", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto x = leaf({3, 10}, rng), re = leaf({3, 5}, rng), im = leaf({3, 5}, rng);
                     auto f = [&] {
                       auto s = rfft_channels(x);
                       Rng r(seed + 1);
                       return add(weighted_sum(concat(std::vector<Td>{s.re, s.im}, 1), r),
                                  weighted_sum(irfft_channels(ComplexPair<double>{re, im}, 9), r));
                     };
                     return grad_check(f, {{"x", x}, {"re", re}, {"im", im}});
                   }});
  cases.push_back({"ops.piecewise", [](std::uint64_t seed) {
                     Rng rng(seed);
                     // entries kept 0.2 away from every kink
                     std::vector<double> va(8), vb(8);
                     for (std::size_t i = 0; i < 8; ++i) {
                       va[i] = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.2, 0.8);
                       vb[i] = va[i] + (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.2, 0.5);
                     }
                     auto a = Td::from_data({8}, va), b = Td::from_data({8}, vb);
                     a.set_requires_grad();
                     b.set_requires_grad();
                     auto f = [&] {
                       auto u = add(add(relu(a), abs(a)), add(maximum(a, b), minimum(a, b)));
                       u = add(u, add(clamp(a, -1.0, 0.0), mean(b)));
                       Rng drop(seed + 2);
                       u = add(u, dropout(b, 0.3, true, &drop));
                       Rng r(seed + 1);
                       return weighted_sum(u, r);
                     };
                     return grad_check(f, {{"a", a}, {"b", b}});
                   }});
  cases.push_back({"ssm.zoh", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto A = leaf({3, 4}, rng, -2.0, -0.1), delta = leaf({2, 2, 3}, rng, 0.05, 0.5);
                     auto f = [&] {
                       auto d = zoh_discretize(A, delta);
                       Rng r(seed + 1);
                       return add(weighted_sum(d.Abar, r), weighted_sum(d.Bbar_scale, r));
                     };
                     return grad_check(f, {{"A", A}, {"delta", delta}});
                   }});
  for (bool fast : {false, true}) {
    cases.push_back({fast ? "ssm.scan_fast" : "ssm.scan_ref", [fast](std::uint64_t seed) {
                       Rng rng(seed);
                       auto Abar = leaf({2, 9, 3, 2}, rng, 0.05, 0.99), Bs = leaf({2, 9, 3, 2}, rng, 0.0, 1.0);
                       auto Bm = leaf({2, 9, 2}, rng), Cm = leaf({2, 9, 2}, rng), x = leaf({2, 9, 3}, rng);
                       auto f = [&] {
                         Rng r(seed + 1);
                         auto y = fast ? selective_scan_fast(Abar, Bs, Bm, Cm, x, 4) : selective_scan_ref(Abar, Bs, Bm, Cm, x);
                         return weighted_sum(y, r);
                       };
                       return grad_check(f, {{"Abar", Abar}, {"Bbar", Bs}, {"B", Bm}, {"C", Cm}, {"x", x}});
                     }});
  }
  cases.push_back({"mamba", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto p = mamba_init<double>(4, 8, 4, 4, seed);
                     std::vector<NamedTensor> params;
                     auto x = leaf({2, 5, 4}, rng);
                     params.emplace_back("x", x);
                     liven(p, rng, params, "mamba.");
                     auto f = [&] {
                       Rng r(seed + 1);
                       return weighted_sum(mamba_forward(x, p), r);
                     };
                     return grad_check(f, params);
                   }});
  cases.push_back({"multifft", [](std::uint64_t seed) {
                     Rng rng(seed);
                     auto p = multifft_init<double>(8, 0, rng);
                     std::vector<NamedTensor> params;
                     auto x = leaf({2, 3, 8}, rng);
                     params.emplace_back("x", x);
                     liven(p, rng, params, "mfft.");
                     auto f = [&] {
                       Rng r(seed + 1);
                       return weighted_sum(multifft_forward(x, p), r);
                     };
                     return grad_check(f, params);
                   }});
  cases.push_back({"stma", [](std::uint64_t seed) {
                     Rng rng(seed);
                     StmaConfig cfg;
                     cfg.dim = 16;
                     cfg.dropout = 0.0;
                     auto p = stma_init<double>(cfg, seed);
                     std::vector<NamedTensor> params;
                     auto x = leaf({2, 8, 16}, rng);
                     params.emplace_back("x", x);
                     liven(p, rng, params, "stma.");
                     const auto layout = stream_layout(Modality::kV, 1, 4, 1, 4);
                     GradCheckOptions opt;
                     opt.max_entries_per_param = 24;
                     opt.sample_seed = seed;
                     auto f = [&] {
                       Rng r(seed + 1);
                       return weighted_sum(stma_forward(TokenBatch<double>{x, layout}, p, false, nullptr).data, r);
                     };
                     return grad_check(f, params, opt);
                   }});
  cases.push_back({"dmfm", [](std::uint64_t seed) {
                     Rng rng(seed);
                     DmfmConfig cfg;
                     cfg.dim = 4;
                     cfg.grid_h = cfg.grid_w = 2;
                     auto p = dmfm_init<double>(cfg, seed);
                     std::vector<NamedTensor> params;
                     auto v = leaf({1, 4, 4}, rng), x = leaf({1, 4, 4}, rng);
                     params.emplace_back("sV", v);
                     params.emplace_back("sX", x);
                     liven(p, rng, params, "dmfm.");
                     const auto lv = stream_layout(Modality::kV, 0, 0, 1, 4), lx = stream_layout(Modality::kX, 0, 0, 1, 4);
                     GradCheckOptions opt;
                     opt.max_entries_per_param = 32;
                     opt.sample_seed = seed;
                     auto f = [&] {
                       Rng r(seed + 1);
                       return weighted_sum(dmfm_forward(TokenBatch<double>{v, lv}, TokenBatch<double>{x, lx}, p), r);
                     };
                     return grad_check(f, params, opt);
                   }});
  cases.push_back({"head", [](std::uint64_t seed) {
                     Rng rng(seed);
                     // D = 16 so the last norm spans 4 channels; over 2 it is
                     // nearly a sign function and central differences lose accuracy
                     auto p = head_init<double>(16, seed);
                     std::vector<NamedTensor> params;
                     auto feat = leaf({1, 3, 3, 16}, rng);
                     params.emplace_back("features", feat);
                     liven(p, rng, params, "head.", 0.05);
                     GradCheckOptions opt;
                     opt.max_entries_per_param = 24;
                     opt.sample_seed = seed;
                     auto f = [&] {
                       const auto pred = head_forward(feat, p);
                       Rng r(seed + 1);
                       return add(add(weighted_sum(pred.cls, r), weighted_sum(pred.size, r)), weighted_sum(pred.offset, r));
                     };
                     return grad_check(f, params, opt);
                   }});
  cases.push_back({"loss_total", [](std::uint64_t seed) {
                     Rng rng(seed);
                     BoxPrediction<double> pred{leaf({2, 4, 4, 1}, rng, 0.02, 0.98), leaf({2, 4, 4, 2}, rng, 0.05, 0.6),
                                                leaf({2, 4, 4, 2}, rng, 0.02, 0.98)};
                     const std::vector<FrameTarget> tg{{{0.37, 0.58, 0.21, 0.33}, true}, {{0.81, 0.1, 0.3, 0.12}, true}};
                     return grad_check([&] { return loss_total(pred, tg).total; },
                                       {{"cls", pred.cls}, {"size", pred.size}, {"offset", pred.offset}});
                   }});
  cases.push_back({"tracker", [](std::uint64_t seed) {
                     TrackerConfig c;
                     c.template_size = 32;
                     c.search_size = 48;
                     c.layers = 2;
                     c.stma_blocks = 1;
                     c.dropout = 0.0;
                     c.seed = seed;
                     auto m = build_model<double>(c);
                     Rng rng(seed);
                     std::vector<NamedTensor> params;
                     m.visit_trainable([&](const std::string& n, Td& t) {
                       for (auto& v : t.mutable_data()) v += 0.1 * (rng.uniform() - 0.5);
                       params.emplace_back(n, t);
                     });
                     TrackInput<double> in{rand_uniform<double>({1, 8, 768}, rng, 0, 1), rand_uniform<double>({1, 8, 768}, rng, 0, 1),
                                           rand_uniform<double>({1, 9, 768}, rng, 0, 1), rand_uniform<double>({1, 9, 768}, rng, 0, 1), 2};
                     const std::vector<FrameTarget> tg{{{0.4, 0.55, 0.3, 0.25}, true}};
                     GradCheckOptions opt;
                     opt.max_entries_per_param = 3;
                     opt.sample_seed = seed;
                     return grad_check([&] { return loss_total(forward_track(in, m), tg).total; }, params, opt);
                   }});
  return cases;
}

}  // namespace detail

inline GradSuiteReport run_grad_suite(const std::vector<std::uint64_t>& seeds) {
  GradSuiteReport rep;
  for (const auto& c : detail::grad_cases())
    for (auto seed : seeds) {
      const auto r = c.run(seed);
      GradSuiteEntry e{c.name, seed, r.max_rel_error, ""};
      for (const auto& p : r.params)
        if (p.max_rel_error == r.max_rel_error) e.worst_param = p.name;
      rep.entries.push_back(e);
    }
  return rep;
}

inline std::vector<std::string> grad_suite_names() {
  std::vector<std::string> out;
  for (const auto& c : detail::grad_cases()) out.push_back(c.name);
  return out;
}

struct ScanSweepReport {
  double worst_f32 = 0, worst_f64 = 0;
  std::size_t shapes = 0;

  bool passed(double tol32 = 1e-5, double tol64 = 1e-10) const { return worst_f32 < tol32 && worst_f64 < tol64; }
};

// Fast vs reference scan over a randomized grid of (B, L, D, N, chunk).
inline ScanSweepReport run_scan_sweep(std::uint64_t seed, std::size_t shapes = 48) {
  Rng rng(seed);
  ScanSweepReport rep;
  const std::size_t Ls[] = {1, 2, 7, 16, 31, 64, 129, 257};
  auto diff = [](const auto& a, const auto& b) {
    double w = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) w = std::max(w, std::abs(double(a[i]) - double(b[i])));
    return w;
  };
  for (std::size_t i = 0; i < shapes; ++i) {
    const std::size_t B = 1 + rng.below(3), L = Ls[rng.below(8)], D = 1 + rng.below(24), N = 1 + rng.below(16);
    const std::size_t chunk = 1 + rng.below(40);
    const std::uint64_t s = rng.next_u64();
    auto run = [&](auto tag) {
      using T = decltype(tag);
      Rng r(s);
      auto Abar = rand_uniform<T>({B, L, D, N}, r, 0.05, 0.999), Bs = rand_uniform<T>({B, L, D, N}, r, 0.0, 1.0);
      auto Bm = rand_uniform<T>({B, L, N}, r, -1, 1), Cm = rand_uniform<T>({B, L, N}, r, -1, 1);
      auto x = rand_uniform<T>({B, L, D}, r, -1, 1);
      return diff(selective_scan_fast(Abar, Bs, Bm, Cm, x, chunk), selective_scan_ref(Abar, Bs, Bm, Cm, x));
    };
    rep.worst_f32 = std::max(rep.worst_f32, run(float{}));
    rep.worst_f64 = std::max(rep.worst_f64, run(double{}));
    ++rep.shapes;
  }
  return rep;
}

}  // namespace ubatrack
